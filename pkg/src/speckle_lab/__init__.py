"""Lensless speckle imaging: diffuser simulation, dataset tooling and numpy reconstruction networks.

Submodules are imported on demand::

    from speckle_lab import optics, dataset, nn, loss, metrics, pipeline
"""

__version__ = "0.1.0"
