"""Minimal numpy network stack for the LISMU-FCN / LISMU-OCN reconstructors."""
from .network import (
    DivergenceError,
    ForwardCache,
    StaleCacheError,
    TrainState,
    WeightFileError,
    backward,
    forward,
    init_state,
    load_weights,
    save_weights,
    sgd_step,
    weights_from_bytes,
    weights_to_bytes,
)
from .spec import (
    LayerSpec,
    NetworkSpec,
    build_lismu_fcn,
    build_lismu_ocn,
    build_network,
    freeze_all_but_last_k,
)

__all__ = [
    "DivergenceError", "ForwardCache", "LayerSpec", "NetworkSpec", "StaleCacheError", "TrainState",
    "WeightFileError", "backward", "build_lismu_fcn", "build_lismu_ocn", "build_network",
    "forward", "freeze_all_but_last_k", "init_state", "load_weights", "save_weights", "sgd_step",
    "weights_from_bytes", "weights_to_bytes",
]
