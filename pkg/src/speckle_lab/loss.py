"""Training objective: summed-pixel MSE + Sobel/Laplacian balance term + L2 weight penalty.

All image terms are computed per image and averaged over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn.spec import NetworkSpec

SOBEL = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.int64)
LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.int64)


def _frozen(a):
    a = np.array(a, dtype=np.int64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LossConfig:
    """``balance_lambda`` > 0 favours smooth outputs, < 0 favours sharp ones."""

    balance_lambda: float = 0.0
    l2_sigma: float = 0.0
    sobel_kernel: np.ndarray = field(default_factory=lambda: _frozen(SOBEL), repr=False, compare=False)
    laplacian_kernel: np.ndarray = field(default_factory=lambda: _frozen(LAPLACIAN), repr=False, compare=False)

    def __post_init__(self):
        if not np.array_equal(self.sobel_kernel, SOBEL) or not np.array_equal(self.laplacian_kernel, LAPLACIAN):
            raise ValueError("the balance kernels are fixed to the 3x3 Sobel and Laplacian operators")
        if self.l2_sigma < 0:
            raise ValueError("l2_sigma must be non-negative")

    @classmethod
    def for_architecture(cls, architecture: str) -> "LossConfig":
        """Default magnitudes |lambda| = 1e-3, sigma = 1e-4; sharpening for fcn, smoothing for ocn."""
        sign = {"fcn": -1.0, "ocn": 1.0}[architecture]
        return cls(balance_lambda=sign * 1e-3, l2_sigma=1e-4)


@dataclass(frozen=True)
class LossValue:
    mse: float
    balance: float
    l2: float

    @property
    def total(self) -> float:
        return self.mse + self.balance + self.l2


def _check_pair(output, target):
    if output.shape != target.shape:
        raise ValueError(f"shape mismatch: {output.shape} vs {target.shape}")


def _as_batch(y: np.ndarray) -> np.ndarray:
    if y.ndim == 2:
        return y[None, None]
    if y.ndim == 3:
        return y[:, None]
    return y


def mse_loss(output: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum of squared pixel errors per image, averaged over the batch; returns (value, d/d output)."""
    _check_pair(output, target)
    diff = output - target
    n = _as_batch(output).shape[0]
    return float(np.sum(diff * diff) / n), (2.0 / n) * diff


def correlate_valid(y: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-region 2-D correlation over the last two axes."""
    kh, kw = kernel.shape
    h, w = y.shape[-2:]
    out = np.zeros(y.shape[:-2] + (h - kh + 1, w - kw + 1), dtype=y.dtype)
    for i in range(kh):
        for j in range(kw):
            if kernel[i, j]:
                out += kernel[i, j] * y[..., i:i + h - kh + 1, j:j + w - kw + 1]
    return out


def correlate_adjoint(r: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`correlate_valid`: scatters responses back onto the input grid."""
    kh, kw = kernel.shape
    ho, wo = r.shape[-2:]
    out = np.zeros(r.shape[:-2] + (ho + kh - 1, wo + kw - 1), dtype=r.dtype)
    for i in range(kh):
        for j in range(kw):
            if kernel[i, j]:
                out[..., i:i + ho, j:j + wo] += kernel[i, j] * r
    return out


def edge_energy(y: np.ndarray, kernels=(SOBEL, SOBEL.T, LAPLACIAN)) -> np.ndarray:
    """Per-image sum of squared valid responses to ``kernels``."""
    y = _as_batch(np.asarray(y, dtype=np.float64))
    return sum(np.sum(correlate_valid(y, k) ** 2, axis=(-3, -2, -1)) for k in kernels)


def balance_loss(output: np.ndarray, cfg: LossConfig) -> tuple[float, np.ndarray]:
    # true convolution flips the kernel; that only negates the responses, leaving the energy unchanged
    if output.shape[-1] < 3 or output.shape[-2] < 3:
        raise ValueError("balance loss needs at least 3x3 images")
    n = _as_batch(output).shape[0]
    lam = cfg.balance_lambda
    value = 0.0
    grad = np.zeros_like(output)
    if lam == 0:
        return 0.0, grad
    for k in (cfg.sobel_kernel, cfg.sobel_kernel.T, cfg.laplacian_kernel):
        r = correlate_valid(output, k)
        value += float(np.sum(r * r))
        grad += correlate_adjoint(2.0 * r, k)
    return lam * value / n, (lam / n) * grad


def l2_loss(state, spec: NetworkSpec, sigma: float) -> tuple[float, dict]:
    """``sigma * sum(w**2)`` over weight tensors of trainable layers (biases and BN affine excluded)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    value = 0.0
    grads = {}
    for name in spec.trainable_layers:
        w = state.params[name].get("w")
        if w is None:
            continue
        value += float(np.sum(w.astype(np.float64) ** 2))
        grads[name] = {"w": (2.0 * sigma) * w}
    return sigma * value, grads


def total_loss(output, target, state, spec: NetworkSpec, cfg: LossConfig):
    """Returns ``(LossValue, d/d output, weight-space gradients from the L2 term)``."""
    mse, g_mse = mse_loss(output, target)
    bal, g_bal = balance_loss(output, cfg)
    l2, g_w = l2_loss(state, spec, cfg.l2_sigma)
    return LossValue(mse, bal, l2), g_mse + g_bal, g_w


def merge_gradients(a: dict, b: dict) -> dict:
    out = {name: dict(p) for name, p in a.items()}
    for name, p in b.items():
        slot = out.setdefault(name, {})
        for key, g in p.items():
            slot[key] = slot[key] + g if key in slot else g
    return out
