"""Parameters, forward/backward passes, SGD and the weight file for a NetworkSpec."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .._io import atomic_write_bytes
from . import functional as F
from .spec import NetworkSpec

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
PARAM_ORDER = ("w", "b", "gamma", "beta", "running_mean", "running_var")
BUFFERS = ("running_mean", "running_var")


class StaleCacheError(RuntimeError):
    pass


class DivergenceError(FloatingPointError):
    pass


class WeightFileError(ValueError):
    pass


@dataclass
class TrainState:
    params: dict[str, dict[str, np.ndarray]]
    velocity: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    # provenance of the training data: optical-config digest and diffuser seed
    config_digest: bytes = bytes(32)
    screen_seed: int = 0

    @property
    def dtype(self):
        for p in self.params.values():
            for arr in p.values():
                return arr.dtype
        return np.dtype(np.float32)

    def copy(self) -> "TrainState":
        return TrainState(
            {k: {n: a.copy() for n, a in p.items()} for k, p in self.params.items()},
            {k: {n: a.copy() for n, a in p.items()} for k, p in self.velocity.items()},
            self.step,
            self.seed,
            self.config_digest,
            self.screen_seed,
        )

    def astype(self, dtype) -> "TrainState":
        conv = lambda d: {k: {n: a.astype(dtype) for n, a in p.items()} for k, p in d.items()}
        return TrainState(
            conv(self.params), conv(self.velocity), self.step, self.seed, self.config_digest, self.screen_seed
        )


@dataclass
class ForwardCache:
    step: int
    spec_digest: bytes
    batch: int
    entries: list = field(default_factory=list)


def _uniform(rng, limit, shape, dtype):
    return ((rng.random(shape) * 2.0 - 1.0) * limit).astype(dtype)


def init_state(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> TrainState:
    """He-uniform weights for layers feeding a ReLU, Xavier-uniform for the output layer."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    last_param = spec.parameterized_layers[-1]
    for layer in spec.layers:
        shapes = spec.param_shapes(layer.name)
        if not shapes:
            continue
        p = {}
        if layer.kind == "batch_norm":
            c = shapes["gamma"]
            p = {"gamma": np.ones(c, dtype), "beta": np.zeros(c, dtype),
                 "running_mean": np.zeros(c, dtype), "running_var": np.ones(c, dtype)}
        else:
            wshape = shapes["w"]
            if layer.kind == "conv":
                fan_in, fan_out = int(np.prod(wshape[1:])), wshape[0] * wshape[2] * wshape[3]
            elif layer.kind == "transposed_conv":
                fan_in, fan_out = wshape[0] * wshape[2] * wshape[3], int(np.prod(wshape[1:]))
            else:
                fan_in, fan_out = wshape
            if layer.name == last_param:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
            else:
                limit = np.sqrt(6.0 / fan_in)
            p = {"w": _uniform(rng, limit, wshape, dtype), "b": np.zeros(shapes["b"], dtype)}
        params[layer.name] = p
    return TrainState(params=params, velocity={}, step=0, seed=seed)


def _needs_grad_from(spec: NetworkSpec) -> int:
    """Index of the earliest trainable layer; backprop can stop there."""
    for i, layer in enumerate(spec.layers):
        if layer.trainable and spec.param_shapes(layer.name):
            return i
    return len(spec.layers)


def forward(state: TrainState, spec: NetworkSpec, batch: np.ndarray, mode: str = "eval"):
    """Run the network on ``batch`` of shape ``(B, *spec.input_shape)``.

    Returns ``(output, cache)``.  In ``train`` mode every trainable batch-norm
    layer normalises with batch statistics and updates its running buffers;
    frozen batch-norm layers and all layers in ``eval`` mode use the running
    statistics and leave the state untouched.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1:] != tuple(spec.input_shape):
        raise ValueError(f"batch shape {batch.shape} does not match input shape {spec.input_shape}")
    if mode == "train" and batch.shape[0] < 2:
        raise ValueError("train mode needs a batch of at least 2 samples for batch statistics")
    x = batch.astype(state.dtype, copy=False)
    cache = ForwardCache(state.step, spec.digest(), batch.shape[0])
    outputs = {}
    for layer in spec.layers:
        p = state.params.get(layer.name)
        k = layer.kind
        if k == "conv":
            x, c = F.conv2d_forward(x, p["w"], p["b"], layer.stride, layer.padding)
        elif k == "transposed_conv":
            x, c = F.conv_transpose2d_forward(x, p["w"], p["b"], layer.stride, layer.padding, layer.output_padding)
        elif k == "batch_norm":
            train = mode == "train" and layer.trainable
            x, c = F.batch_norm_forward(x, p["gamma"], p["beta"], p["running_mean"], p["running_var"],
                                        train, BN_MOMENTUM, BN_EPS)
        elif k == "relu":
            x, c = F.relu_forward(x)
        elif k == "sigmoid":
            x, c = F.sigmoid_forward(x)
        elif k == "fully_connected":
            x, c = F.linear_forward(x, p["w"], p["b"])
        elif k == "flatten":
            c = x.shape
            x = x.reshape(x.shape[0], -1)
        elif k == "concat_skip":
            c = x.shape[1]
            x = np.concatenate([x, outputs[layer.skip_from]], axis=1)
        cache.entries.append(c)
        outputs[layer.name] = x
    out = x.reshape((batch.shape[0],) + tuple(spec.output_shape))
    return out, cache


def backward(state: TrainState, spec: NetworkSpec, cache: ForwardCache, loss_gradient: np.ndarray):
    """Gradients of the loss w.r.t. every trainable parameter.

    Returns ``{layer_name: {param_name: grad}}``; frozen layers are absent.
    """
    if cache.step != state.step or cache.spec_digest != spec.digest():
        raise StaleCacheError("forward cache does not belong to the current state")
    stop = _needs_grad_from(spec)
    grads = {}
    pending = {}
    last_shape = spec.layer_shapes[spec.layers[-1].name][1]
    g = np.asarray(loss_gradient, dtype=state.dtype).reshape((cache.batch,) + tuple(last_shape))
    for i in range(len(spec.layers) - 1, stop - 1, -1):
        layer = spec.layers[i]
        if layer.name in pending:
            g = g + pending.pop(layer.name)
        c = cache.entries[i]
        need_dx = i > stop
        k = layer.kind
        if k == "conv":
            dx, dw, db = F.conv2d_backward(g, c, need_dx)
            if layer.trainable:
                grads[layer.name] = {"w": dw, "b": db}
        elif k == "transposed_conv":
            dx, dw, db = F.conv_transpose2d_backward(g, c, need_dx)
            if layer.trainable:
                grads[layer.name] = {"w": dw, "b": db}
        elif k == "batch_norm":
            dx, dgamma, dbeta = F.batch_norm_backward(g, c, need_dx)
            if layer.trainable:
                grads[layer.name] = {"gamma": dgamma, "beta": dbeta}
        elif k == "fully_connected":
            dx, dw, db = F.linear_backward(g, c, state.params[layer.name]["w"], need_dx)
            if layer.trainable:
                grads[layer.name] = {"w": dw, "b": db}
        elif k == "relu":
            dx = F.relu_backward(g, c)
        elif k == "sigmoid":
            dx = F.sigmoid_backward(g, c)
        elif k == "flatten":
            dx = g.reshape(c)
        elif k == "concat_skip":
            dx = g[:, :c]
            skip = g[:, c:]
            pending[layer.skip_from] = pending[layer.skip_from] + skip if layer.skip_from in pending else skip
        g = dx
    return grads


def sgd_step(state: TrainState, gradients, learning_rate: float = 1e-2, momentum: float = 0.9) -> TrainState:
    """``v = momentum * v + g``; ``p -= learning_rate * v``.  Updates ``state`` in place and returns it."""
    if not learning_rate > 0:
        raise ValueError("learning rate must be positive")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    for layer_grads in gradients.values():
        for gval in layer_grads.values():
            if not np.all(np.isfinite(gval)):
                raise DivergenceError("divergence: non-finite gradient")
    for name, layer_grads in gradients.items():
        vel = state.velocity.setdefault(name, {})
        for key, gval in layer_grads.items():
            if key in BUFFERS:
                continue
            v = vel.get(key)
            if v is None:
                v = vel[key] = np.zeros_like(state.params[name][key])
            v *= momentum
            v += gval
            state.params[name][key] -= learning_rate * v
    state.step += 1
    return state


WEIGHT_MAGIC = b"LSMW"
WEIGHT_VERSION = 1
_WEIGHT_HEADER = struct.Struct("<4sH32sQQI32sQ")


def weights_to_bytes(state: TrainState, spec: NetworkSpec) -> bytes:
    """Little-endian float32 blobs per layer in spec order, running statistics included."""
    names = [layer.name for layer in spec.layers if layer.name in state.params]
    buf = io.BytesIO()
    if len(state.config_digest) != 32:
        raise WeightFileError("config digest must be 32 bytes")
    buf.write(_WEIGHT_HEADER.pack(
        WEIGHT_MAGIC, WEIGHT_VERSION, spec.digest(), state.step, state.seed, len(names),
        state.config_digest, state.screen_seed,
    ))
    for name in names:
        expected = spec.param_shapes(name)
        for key in PARAM_ORDER:
            if key not in expected:
                continue
            arr = state.params[name][key]
            if arr.shape != expected[key]:
                raise WeightFileError(f"shape mismatch in {name}.{key}: {arr.shape} vs {expected[key]}")
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def weights_from_bytes(data: bytes, spec: NetworkSpec) -> TrainState:
    if len(data) < _WEIGHT_HEADER.size or data[:4] != WEIGHT_MAGIC:
        raise WeightFileError("bad weight file")
    _, version, digest, step, seed, count, cfg_digest, screen_seed = _WEIGHT_HEADER.unpack_from(data)
    if version != WEIGHT_VERSION:
        raise WeightFileError(f"bad weight file: unsupported version {version}")
    if digest != spec.digest():
        raise WeightFileError(f"shape mismatch: weights were saved for network {digest.hex()[:16]}, "
                              f"expected {spec.digest().hex()[:16]}")
    names = [layer.name for layer in spec.layers if spec.param_shapes(layer.name)]
    if count != len(names):
        raise WeightFileError("shape mismatch: layer count differs")
    offset = _WEIGHT_HEADER.size
    params = {}
    for name in names:
        expected = spec.param_shapes(name)
        p = {}
        for key in PARAM_ORDER:
            if key not in expected:
                continue
            n = int(np.prod(expected[key]))
            if offset + 4 * n > len(data):
                raise WeightFileError("bad weight file: truncated")
            p[key] = np.frombuffer(data, "<f4", n, offset).reshape(expected[key]).astype(np.float32)
            offset += 4 * n
        params[name] = p
    if offset != len(data):
        raise WeightFileError("bad weight file: trailing bytes")
    return TrainState(params, {}, int(step), int(seed), bytes(cfg_digest), int(screen_seed))


def save_weights(state: TrainState, spec: NetworkSpec, path) -> Path:
    return atomic_write_bytes(path, weights_to_bytes(state, spec))


def load_weights(path, spec: NetworkSpec) -> TrainState:
    return weights_from_bytes(Path(path).read_bytes(), spec)
