"""Layer graph descriptions for the two U-shaped reconstruction networks."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Optional

KINDS = ("conv", "transposed_conv", "batch_norm", "relu", "sigmoid", "fully_connected", "concat_skip", "flatten")
PARAMETERIZED = ("conv", "transposed_conv", "fully_connected")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    output_padding: int = 0
    out_features: int = 0
    skip_from: Optional[str] = None
    trainable: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def parameterized(self) -> bool:
        return self.kind in PARAMETERIZED

    def arch_key(self) -> str:
        return (
            f"{self.name}:{self.kind}:{self.out_channels}:{self.kernel}:{self.stride}:{self.padding}:"
            f"{self.output_padding}:{self.out_features}:{self.skip_from or ''}"
        )


def _size(shape) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


def infer_shapes(layers, input_shape) -> dict[str, tuple[tuple[int, ...], tuple[int, ...]]]:
    shapes = {}
    seen = {}
    cur = tuple(input_shape)
    for layer in layers:
        inp = cur
        k = layer.kind
        if k in ("conv", "transposed_conv", "batch_norm", "concat_skip") and len(cur) != 3:
            raise ValueError(f"{layer.name}: expects a (C, H, W) input, got {cur}")
        if k == "conv":
            c, h, w = cur
            ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            if ho < 1 or wo < 1:
                raise ValueError(f"{layer.name}: kernel larger than input")
            cur = (layer.out_channels, ho, wo)
        elif k == "transposed_conv":
            c, h, w = cur
            ho = (h - 1) * layer.stride - 2 * layer.padding + layer.kernel + layer.output_padding
            wo = (w - 1) * layer.stride - 2 * layer.padding + layer.kernel + layer.output_padding
            cur = (layer.out_channels, ho, wo)
        elif k == "concat_skip":
            if layer.skip_from not in seen:
                raise ValueError(f"{layer.name}: skip source {layer.skip_from!r} is not an earlier layer")
            src = seen[layer.skip_from]
            if len(src) != 3 or src[1:] != cur[1:]:
                raise ValueError(f"{layer.name}: skip from {layer.skip_from} has shape {src}, current is {cur}")
            cur = (cur[0] + src[0],) + cur[1:]
        elif k == "flatten":
            cur = (_size(cur),)
        elif k == "fully_connected":
            if len(cur) != 1:
                raise ValueError(f"{layer.name}: fully connected layer needs a flattened input")
            cur = (layer.out_features,)
        shapes[layer.name] = (inp, cur)
        seen[layer.name] = cur
    return shapes


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layers; ``concat_skip`` appends the output of ``skip_from`` on the channel axis."""

    name: str
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    output_shape: tuple[int, int, int]

    def __post_init__(self):
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self.layer_shapes  # validates the whole graph

    def __getitem__(self, name: str) -> LayerSpec:
        return self.layers[self.index(name)]

    def index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    @cached_property
    def layer_shapes(self) -> dict[str, tuple[tuple[int, ...], tuple[int, ...]]]:
        """Per-sample (input shape, output shape) of every layer; raises on incompatibility."""
        shapes = infer_shapes(self.layers, self.input_shape)
        final = shapes[self.layers[-1].name][1] if self.layers else tuple(self.input_shape)
        if _size(final) != _size(self.output_shape):
            raise ValueError(f"network produces {final}, declared output {self.output_shape}")
        return shapes

    @classmethod
    def sequential(cls, name: str, layers, input_shape) -> "NetworkSpec":
        """Build a spec whose output shape is whatever the layers produce."""
        layers = tuple(layers)
        shapes = infer_shapes(layers, input_shape)
        return cls(name, layers, tuple(input_shape), shapes[layers[-1].name][1])

    def param_shapes(self, name: str) -> dict[str, tuple[int, ...]]:
        layer = self[name]
        inp, out = self.layer_shapes[name]
        if layer.kind == "conv":
            return {"w": (layer.out_channels, inp[0], layer.kernel, layer.kernel), "b": (layer.out_channels,)}
        if layer.kind == "transposed_conv":
            return {"w": (inp[0], layer.out_channels, layer.kernel, layer.kernel), "b": (layer.out_channels,)}
        if layer.kind == "fully_connected":
            return {"w": (inp[0], layer.out_features), "b": (layer.out_features,)}
        if layer.kind == "batch_norm":
            c = (inp[0],)
            return {"gamma": c, "beta": c, "running_mean": c, "running_var": c}
        return {}

    def parameter_count(self, include_buffers: bool = False) -> int:
        total = 0
        for layer in self.layers:
            for key, shape in self.param_shapes(layer.name).items():
                if key.startswith("running_") and not include_buffers:
                    continue
                total += _size(shape)
        return total

    @property
    def parameterized_layers(self) -> list[str]:
        return [layer.name for layer in self.layers if layer.parameterized]

    @property
    def trainable_layers(self) -> list[str]:
        return [layer.name for layer in self.layers if layer.trainable and self.param_shapes(layer.name)]

    def digest(self) -> bytes:
        """Architecture hash; trainability flags are excluded so weights move between freeze states."""
        text = "|".join([self.name, repr(tuple(self.input_shape)), repr(tuple(self.output_shape))]
                        + [layer.arch_key() for layer in self.layers])
        return hashlib.sha256(text.encode("ascii")).digest()

    def with_trainable(self, trainable: dict[str, bool]) -> "NetworkSpec":
        layers = tuple(replace(layer, trainable=trainable.get(layer.name, layer.trainable)) for layer in self.layers)
        return replace_layers(self, layers)


def replace_layers(spec: NetworkSpec, layers) -> NetworkSpec:
    return NetworkSpec(spec.name, tuple(layers), spec.input_shape, spec.output_shape)


def _block(prefix: str, kind: str, channels: int, kernel: int, stride: int) -> list[LayerSpec]:
    pad = kernel // 2
    extra = {"output_padding": stride - 1} if kind == "transposed_conv" else {}
    return [
        LayerSpec(f"{prefix}_{'tconv' if kind == 'transposed_conv' else 'conv'}", kind, out_channels=channels,
                  kernel=kernel, stride=stride, padding=pad, **extra),
        LayerSpec(f"{prefix}_bn", "batch_norm"),
        LayerSpec(f"{prefix}_relu", "relu"),
    ]


def _trunk(channels: tuple[int, int, int], skip_last: bool) -> list[LayerSpec]:
    c1, c2, c3 = channels
    layers = []
    layers += _block("enc1", "conv", c1, 3, 1)
    layers += _block("enc2", "conv", c2, 3, 2)
    layers += _block("enc3", "conv", c3, 3, 2)
    layers += _block("dec1", "transposed_conv", c2, 3, 2)
    layers.append(LayerSpec("dec1_skip", "concat_skip", skip_from="enc2_relu"))
    layers += _block("dec2", "transposed_conv", c1, 3, 2)
    if skip_last:
        layers.append(LayerSpec("dec2_skip", "concat_skip", skip_from="enc1_relu"))
    return layers


def _check_crop(crop_size: int):
    if crop_size < 4 or crop_size % 4:
        raise ValueError(f"crop_size must be a positive multiple of 4, got {crop_size}")


def build_lismu_fcn(crop_size: int = 32, channels: tuple[int, int, int] = (16, 32, 64)) -> NetworkSpec:
    """Fully convolutional U-net: 3 encoder stages, 2 decoder stages with skips, 1x1 conv + sigmoid."""
    _check_crop(crop_size)
    layers = _trunk(channels, skip_last=True)
    layers += [LayerSpec("out_conv", "conv", out_channels=1, kernel=1), LayerSpec("out_sigmoid", "sigmoid")]
    shape = (1, crop_size, crop_size)
    return NetworkSpec("lismu_fcn", tuple(layers), shape, shape)


def build_lismu_ocn(crop_size: int = 32, channels: tuple[int, int, int] = (16, 32, 64)) -> NetworkSpec:
    """Same trunk as the FCN, but the head is flatten -> fully connected (c1*c*c -> c*c) -> sigmoid.

    The second decoder stage feeds the dense head directly (no 16-channel skip),
    so the dense layer sees ``channels[0] * crop_size**2`` features.
    """
    _check_crop(crop_size)
    layers = _trunk(channels, skip_last=False)
    layers += [
        LayerSpec("flatten", "flatten"),
        LayerSpec("out_fc", "fully_connected", out_features=crop_size * crop_size),
        LayerSpec("out_sigmoid", "sigmoid"),
    ]
    shape = (1, crop_size, crop_size)
    return NetworkSpec("lismu_ocn", tuple(layers), shape, shape)


def build_network(architecture: str, crop_size: int = 32) -> NetworkSpec:
    builders = {"fcn": build_lismu_fcn, "ocn": build_lismu_ocn}
    try:
        return builders[architecture](crop_size)
    except KeyError:
        raise ValueError(f"unknown architecture {architecture!r}; expected 'fcn' or 'ocn'") from None


def attached_norms(spec: NetworkSpec) -> dict[str, str]:
    """Map each batch-norm layer to the parameterized layer it normalises."""
    owner = {}
    last = None
    for layer in spec.layers:
        if layer.parameterized:
            last = layer.name
        elif layer.kind == "batch_norm" and last is not None:
            owner[layer.name] = last
    return owner


def freeze_all_but_last_k(spec: NetworkSpec, k: int) -> NetworkSpec:
    """Leave the ``k`` parameterized layers nearest the output trainable and freeze the rest.

    Batch-norm layers follow the trainability of the layer they normalise.
    """
    params = spec.parameterized_layers
    if not 1 <= k <= len(params):
        raise ValueError(f"k must be in [1, {len(params)}], got {k}")
    keep = set(params[-k:])
    owner = attached_norms(spec)
    flags = {}
    for layer in spec.layers:
        if layer.parameterized:
            flags[layer.name] = layer.name in keep
        elif layer.kind == "batch_norm":
            flags[layer.name] = owner.get(layer.name) in keep
    return spec.with_trainable(flags)
