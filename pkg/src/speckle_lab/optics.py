"""Forward optical model: ground-glass diffuser, angular-spectrum propagation
and the speckle-intensity operator mapping a displayed gray target to the
detector crop.

Conventions
-----------
Transforms are numpy's: ``fft2`` uses the negative exponent and no scaling,
``ifft2`` divides by N**2.  Spatial frequencies are kept in FFT order (DC at
index 0) and evaluated analytically as ``k / (N * pitch)`` for
``k`` in ``[-N/2, N/2)``, i.e. ``np.fft.fftfreq``.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes
from ._resample import resize_bilinear

TWO_PI = 2.0 * np.pi


class DegenerateFieldError(ValueError):
    """The target carries no light, so the speckle normalisation is undefined."""


@dataclass(frozen=True)
class OpticalConfig:
    """Physical parameters of the lensless setup (SI units).

    ``diffuser_at_object`` applies the diffuser at the object plane,
    ``|psi_z2(psi_z1(g * t))|**2``; the default applies it after the first
    free-space leg, ``|psi_z2(t * psi_z1(g))|**2``.  ``height_map_mode``
    samples a surface height and converts it to phase instead of sampling
    the phase directly.
    """

    wavelength_m: float = 633e-9
    delta_n: float = 0.52
    z1_m: float = 20e-3
    z2_m: float = 10e-3
    pixel_pitch_m: float = 8e-6
    grid_size: int = 800
    display_size: int = 140
    crop_size: int = 32
    diffuser_at_object: bool = False
    height_map_mode: bool = False

    def __post_init__(self):
        for name in ("wavelength_m", "delta_n", "z1_m", "z2_m", "pixel_pitch_m"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be a positive finite number, got {value!r}")
        for name in ("grid_size", "display_size", "crop_size"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not self.grid_size >= self.display_size >= self.crop_size:
            raise ValueError("need grid_size >= display_size >= crop_size")
        if self.grid_size % 2:
            raise ValueError("grid_size must be even")

    @classmethod
    def desk(cls, **overrides) -> "OpticalConfig":
        """Reduced 256-pixel grid with the display scaled by the same factor (140 -> 45)."""
        params = dict(grid_size=256, display_size=45)
        params.update(overrides)
        return cls(**params)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def canonical(self) -> str:
        lines = []
        for key, value in self.as_dict().items():
            if isinstance(value, bool):
                value = int(value)
            elif isinstance(value, float):
                value = repr(float(value))
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    def digest(self) -> bytes:
        """32-byte SHA-256 of the canonical ``key=value`` rendering."""
        return hashlib.sha256(self.canonical().encode("ascii")).digest()

    @classmethod
    def from_dict(cls, mapping: dict) -> "OpticalConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in mapping:
                continue
            raw = mapping[f.name]
            if f.type in ("bool", bool):
                kwargs[f.name] = raw if isinstance(raw, bool) else str(raw).strip().lower() in ("1", "true", "yes")
            elif f.type in ("int", int):
                kwargs[f.name] = int(raw)
            else:
                kwargs[f.name] = float(raw)
        unknown = set(mapping) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown optical keys: {sorted(unknown)}")
        return cls(**kwargs)


@dataclass(frozen=True)
class ComplexField:
    values: np.ndarray
    pitch_m: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.complex128)
        if values.ndim != 2:
            raise ValueError("field must be two-dimensional")
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def energy(self) -> float:
        return float(np.sum(np.abs(self.values) ** 2))


@dataclass(frozen=True, eq=False)
class DiffuserScreen:
    """Thin ground-glass screen.  Arrays are float32 so the screen file is lossless."""

    amplitude: np.ndarray
    phase: np.ndarray
    seed: int

    @property
    def grid_size(self) -> int:
        return self.amplitude.shape[0]

    def __eq__(self, other):
        if not isinstance(other, DiffuserScreen):
            return NotImplemented
        return (
            self.seed == other.seed
            and np.array_equal(self.amplitude, other.amplitude)
            and np.array_equal(self.phase, other.phase)
        )


@dataclass(frozen=True, eq=False)
class SpeckleImage:
    """Detector crop normalised by its maximum; ``scale`` is that maximum."""

    intensity: np.ndarray
    scale: float
    source_id: str = ""


def _fold_phase(phase: np.ndarray) -> np.ndarray:
    phase = phase.astype(np.float32)
    # float32 rounding can land on 2*pi itself
    phase[phase.astype(np.float64) >= TWO_PI] = 0.0
    return phase


def make_diffuser(config: OpticalConfig, seed: int) -> DiffuserScreen:
    """Sample a diffuser with i.i.d. uniform amplitude in [0, 1] and phase in [0, 2*pi).

    The generator is numpy's PCG64 seeded with ``seed``; PCG64 output and
    ``Generator.random`` are bit-stable across platforms.  Amplitude is drawn
    first, then the phase (or height) map, both row-major.
    """
    if not 0 <= seed < 2**64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    n = config.grid_size
    rng = np.random.Generator(np.random.PCG64(seed))
    amplitude = rng.random((n, n)).astype(np.float32)
    if config.height_map_mode:
        period = config.wavelength_m / config.delta_n
        height = rng.random((n, n)) * period
        phase = np.mod(TWO_PI * config.delta_n / config.wavelength_m * height, TWO_PI)
    else:
        phase = rng.random((n, n)) * TWO_PI
    return DiffuserScreen(amplitude=amplitude, phase=_fold_phase(phase), seed=int(seed))


def transmittance(screen: DiffuserScreen, pitch_m: float = 8e-6) -> ComplexField:
    amp = screen.amplitude.astype(np.float64)
    return ComplexField(amp * np.exp(1j * screen.phase.astype(np.float64)), pitch_m)


@lru_cache(maxsize=32)
def _transfer(n: int, pitch_m: float, distance_m: float, wavelength_m: float) -> np.ndarray:
    f = np.fft.fftfreq(n, d=pitch_m)
    arg = (1.0 / wavelength_m) ** 2 - f[:, None] ** 2 - f[None, :] ** 2
    # complex sqrt gives +i*sqrt(|arg|) for evanescent frequencies -> decay
    kz = np.sqrt(arg.astype(np.complex128))
    h = np.exp(TWO_PI * 1j * distance_m * kz)
    h.setflags(write=False)
    return h


def transfer_function(n: int, pitch_m: float, distance_m: float, wavelength_m: float) -> np.ndarray:
    """Angular-spectrum transfer function on the FFT-ordered frequency grid."""
    return _transfer(int(n), float(pitch_m), float(distance_m), float(wavelength_m))


def asm_propagate(field: ComplexField, distance_m: float, wavelength_m: float) -> ComplexField:
    """Propagate ``field`` through free space by ``distance_m`` with the angular spectrum method."""
    if distance_m < 0:
        raise ValueError("propagation distance must be non-negative")
    if wavelength_m <= 0:
        raise ValueError("wavelength must be positive")
    u = field.values
    if u.shape[0] != u.shape[1]:
        raise ValueError(f"grid must be square, got {u.shape}")
    h = transfer_function(u.shape[0], field.pitch_m, distance_m, wavelength_m)
    return ComplexField(np.fft.ifft2(np.fft.fft2(u) * h), field.pitch_m)


def embed_target(target, config: OpticalConfig) -> np.ndarray:
    """Gray target -> amplitude on the full simulation grid (steps a-c of the pipeline)."""
    pixels = np.asarray(target)
    c = config.crop_size
    if pixels.shape != (c, c):
        raise ValueError(f"target must be {c}x{c}, got {pixels.shape}")
    amp = pixels.astype(np.float64) / 255.0
    amp = resize_bilinear(amp, config.display_size, config.display_size)
    before = (config.grid_size - config.display_size) // 2
    after = config.grid_size - config.display_size - before
    return np.pad(amp, ((before, after), (before, after)))


def speckle_intensity(field: np.ndarray, screen: DiffuserScreen, config: OpticalConfig) -> np.ndarray:
    """Full-grid detector intensity for an object-plane field."""
    if screen.grid_size != config.grid_size or field.shape != (config.grid_size,) * 2:
        raise ValueError("field, screen and config grid sizes differ")
    t = transmittance(screen, config.pixel_pitch_m).values
    lam = config.wavelength_m
    u = ComplexField(field, config.pixel_pitch_m)
    if config.diffuser_at_object:
        u = ComplexField(u.values * t, u.pitch_m)
        u = asm_propagate(asm_propagate(u, config.z1_m, lam), config.z2_m, lam)
    else:
        u = asm_propagate(u, config.z1_m, lam)
        u = asm_propagate(ComplexField(u.values * t, u.pitch_m), config.z2_m, lam)
    return np.abs(u.values) ** 2


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    start = (img.shape[0] - size) // 2
    return img[start:start + size, start:start + size]


def forward_speckle(target, screen: DiffuserScreen, config: OpticalConfig, source_id: str = "") -> SpeckleImage:
    """Simulate the normalised speckle crop recorded for a ``crop_size`` gray target."""
    pixels = np.asarray(target)
    if pixels.ndim != 2:
        raise ValueError("target must be a 2-D gray image")
    if not np.any(pixels):
        raise DegenerateFieldError("degenerate zero field")
    intensity = center_crop(speckle_intensity(embed_target(pixels, config), screen, config), config.crop_size)
    peak = float(intensity.max())
    if not peak > 0:
        raise DegenerateFieldError("degenerate zero field")
    return SpeckleImage(
        intensity=np.clip(intensity / peak, 0.0, 1.0).astype(np.float32),
        scale=float(np.float32(peak)),
        source_id=source_id,
    )


SCREEN_MAGIC = b"LSDS"
SCREEN_VERSION = 1
_SCREEN_HEADER = struct.Struct("<4sHIQ")


def screen_to_bytes(screen: DiffuserScreen) -> bytes:
    n = screen.grid_size
    head = _SCREEN_HEADER.pack(SCREEN_MAGIC, SCREEN_VERSION, n, screen.seed)
    return head + screen.amplitude.astype("<f4").tobytes() + screen.phase.astype("<f4").tobytes()


def screen_from_bytes(data: bytes) -> DiffuserScreen:
    if len(data) < _SCREEN_HEADER.size or data[:4] != SCREEN_MAGIC:
        raise ValueError("bad diffuser file")
    magic, version, n, seed = _SCREEN_HEADER.unpack_from(data)
    if version != SCREEN_VERSION:
        raise ValueError(f"unsupported diffuser file version {version}")
    count = n * n
    if len(data) != _SCREEN_HEADER.size + 8 * count:
        raise ValueError("truncated diffuser file")
    body = np.frombuffer(data, dtype="<f4", offset=_SCREEN_HEADER.size)
    amplitude = body[:count].reshape(n, n).astype(np.float32)
    phase = body[count:].reshape(n, n).astype(np.float32)
    return DiffuserScreen(amplitude=amplitude, phase=phase, seed=int(seed))


def save_screen(screen: DiffuserScreen, path) -> Path:
    return atomic_write_bytes(path, screen_to_bytes(screen))


def load_screen(path) -> DiffuserScreen:
    return screen_from_bytes(Path(path).read_bytes())
