"""Target ingestion (IDX, CIFAR-10 binary, PGM), speckle dataset generation,
the LSMD container and the gray-level distribution analysis."""
from __future__ import annotations

import csv
import io
import re
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text
from ._resample import resize_bilinear
from .optics import DegenerateFieldError, DiffuserScreen, OpticalConfig, SpeckleImage, forward_speckle


class DatasetFormatError(ValueError):
    """Base class for malformed input files."""


class BadMagicError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class DimensionOverflowError(DatasetFormatError):
    pass


class UnsupportedFormatError(DatasetFormatError):
    pass


class GenerationError(ValueError):
    """Speckle generation failed for one sample; ``index`` names it."""

    def __init__(self, index: int, cause: Exception):
        super().__init__(f"sample {index}: {cause}")
        self.index = index
        self.cause = cause


@dataclass(frozen=True, eq=False)
class GrayImage:
    """8-bit gray image, values 0..255."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"gray image must be a non-empty 2-D array, got shape {px.shape}")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255):
                raise ValueError("gray values must lie in [0, 255]")
            px = px.astype(np.uint8)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.pixels if dtype is None else self.pixels.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


# --------------------------------------------------------------------- IDX

IDX_IMAGE_MAGIC = 0x00000803
_MAX_IDX_BYTES = 2**31


def load_idx(path) -> list[GrayImage]:
    """Read an IDX3 unsigned-byte image file (the MNIST distribution format)."""
    return parse_idx(Path(path).read_bytes())


def parse_idx(data: bytes) -> list[GrayImage]:
    if len(data) < 4:
        raise TruncatedFileError("truncated IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != IDX_IMAGE_MAGIC:
        raise BadMagicError(f"not an image IDX file (magic 0x{magic:08x})")
    if len(data) < 16:
        raise TruncatedFileError("truncated IDX header")
    count, rows, cols = struct.unpack(">III", data[4:16])
    if rows == 0 or cols == 0:
        raise DimensionOverflowError("zero-sized IDX image dimension")
    total = count * rows * cols
    if total > _MAX_IDX_BYTES:
        raise DimensionOverflowError(f"IDX dimensions {count}x{rows}x{cols} overflow the payload limit")
    if len(data) < 16 + total:
        raise TruncatedFileError(f"truncated IDX payload: need {total} bytes, have {len(data) - 16}")
    body = np.frombuffer(data, dtype=np.uint8, count=total, offset=16).reshape(count, rows, cols)
    return [GrayImage(img.copy()) for img in body]


def idx_bytes(images: Sequence) -> bytes:
    arr = np.stack([np.asarray(img, dtype=np.uint8) for img in images]) if len(images) else np.zeros((0, 28, 28), np.uint8)
    n, rows, cols = arr.shape
    return struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols) + arr.tobytes()


def write_idx(images: Sequence, path) -> Path:
    return atomic_write_bytes(path, idx_bytes(images))


# ----------------------------------------------------------------- CIFAR-10

CIFAR_RECORD = 3073


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luma 0.299/0.587/0.114, rounded half-up, in exact integer arithmetic.

    ``rgb`` has the colour axis first: ``(..., 3, H, W)``.
    """
    rgb = rgb.astype(np.int64)
    r, g, b = rgb[..., 0, :, :], rgb[..., 1, :, :], rgb[..., 2, :, :]
    return ((299 * r + 587 * g + 114 * b + 500) // 1000).astype(np.uint8)


def load_cifar10_bin(path) -> list[GrayImage]:
    data = Path(path).read_bytes()
    if len(data) % CIFAR_RECORD:
        raise DatasetFormatError(
            f"CIFAR-10 binary size {len(data)} is not a multiple of the {CIFAR_RECORD}-byte record"
        )
    recs = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    gray = rgb_to_gray(recs[:, 1:].reshape(-1, 3, 32, 32))
    return [GrayImage(img.copy()) for img in gray]


def cifar10_bytes(rgb_images: np.ndarray, labels: Sequence[int] | None = None) -> bytes:
    """Serialise ``(N, 3, 32, 32)`` uint8 images in the CIFAR-10 binary layout."""
    rgb_images = np.asarray(rgb_images, dtype=np.uint8)
    n = rgb_images.shape[0]
    labels = np.zeros(n, np.uint8) if labels is None else np.asarray(labels, dtype=np.uint8)
    out = np.empty((n, CIFAR_RECORD), np.uint8)
    out[:, 0] = labels
    out[:, 1:] = rgb_images.reshape(n, -1)
    return out.tobytes()


def write_cifar10_bin(rgb_images: np.ndarray, path, labels=None) -> Path:
    return atomic_write_bytes(path, cifar10_bytes(rgb_images, labels))


# ---------------------------------------------------------------------- PGM

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def parse_pgm(data: bytes) -> GrayImage:
    if data[:2] != b"P5":
        if data[:1] == b"P" and data[1:2] in b"123467":
            raise UnsupportedFormatError("unsupported PGM variant")
        raise BadMagicError("not a PGM file")
    pos = 2
    values = []
    for _ in range(3):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise TruncatedFileError("truncated PGM header")
        values.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = values
    if maxval > 255:
        raise UnsupportedFormatError("16-bit PGM unsupported")
    if maxval < 1 or width < 1 or height < 1:
        raise DatasetFormatError("invalid PGM header")
    pos += 1  # single whitespace byte before the raster
    need = width * height
    if len(data) < pos + need:
        raise TruncatedFileError("truncated PGM raster")
    return GrayImage(np.frombuffer(data, np.uint8, count=need, offset=pos).reshape(height, width).copy())


def load_pgm(path) -> GrayImage:
    return parse_pgm(Path(path).read_bytes())


def pgm_bytes(img) -> bytes:
    px = np.asarray(img, dtype=np.uint8)
    return f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii") + px.tobytes()


def write_pgm(img, path) -> Path:
    return atomic_write_bytes(path, pgm_bytes(img))


def load_pgm_dir(path) -> list[GrayImage]:
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() == ".pgm")
    return [load_pgm(p) for p in files]


def load_targets(path, fmt: str, crop_size: int = 32) -> list[GrayImage]:
    """Load a source dataset and bring every image to ``crop_size`` x ``crop_size``."""
    loaders = {"idx": load_idx, "cifar": load_cifar10_bin, "pgm-dir": load_pgm_dir}
    if fmt not in loaders:
        raise ValueError(f"unknown target format {fmt!r}")
    return [to_target(img, crop_size) for img in loaders[fmt](path)]


def to_target(img, crop_size: int = 32) -> GrayImage:
    px = np.asarray(img)
    if px.shape == (crop_size, crop_size):
        return GrayImage(px.astype(np.uint8))
    resized = resize_bilinear(px, crop_size, crop_size)
    return GrayImage(np.clip(np.floor(resized + 0.5), 0, 255).astype(np.uint8))


# ------------------------------------------------------------------ dataset


@dataclass(eq=False)
class SpeckleDataset:
    records: list[tuple[SpeckleImage, GrayImage]]
    screen_seed: int
    config_digest: bytes
    source_name: str = ""
    crop_size: int = 32

    def __post_init__(self):
        if len(self.config_digest) != 32:
            raise ValueError("config digest must be 32 bytes")
        for speckle, target in self.records:
            if speckle.intensity.shape != (self.crop_size,) * 2 or target.pixels.shape != (self.crop_size,) * 2:
                raise ValueError("record dimensions differ from crop_size")

    def __len__(self) -> int:
        return len(self.records)

    def speckle_array(self, dtype=np.float32) -> np.ndarray:
        """Network inputs, shape ``(N, 1, c, c)``."""
        c = self.crop_size
        if not self.records:
            return np.zeros((0, 1, c, c), dtype)
        return np.stack([s.intensity for s, _ in self.records])[:, None].astype(dtype)

    def detector_array(self, dtype=np.float32) -> np.ndarray:
        """Inputs with each image's peak restored (``intensity * scale``), shape ``(N, 1, c, c)``.

        Max normalization discards overall brightness; multiplying the stored
        scale back in gives the network the raw detector reading.
        """
        scales = np.array([s.scale for s, _ in self.records], dtype=np.float64)
        return (self.speckle_array(np.float64) * scales.reshape(-1, 1, 1, 1)).astype(dtype)

    def target_array(self, dtype=np.float32) -> np.ndarray:
        """Targets scaled to [0, 1], shape ``(N, 1, c, c)``."""
        c = self.crop_size
        if not self.records:
            return np.zeros((0, 1, c, c), dtype)
        return (np.stack([t.pixels for _, t in self.records])[:, None] / 255.0).astype(dtype)

    def subset(self, indices: Iterable[int]) -> "SpeckleDataset":
        return SpeckleDataset(
            [self.records[i] for i in indices], self.screen_seed, self.config_digest, self.source_name, self.crop_size
        )

    def split(self, holdout_fraction: float = 0.1) -> tuple["SpeckleDataset", "SpeckleDataset"]:
        """(train, held-out): the held-out part is the last ``holdout_fraction`` by index."""
        n = len(self)
        n_hold = max(1, int(round(n * holdout_fraction))) if n > 1 else 0
        return self.subset(range(n - n_hold)), self.subset(range(n - n_hold, n))


def generate_dataset(
    targets: Sequence,
    screen: DiffuserScreen,
    config: OpticalConfig,
    source_name: str = "",
    workers: int = 1,
) -> SpeckleDataset:
    """Simulate the speckle crop for every target, preserving order.

    With ``workers > 1`` samples are simulated on a thread pool; each sample is
    computed independently, so the result does not depend on the worker count.
    """
    targets = [t if isinstance(t, GrayImage) else GrayImage(np.asarray(t)) for t in targets]
    c = config.crop_size
    for i, t in enumerate(targets):
        if t.pixels.shape != (c, c):
            raise GenerationError(i, ValueError(f"target is {t.pixels.shape}, expected {c}x{c}"))
        if not np.any(t.pixels):
            raise GenerationError(i, DegenerateFieldError("degenerate zero field"))

    def one(i: int) -> SpeckleImage:
        try:
            return forward_speckle(targets[i].pixels, screen, config, source_id=f"{source_name}:{i}")
        except (ValueError, DegenerateFieldError) as exc:
            raise GenerationError(i, exc) from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            speckles = list(pool.map(one, range(len(targets))))
    else:
        speckles = [one(i) for i in range(len(targets))]
    return SpeckleDataset(list(zip(speckles, targets)), screen.seed, config.digest(), source_name, c)


LSMD_MAGIC = b"LSMD"
LSMD_VERSION = 1
_LSMD_HEADER = struct.Struct("<4sHHIQ32s")


def dataset_to_bytes(ds: SpeckleDataset) -> bytes:
    c = ds.crop_size
    buf = io.BytesIO()
    buf.write(_LSMD_HEADER.pack(LSMD_MAGIC, LSMD_VERSION, c, len(ds), ds.screen_seed, ds.config_digest))
    for speckle, target in ds.records:
        buf.write(speckle.intensity.astype("<f4").tobytes())
        buf.write(struct.pack("<f", speckle.scale))
        buf.write(target.pixels.astype(np.uint8).tobytes())
    return buf.getvalue()


def dataset_from_bytes(data: bytes, source_name: str = "") -> SpeckleDataset:
    if len(data) < _LSMD_HEADER.size or data[:4] != LSMD_MAGIC:
        raise BadMagicError("not an LSMD dataset file")
    _, version, c, count, seed, digest = _LSMD_HEADER.unpack_from(data)
    if version != LSMD_VERSION:
        raise UnsupportedFormatError(f"unsupported LSMD version {version}")
    stride = 4 * c * c + 4 + c * c
    if len(data) != _LSMD_HEADER.size + count * stride:
        raise TruncatedFileError("LSMD payload size does not match its record count")
    rec_dtype = np.dtype([("speckle", "<f4", (c, c)), ("scale", "<f4"), ("target", "u1", (c, c))])
    recs = np.frombuffer(data, dtype=rec_dtype, offset=_LSMD_HEADER.size, count=count)
    records = [
        (
            SpeckleImage(r["speckle"].astype(np.float32), float(r["scale"]), f"{source_name}:{i}"),
            GrayImage(r["target"].copy()),
        )
        for i, r in enumerate(recs)
    ]
    return SpeckleDataset(records, int(seed), bytes(digest), source_name, int(c))


def save_dataset(ds: SpeckleDataset, path) -> Path:
    return atomic_write_bytes(path, dataset_to_bytes(ds))


def load_dataset(path) -> SpeckleDataset:
    path = Path(path)
    return dataset_from_bytes(path.read_bytes(), source_name=path.stem)


# ------------------------------------------------------------- distribution


@dataclass(eq=False)
class DistributionReport:
    gray_histogram: np.ndarray
    per_image_stats: np.ndarray = field(repr=False)

    @property
    def entropy_bits(self) -> float:
        p = self.gray_histogram[self.gray_histogram > 0]
        return float(-(p * np.log2(p)).sum())

    def histogram_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["gray_value", "probability"])
        for v, p in enumerate(self.gray_histogram):
            w.writerow([v, repr(float(p))])
        return out.getvalue()

    def stats_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["image_index", "mean", "variance"])
        for i, (m, v) in enumerate(self.per_image_stats):
            w.writerow([i, repr(float(m)), repr(float(v))])
        return out.getvalue()

    def write_csv(self, directory, prefix: str = "") -> tuple[Path, Path]:
        directory = Path(directory)
        return (
            atomic_write_text(directory / f"{prefix}gray_histogram.csv", self.histogram_csv()),
            atomic_write_text(directory / f"{prefix}mean_variance.csv", self.stats_csv()),
        )


def analyze_distribution(targets: Sequence) -> DistributionReport:
    """Pooled gray-value histogram and per-image (mean, population variance)."""
    if len(targets) == 0:
        raise ValueError("need at least one image")
    counts = np.zeros(256, np.int64)
    stats = np.empty((len(targets), 2))
    for i, img in enumerate(targets):
        px = np.asarray(img, dtype=np.uint8)
        counts += np.bincount(px.ravel(), minlength=256)
        vals = px.astype(np.float64)
        stats[i] = vals.mean(), vals.var()
    return DistributionReport(counts / counts.sum(), stats)
