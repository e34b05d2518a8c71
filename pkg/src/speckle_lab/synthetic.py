"""Procedural stand-ins for the public image datasets.

The toolkit reads the real CIFAR-10 / MNIST / AT&T-face files when they are
available; these generators produce images with the same file layout and a
similar gray-level character so that every experiment also runs offline:

* :func:`natural_images` - cluttered, textured colour scenes (CIFAR-10-like),
  broad gray histograms.
* :func:`digit_images` - thick anti-aliased pen strokes on a black
  background (MNIST-like), histograms concentrated at 0.
* :func:`face_images` - smooth oval "faces" with eye/mouth blobs on a dim
  background, native 112x92 like the AT&T set.
"""
from __future__ import annotations

import numpy as np


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _pink_noise(rng: np.random.Generator, size: int, exponent: float) -> np.ndarray:
    f = np.fft.fftfreq(size)
    radius = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    radius[0, 0] = 1.0
    spectrum = (rng.normal(size=(size, size)) + 1j * rng.normal(size=(size, size))) / radius**exponent
    spectrum[0, 0] = 0.0
    field = np.fft.ifft2(spectrum).real
    return field / (field.std() + 1e-12)


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    # periodic Gaussian blur via the FFT; fine for small synthetic tiles
    f0 = np.fft.fftfreq(img.shape[-2])[:, None]
    f1 = np.fft.fftfreq(img.shape[-1])[None, :]
    g = np.exp(-2 * (np.pi * sigma) ** 2 * (f0**2 + f1**2))
    return np.fft.ifft2(np.fft.fft2(img) * g).real


def natural_images(n: int, seed: int = 0, size: int = 32) -> np.ndarray:
    """``(n, 3, size, size)`` uint8 colour scenes: textured background plus 1-4 objects."""
    rng = _rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    out = np.empty((n, 3, size, size), np.uint8)
    for k in range(n):
        base = rng.uniform(0.1, 0.9, 3)
        tilt = rng.normal(0, 0.35, (2, 3))
        img = base[:, None, None] + tilt[0][:, None, None] * (xx - 0.5) + tilt[1][:, None, None] * (yy - 0.5)
        img = img + rng.uniform(0.03, 0.15) * _pink_noise(rng, size, rng.uniform(1.0, 2.0))[None]
        for _ in range(rng.integers(1, 5)):
            cy, cx = rng.uniform(0.1, 0.9, 2)
            ry, rx = rng.uniform(0.08, 0.4, 2)
            ang = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = (dx * np.cos(ang) + dy * np.sin(ang)) / rx
            v = (-dx * np.sin(ang) + dy * np.cos(ang)) / ry
            if rng.random() < 0.5:
                dist = np.sqrt(u**2 + v**2)
            else:
                dist = np.maximum(np.abs(u), np.abs(v))
            mask = np.clip((1.0 - dist) * size * min(rx, ry) * 0.5, 0.0, 1.0)
            colour = rng.uniform(0.0, 1.0, 3)
            texture = 1.0 + rng.uniform(0.0, 0.3) * _pink_noise(rng, size, 1.5)
            img = img * (1 - mask) + mask * colour[:, None, None] * texture[None]
        img = _blur(img, rng.uniform(0.3, 0.9))
        contrast, bright = rng.uniform(0.6, 1.3), rng.uniform(-0.15, 0.15)
        img = (img - img.mean()) * contrast + img.mean() + bright
        out[k] = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return out


def _bezier(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    a, b, c = p
    return ((1 - t) ** 2)[:, None] * a + (2 * (1 - t) * t)[:, None] * b + (t**2)[:, None] * c


def digit_images(n: int, seed: int = 0, size: int = 28) -> np.ndarray:
    """``(n, size, size)`` uint8 pen-stroke glyphs centred in a 20x20 box."""
    rng = _rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    grid = np.stack([yy.ravel(), xx.ravel()], axis=1)
    lo, hi = (size - 20) / 2, (size + 20) / 2 - 1
    t = np.linspace(0, 1, 40)
    out = np.empty((n, size, size), np.uint8)
    for k in range(n):
        pts = []
        start = rng.uniform(lo + 2, hi - 2, 2)
        for _ in range(rng.integers(1, 4)):
            ctrl = np.vstack([start, rng.uniform(lo, hi, (2, 2))])
            pts.append(_bezier(ctrl, t))
            start = ctrl[-1] if rng.random() < 0.7 else rng.uniform(lo + 2, hi - 2, 2)
        pts = np.concatenate(pts)
        d = np.sqrt(((grid[:, None, :] - pts[None]) ** 2).sum(-1)).min(1).reshape(size, size)
        width = rng.uniform(1.7, 2.5)  # mean ink ~0.13 with ~17% lit pixels, as in MNIST
        ink = np.clip(width + 0.5 - d, 0.0, 1.0)
        out[k] = np.clip(np.round(ink * rng.uniform(230, 255)), 0, 255).astype(np.uint8)
    return out


def face_images(n: int, seed: int = 0, height: int = 112, width: int = 92) -> np.ndarray:
    """``(n, height, width)`` uint8 smooth face-like blobs."""
    rng = _rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    yy = yy / (height - 1)
    xx = xx / (width - 1)
    out = np.empty((n, height, width), np.uint8)
    for k in range(n):
        bg = rng.uniform(0.15, 0.45) + rng.normal(0, 0.1) * (xx - 0.5)
        cy, cx = rng.uniform(0.45, 0.55), rng.uniform(0.42, 0.58)
        ry, rx = rng.uniform(0.3, 0.4), rng.uniform(0.25, 0.33)
        head = np.exp(-(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) ** 3)
        skin = rng.uniform(0.55, 0.85) * (1 - 0.3 * (yy - cy) / ry)
        img = bg * (1 - head) + skin * head
        for ex in (-0.35, 0.35):
            eye = np.exp(-(((yy - cy + 0.3 * ry) / 0.04) ** 2 + ((xx - cx - ex * rx) / 0.06) ** 2))
            img = img - rng.uniform(0.3, 0.5) * eye
        mouth = np.exp(-(((yy - cy - 0.45 * ry) / 0.03) ** 2 + ((xx - cx) / 0.12) ** 2))
        img = img - rng.uniform(0.15, 0.35) * mouth
        hair = (yy < cy - 0.6 * ry) * head
        img = img * (1 - hair) + hair * rng.uniform(0.05, 0.3)
        img = img + 0.02 * rng.normal(size=img.shape)
        out[k] = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return out
