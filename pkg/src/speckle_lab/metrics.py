"""Imaging-quality metrics on the 0-255 gray scale."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAX_I = 255.0
C1 = (0.01 * MAX_I) ** 2
C2 = (0.03 * MAX_I) ** 2


def _pair(real_img, out_img) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(real_img, dtype=np.float64)
    b = np.asarray(out_img, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def avg_gray_diff(real_img, out_img) -> float:
    a, b = _pair(real_img, out_img)
    return float(np.mean(np.abs(a - b)))


def psnr(real_img, out_img) -> float:
    """``20 log10(255 / sqrt(MSE))`` with the per-pixel mean squared error; ``inf`` for identical images."""
    a, b = _pair(real_img, out_img)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 20.0 * math.log10(MAX_I / math.sqrt(mse))


def ssim(real_img, out_img) -> float:
    """Single-window SSIM over the whole image with population statistics."""
    a, b = _pair(real_img, out_img)
    if a.size < 2:
        raise ValueError("SSIM needs at least two pixels")
    mu_a, mu_b = a.mean(), b.mean()
    va, vb = a.var(), b.var()
    cov = np.mean((a - mu_a) * (b - mu_b))
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (va + vb + C2)
    return float(num / den)


@dataclass(frozen=True)
class QualityReport:
    avg_gray_diff: float
    psnr_db: float
    ssim: float
    sample_count: int
    infinite_psnr_count: int = 0

    CSV_HEADER = "dataset,model,avg_gray_diff,psnr_db,ssim,n"

    def csv_row(self, dataset: str, model: str) -> str:
        return f"{dataset},{model},{self.avg_gray_diff!r},{self.psnr_db!r},{self.ssim!r},{self.sample_count}"


def evaluate_set(pairs: Sequence) -> QualityReport:
    """Average each metric over ``(ground_truth, output)`` pairs.

    Infinite PSNR values (exact reconstructions) are left out of the PSNR
    mean and counted in ``infinite_psnr_count``.
    """
    if len(pairs) == 0:
        raise ValueError("need at least one image pair")
    diffs, psnrs, ssims = [], [], []
    n_inf = 0
    for real_img, out_img in pairs:
        diffs.append(avg_gray_diff(real_img, out_img))
        ssims.append(ssim(real_img, out_img))
        p = psnr(real_img, out_img)
        if math.isinf(p):
            n_inf += 1
        else:
            psnrs.append(p)
    mean_psnr = float(np.mean(psnrs)) if psnrs else math.inf
    return QualityReport(float(np.mean(diffs)), mean_psnr, float(np.mean(ssims)), len(pairs), n_inf)


def to_gray_scale(y: np.ndarray) -> np.ndarray:
    """Network output in (0, 1) -> gray values on [0, 255], unrounded."""
    return np.asarray(y, dtype=np.float64) * MAX_I
