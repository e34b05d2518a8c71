import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from speckle_lab.metrics import QualityReport, avg_gray_diff, evaluate_set, psnr, ssim, to_gray_scale


def oracle(a, b):
    """Direct formulas with plain Python loops; shares nothing with the package."""
    a = [float(v) for v in np.ravel(a)]
    b = [float(v) for v in np.ravel(b)]
    n = len(a)
    diff = sum(abs(x - y) for x, y in zip(a, b)) / n
    mse = sum((x - y) ** 2 for x, y in zip(a, b)) / n
    p = math.inf if mse == 0 else 10 * math.log10(255.0**2 / mse)
    ma, mb = sum(a) / n, sum(b) / n
    va = sum((x - ma) ** 2 for x in a) / n
    vb = sum((y - mb) ** 2 for y in b) / n
    cab = sum((x - ma) * (y - mb) for x, y in zip(a, b)) / n
    c1, c2 = 6.5025, 58.5225
    s = (2 * ma * mb + c1) * (2 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    return diff, p, s


def test_oracle_agreement_on_random_pairs():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        a = rng.uniform(0, 255, (8, 8))
        b = rng.uniform(0, 255, (8, 8)) if rng.random() < 0.5 else np.clip(a + rng.normal(0, 10, (8, 8)), 0, 255)
        d, p, s = oracle(a, b)
        assert abs(avg_gray_diff(a, b) - d) < 1e-9
        assert abs(psnr(a, b) - p) < 1e-9
        assert abs(ssim(a, b) - s) < 1e-9


def test_spot_values():
    zero = np.zeros((8, 8))
    assert psnr(zero, zero + 255) == pytest.approx(0.0, abs=1e-12)
    assert psnr(zero, zero + 16) == pytest.approx(24.05, abs=0.01)
    assert psnr(zero, zero) == math.inf
    assert avg_gray_diff(zero + 3, zero + 15) == 12.0
    x = np.random.default_rng(0).uniform(0, 255, (8, 8))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_negative_image_has_negative_ssim():
    rng = np.random.default_rng(5)
    x = 127.5 + rng.uniform(-60, 60, (16, 16))
    x -= x.mean() - 127.5
    assert ssim(x, 255 - x) < 0
    assert oracle(x, 255 - x)[2] < 0


def test_errors():
    with pytest.raises(ValueError, match="shape mismatch"):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ssim(np.zeros(1), np.zeros(1))
    with pytest.raises(ValueError):
        evaluate_set([])


pairs = st.tuples(
    arrays(np.float64, (5, 7), elements=st.floats(0, 255, width=64)),
    arrays(np.float64, (5, 7), elements=st.floats(0, 255, width=64)),
)


@settings(max_examples=60, deadline=None)
@given(pairs, st.floats(-100, 100))
def test_symmetries(pair, c):
    a, b = pair
    assert avg_gray_diff(a.T, b.T) == pytest.approx(avg_gray_diff(a, b), rel=1e-12)
    assert ssim(a.T, b.T) == pytest.approx(ssim(a, b), rel=1e-9, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), rel=1e-12, abs=1e-15)
    assert ssim(a, b) <= 1 + 1e-12
    assert avg_gray_diff(a + c, b + c) == pytest.approx(avg_gray_diff(a, b), rel=1e-9, abs=1e-9)
    p, pc = psnr(a, b), psnr(a + c, b + c)
    assert (math.isinf(p) and math.isinf(pc)) or pc == pytest.approx(p, rel=1e-9)


def test_evaluate_set():
    zero = np.zeros((4, 4))
    rep = evaluate_set([(zero, zero + 255), (zero, zero + 16)])
    assert rep.psnr_db == pytest.approx(12.02, abs=1e-2)
    assert rep.sample_count == 2 and rep.infinite_psnr_count == 0
    single = evaluate_set([(zero, zero + 16)])
    assert single.psnr_db == psnr(zero, zero + 16) and single.ssim == ssim(zero, zero + 16)
    dup = evaluate_set([(zero, zero + 16)] * 3)
    assert dup.psnr_db == pytest.approx(single.psnr_db) and dup.avg_gray_diff == pytest.approx(16.0)


def test_infinite_psnr_excluded():
    zero = np.zeros((4, 4))
    rep = evaluate_set([(zero, zero), (zero, zero + 16)])
    assert rep.infinite_psnr_count == 1
    assert rep.psnr_db == pytest.approx(psnr(zero, zero + 16))
    assert evaluate_set([(zero, zero)]).psnr_db == math.inf


def test_csv_row_and_scaling():
    rep = QualityReport(1.5, 20.0, 0.5, 3)
    assert QualityReport.CSV_HEADER == "dataset,model,avg_gray_diff,psnr_db,ssim,n"
    assert rep.csv_row("mnist", "fcn") == "mnist,fcn,1.5,20.0,0.5,3"
    assert to_gray_scale(np.array([0.5]))[0] == 127.5
