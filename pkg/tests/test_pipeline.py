import math
from dataclasses import replace

import numpy as np
import pytest

from speckle_lab import synthetic
from speckle_lab.dataset import GrayImage, generate_dataset, rgb_to_gray, to_target
from speckle_lab.loss import LossConfig
from speckle_lab.metrics import QualityReport
from speckle_lab.nn import forward, load_weights
from speckle_lab.optics import OpticalConfig, make_diffuser
from speckle_lab.pipeline import (
    ProvenanceError,
    RunConfig,
    TrainingDiverged,
    baseline_report,
    dataset_selection_study,
    evaluate,
    finetune,
    network_inputs,
    train,
    vanilla_transfer,
)

TINY = OpticalConfig(grid_size=64, display_size=16, crop_size=8)


def tiny_cfg(**kw):
    base = dict(architecture="fcn", optical=TINY, epochs=3, batch_size=8, learning_rate=5e-3,
                finetune_samples=12, finetune_epochs=3)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def screen():
    return make_diffuser(TINY, 7)


@pytest.fixture(scope="module")
def natural(screen):
    targets = [to_target(GrayImage(g), 8) for g in rgb_to_gray(synthetic.natural_images(40, seed=3))]
    return generate_dataset(targets, screen, TINY, "natural")


@pytest.fixture(scope="module")
def digits(screen):
    targets = [to_target(GrayImage(g), 8) for g in synthetic.digit_images(40, seed=4)]
    return generate_dataset(targets, screen, TINY, "digits")


def test_config_text_round_trip():
    cfg = tiny_cfg(architecture="ocn", learning_rate=1.25e-3, eval_dataset_path="a b.lsmd")
    back = RunConfig.from_text(cfg.to_text())
    assert back == cfg
    assert back.loss.balance_lambda > 0


def test_config_parsing_rules():
    cfg = RunConfig.from_text("# comment\narchitecture = ocn  # trailing\n\noptical.grid_size=64\n"
                              "optical.display_size=16\noptical.crop_size=8\nloss.l2_sigma=0\n")
    assert cfg.optical == TINY and cfg.loss.l2_sigma == 0 and cfg.loss.balance_lambda == 1e-3
    for bad in ("bogus=1\n", "loss.gamma=1\n", "optical.colour=1\n", "no equals sign\n", "batch_size=1\n"):
        with pytest.raises(ValueError):
            RunConfig.from_text(bad)


@pytest.mark.parametrize("kw", [dict(architecture="cnn"), dict(input_mode="raw"), dict(momentum=1.0),
                                dict(holdout_fraction=0.0), dict(learning_rate=0.0), dict(epochs=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        RunConfig(**kw)


def test_input_modes(natural):
    det, norm = network_inputs(natural, "detector"), network_inputs(natural, "normalized")
    assert norm.max() == 1.0
    scales = np.array([s.scale for s, _ in natural.records])
    assert np.allclose(det.max(axis=(1, 2, 3)), scales, rtol=1e-6)


def test_train_report_and_persistence(natural, tmp_path):
    cfg = tiny_cfg()
    state, spec, rep = train(cfg, natural, tmp_path)
    steps = [row[0] for row in rep.loss_curve]
    assert steps == sorted(set(steps)) and len(steps) == 3 * math.ceil(36 / 8)
    assert all(abs(t - (m + b + l)) < 1e-9 for _, m, b, l, t in rep.loss_curve)
    assert set(rep.quality) == {"train", "holdout", "baseline"}
    assert rep.quality["holdout"].sample_count == 4
    back = load_weights(tmp_path / "model.lsmw", spec)
    assert back.config_digest == TINY.digest() and back.screen_seed == 7
    for name in ("loss_curve.csv", "quality.csv", "report.txt", "holdout_images/recon_0000.pgm",
                 "holdout_images/truth_0003.pgm"):
        assert (tmp_path / name).exists()
    assert "steps=15" in (tmp_path / "report.txt").read_text()
    assert not (tmp_path / "last_good.lsmw").exists()


def test_training_is_deterministic(natural):
    cfg = tiny_cfg(epochs=2)
    s1, spec, r1 = train(cfg, natural)
    s2, _, r2 = train(cfg, natural)
    assert r1.loss_curve == r2.loss_curve and r1.weights_digest == r2.weights_digest
    assert r1.curve_csv() == r2.curve_csv() and r1.summary_text() == r2.summary_text()
    r3 = train(replace(cfg, seed=1), natural)[2]
    assert r3.weights_digest != r1.weights_digest


def test_overfits_eight_samples(natural):
    # 8 samples, one batch per epoch, 200 steps
    cfg = tiny_cfg(epochs=200, learning_rate=1e-2, loss=LossConfig(), holdout_fraction=0.2)
    small = natural.subset(range(10))
    _, _, rep = train(cfg, small)
    first, last = rep.loss_curve[0][1], rep.loss_curve[-1][1]
    assert last <= 0.1 * first


def test_baseline_is_mean_image(natural):
    tr, held = natural.split()
    rep = baseline_report(tr, held)
    mean = np.mean([t.pixels.astype(float) for _, t in tr.records], axis=0)
    diff = np.mean([np.mean(np.abs(t.pixels - mean)) for _, t in held.records])
    assert rep.avg_gray_diff == pytest.approx(diff)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_keeps_last_good(natural, tmp_path):
    cfg = tiny_cfg(learning_rate=1e9, epochs=4)
    with pytest.raises(TrainingDiverged, match="divergence") as info:
        train(cfg, natural, tmp_path)
    assert info.value.checkpoint is not None and info.value.checkpoint.exists()


def test_train_rejects_foreign_config(natural):
    with pytest.raises(ProvenanceError, match="diffuser/config mismatch"):
        train(tiny_cfg(optical=replace(TINY, z1_m=0.03)), natural)


def test_vanilla_transfer(natural, digits, screen, tmp_path):
    cfg = tiny_cfg(epochs=6)
    state, spec, rep = train(cfg, natural)
    before = {k: {n: a.copy() for n, a in p.items()} for k, p in state.params.items()}
    on_train = vanilla_transfer(state, spec, natural.split()[0])
    assert on_train.psnr_db == pytest.approx(rep.quality["train"].psnr_db)
    q = vanilla_transfer(state, spec, digits, out_dir=tmp_path, name="digits")
    assert q.sample_count == len(digits)
    assert (tmp_path / "digits_quality.csv").read_text().startswith(QualityReport.CSV_HEADER)
    for k, p in before.items():
        for n, a in p.items():
            assert np.array_equal(a, state.params[k][n])
    other = generate_dataset([t for _, t in digits.records[:4]], make_diffuser(TINY, 8), TINY)
    with pytest.raises(ProvenanceError) as info:
        vanilla_transfer(state, spec, other)
    assert "diffuser/config mismatch" in str(info.value) and "screen seed 8" in str(info.value)


def test_finetune_touches_only_last_layers(natural, digits, tmp_path):
    cfg = tiny_cfg(epochs=2)
    state, spec, _ = train(cfg, natural)
    ft_state, ft_spec, rep = finetune(state, spec, cfg, digits, tmp_path)
    assert ft_spec.trainable_layers[-1] == "out_conv" and len(ft_spec.parameterized_layers) > 2
    for layer in ft_spec.layers:
        for key, arr in state.params.get(layer.name, {}).items():
            same = np.array_equal(arr, ft_state.params[layer.name][key])
            assert same == (not layer.trainable), (layer.name, key)
    assert set(rep.quality) == {"vanilla", "finetuned"}
    assert (tmp_path / "finetune_model.lsmw").exists() and (tmp_path / "finetune_quality.csv").exists()


def test_finetune_zero_epochs_equals_vanilla(natural, digits):
    cfg = tiny_cfg(epochs=2, finetune_epochs=0)
    state, spec, _ = train(cfg, natural)
    _, _, rep = finetune(state, spec, cfg, digits)
    assert rep.quality["vanilla"] == rep.quality["finetuned"]
    assert rep.loss_curve == []
    held = digits.split()[1]
    assert rep.quality["vanilla"] == vanilla_transfer(state, spec, held)


def test_finetune_sample_budget(natural, digits):
    cfg = tiny_cfg(epochs=1, finetune_samples=37)
    state, spec, _ = train(cfg, natural)
    with pytest.raises(ValueError, match="exceeds"):
        finetune(state, spec, cfg, digits)


def test_study_grid(natural, digits, tmp_path):
    cfg = tiny_cfg(epochs=2, finetune_epochs=1)
    res = dataset_selection_study(cfg, {"natural": natural, "digits": digits}, tmp_path)
    assert len(res.cells) == 4
    assert all(math.isfinite(q.ssim) and q.sample_count == 4 for q in res.cells.values())
    lines = (tmp_path / "study.csv").read_text().splitlines()
    assert lines[0] == "train,target,avg_gray_diff,psnr_db,ssim,n" and len(lines) == 5
    with pytest.raises(ValueError):
        dataset_selection_study(cfg, {"natural": natural})


def test_evaluate_matches_manual_forward(natural):
    cfg = tiny_cfg(epochs=1)
    state, spec, _ = train(cfg, natural)
    q, out = evaluate(state, spec, natural)
    ref, _ = forward(state, spec, natural.detector_array()[:10], "eval")
    assert np.allclose(out[:10], ref, atol=1e-6)
    assert q.sample_count == len(natural)
