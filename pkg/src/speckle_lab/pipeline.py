"""Experiment orchestration: from-scratch training, vanilla transfer, fine-tuning and the
train/fine-tune dataset-selection grid.

Every run is deterministic for a fixed configuration: batches are shuffled by a
PCG64 stream seeded from ``RunConfig.seed`` and all persisted artifacts omit
wall-clock quantities.
"""
from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ._io import atomic_write_text, sha256_file
from .dataset import GrayImage, SpeckleDataset, load_dataset, write_pgm
from .loss import LossConfig, merge_gradients, total_loss
from .metrics import QualityReport, evaluate_set, to_gray_scale
from .nn import (
    DivergenceError,
    NetworkSpec,
    TrainState,
    backward,
    build_network,
    forward,
    freeze_all_but_last_k,
    init_state,
    save_weights,
    sgd_step,
    weights_to_bytes,
)
from .optics import OpticalConfig

log = logging.getLogger(__name__)

ARCHITECTURES = ("fcn", "ocn")
INPUT_MODES = ("detector", "normalized")
EVAL_BATCH = 64


class ProvenanceError(ValueError):
    """Model and dataset come from different diffusers or optical configurations."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Path | None):
        where = f"; last good weights in {checkpoint}" if checkpoint else ""
        super().__init__(f"divergence: non-finite loss at step {step}{where}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a training or fine-tuning run.

    ``loss`` defaults to the architecture's sign convention when left as None.
    ``input_mode="detector"`` feeds the network ``intensity * scale``;
    ``"normalized"`` feeds the max-normalized intensity unchanged.
    """

    architecture: str = "fcn"
    optical: OpticalConfig = field(default_factory=OpticalConfig.desk)
    loss: LossConfig | None = None
    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 2e-3
    momentum: float = 0.9
    seed: int = 0
    input_mode: str = "detector"
    holdout_fraction: float = 0.1
    train_dataset_path: str = ""
    eval_dataset_path: str = ""
    finetune_dataset_path: str = ""
    finetune_samples: int = 300
    finetune_trainable: int = 2
    finetune_lr_factor: float = 0.1
    finetune_epochs: int = 40

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")
        if self.loss is None:
            object.__setattr__(self, "loss", LossConfig.for_architecture(self.architecture))
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm)")
        if not self.learning_rate > 0 or not self.finetune_lr_factor > 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in (0, 1)")
        if self.finetune_samples < 2 or self.finetune_trainable < 1:
            raise ValueError("fine-tuning needs >= 2 samples and >= 1 trainable layer")

    # -- key=value file format ------------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "optical":
                lines += [f"optical.{line}" for line in value.canonical().splitlines()]
            elif f.name == "loss":
                lines.append(f"loss.balance_lambda={value.balance_lambda!r}")
                lines.append(f"loss.l2_sigma={value.l2_sigma!r}")
            else:
                lines.append(f"{f.name}={value!r}" if isinstance(value, float) else f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        """Parse ``key=value`` lines; ``#`` starts a comment, unknown keys are rejected."""
        optical, loss, top = {}, {}, {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"line {n}: expected key=value")
            key, value = key.strip(), value.strip()
            if key.startswith("optical."):
                optical[key[8:]] = value
            elif key.startswith("loss."):
                loss[key[5:]] = float(value)
            else:
                top[key] = value
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in top.items():
            if key not in kinds or key in ("optical", "loss"):
                raise ValueError(f"unknown config key: {key}")
            kind = kinds[key]
            kwargs[key] = int(value) if kind == "int" else float(value) if kind == "float" else value
        unknown_loss = set(loss) - {"balance_lambda", "l2_sigma"}
        if unknown_loss:
            raise ValueError(f"unknown config key: loss.{sorted(unknown_loss)[0]}")
        if optical:
            kwargs["optical"] = OpticalConfig.from_dict(optical)
        cfg = cls(**kwargs)
        if loss:
            base = cfg.loss
            cfg = replace(cfg, loss=LossConfig(loss.get("balance_lambda", base.balance_lambda),
                                               loss.get("l2_sigma", base.l2_sigma)))
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> Path:
        return atomic_write_text(path, self.to_text())


@dataclass
class RunReport:
    """Loss curve, quality per evaluated set and provenance of one run.

    ``wall_time`` is kept in memory only so that persisted reports are
    byte-identical across reruns.
    """

    loss_curve: list[tuple[int, float, float, float, float]]
    quality: dict[str, QualityReport]
    wall_time: float
    config: RunConfig
    config_digest: bytes
    weights_digest: str = ""
    code_digest: str = ""

    def curve_csv(self) -> str:
        rows = ["step,mse_loss,balance_loss,l2_loss,total"]
        rows += [f"{s},{m!r},{b!r},{l!r},{t!r}" for s, m, b, l, t in self.loss_curve]
        return "\n".join(rows) + "\n"

    def quality_csv(self, model: str | None = None) -> str:
        model = model or self.config.architecture
        rows = [QualityReport.CSV_HEADER] + [q.csv_row(name, model) for name, q in self.quality.items()]
        return "\n".join(rows) + "\n"

    def summary_text(self) -> str:
        head = [
            f"config_digest={self.config_digest.hex()}",
            f"weights_sha256={self.weights_digest}",
            f"code_sha256={self.code_digest}",
            f"steps={len(self.loss_curve)}",
        ]
        return "\n".join(head) + "\n" + self.config.to_text()

    def write(self, out_dir, prefix: str = "") -> list[Path]:
        out_dir = Path(out_dir)
        return [
            atomic_write_text(out_dir / f"{prefix}loss_curve.csv", self.curve_csv()),
            atomic_write_text(out_dir / f"{prefix}quality.csv", self.quality_csv()),
            atomic_write_text(out_dir / f"{prefix}report.txt", self.summary_text()),
        ]


def code_digest() -> str:
    """SHA-256 over the package's Python sources, in path order."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for path in sorted(root.rglob("*.py")):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def network_inputs(ds: SpeckleDataset, mode: str) -> np.ndarray:
    if mode == "detector":
        return ds.detector_array()
    if mode == "normalized":
        return ds.speckle_array()
    raise ValueError(f"input_mode must be one of {INPUT_MODES}")


def check_provenance(state: TrainState, ds: SpeckleDataset) -> None:
    if state.config_digest != ds.config_digest or state.screen_seed != ds.screen_seed:
        raise ProvenanceError(
            "diffuser/config mismatch: model "
            f"{state.config_digest.hex()} (screen seed {state.screen_seed}) vs dataset "
            f"{ds.config_digest.hex()} (screen seed {ds.screen_seed})"
        )


def _require(ds: SpeckleDataset, cfg: RunConfig) -> None:
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    if ds.config_digest != cfg.optical.digest():
        raise ProvenanceError(
            f"diffuser/config mismatch: dataset {ds.config_digest.hex()} vs config {cfg.optical.digest().hex()}"
        )
    if ds.crop_size != cfg.optical.crop_size:
        raise ValueError("dataset crop size differs from the optical config")


def predict(state: TrainState, spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    """Eval-mode outputs in fixed-size chunks."""
    outs = [forward(state, spec, x[i:i + EVAL_BATCH], "eval")[0] for i in range(0, len(x), EVAL_BATCH)]
    return np.concatenate(outs) if outs else np.zeros((0,) + spec.output_shape, np.float32)


def _score(outputs: np.ndarray, ds: SpeckleDataset) -> QualityReport:
    pairs = [(t.pixels, to_gray_scale(o[0])) for o, (_, t) in zip(outputs, ds.records)]
    return evaluate_set(pairs)


def evaluate(state: TrainState, spec: NetworkSpec, ds: SpeckleDataset, input_mode: str = "detector"):
    """``(QualityReport, outputs)`` for ``ds`` in eval mode; no weights are touched."""
    out = predict(state, spec, network_inputs(ds, input_mode))
    return _score(out, ds), out


def baseline_report(train: SpeckleDataset, held: SpeckleDataset) -> QualityReport:
    """Quality of predicting the mean training target for every held-out sample."""
    mean = np.mean([t.pixels.astype(np.float64) for _, t in train.records], axis=0)
    return evaluate_set([(t.pixels, mean) for _, t in held.records])


def init_output_bias(state: TrainState, spec: NetworkSpec, targets: np.ndarray, clip: float = 0.02) -> None:
    """Set the output layer's bias to the logit of the mean training target.

    The untrained network then starts near the mean-image predictor. Without
    this, sparse targets (mostly-black digits) let the first summed-MSE steps
    push the sigmoid deep into saturation, where its gradient vanishes.
    """
    mean = np.clip(targets.astype(np.float64).mean(axis=0), clip, 1 - clip)
    logit = np.log(mean / (1 - mean))
    b = state.params[spec.parameterized_layers[-1]]["b"]
    b[...] = logit.reshape(b.shape) if logit.size == b.size else logit.mean()


def _fit(state, spec, x, y, loss_cfg, epochs, batch_size, lr, momentum, seed, checkpoint_path=None):
    """Mini-batch SGD; returns the per-step loss curve.

    A copy of the weights is taken at every epoch boundary and written to
    ``checkpoint_path`` if a later step diverges.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    curve = []
    n = len(x)
    for _ in range(epochs):
        last_good = state.copy() if checkpoint_path else None
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = np.sort(perm[start:start + batch_size])
            if len(idx) < 2:
                continue
            out, cache = forward(state, spec, x[idx], "train")
            value, d_out, g_l2 = total_loss(out, y[idx], state, spec, loss_cfg)
            if not math.isfinite(value.total):
                raise TrainingDiverged(state.step, _dump(last_good, spec, checkpoint_path))
            grads = merge_gradients(backward(state, spec, cache, d_out), g_l2)
            try:
                sgd_step(state, grads, lr, momentum)
            except DivergenceError:
                raise TrainingDiverged(state.step, _dump(last_good, spec, checkpoint_path)) from None
            curve.append((state.step, value.mse, value.balance, value.l2, value.total))
    return curve


def _dump(state, spec, path):
    if state is None or path is None:
        return None
    return save_weights(state, spec, path)


def _finish(report: RunReport, state, spec, out_dir, prefix: str, exports) -> RunReport:
    raw = weights_to_bytes(state, spec)
    report.weights_digest = hashlib.sha256(raw).hexdigest()
    report.code_digest = code_digest()
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_weights(state, spec, out_dir / f"{prefix}model.lsmw")
        report.write(out_dir, prefix)
        for name, (outputs, ds) in exports.items():
            export_reconstructions(outputs, ds, out_dir / f"{prefix}{name}_images")
    return report


def export_reconstructions(outputs: np.ndarray, ds: SpeckleDataset, out_dir, limit: int = 16) -> list[Path]:
    """Write ``recon_XXXX.pgm`` next to ``truth_XXXX.pgm`` for the first ``limit`` samples."""
    out_dir = Path(out_dir)
    paths = []
    for i in range(min(limit, len(outputs))):
        recon = np.floor(np.clip(to_gray_scale(outputs[i, 0]), 0, 255) + 0.5).astype(np.uint8)
        paths.append(write_pgm(GrayImage(recon), out_dir / f"recon_{i:04d}.pgm"))
        paths.append(write_pgm(ds.records[i][1], out_dir / f"truth_{i:04d}.pgm"))
    return paths


def _load(ds, path):
    if ds is not None:
        return ds
    if not path:
        raise ValueError("no dataset given")
    return load_dataset(path)


def train(cfg: RunConfig, dataset: SpeckleDataset | None = None, out_dir=None, eval_dataset=None):
    """Train from scratch on the first part of ``dataset``; returns ``(state, spec, report)``.

    Quality entries: ``train`` (training portion), ``holdout`` (last
    ``holdout_fraction``), ``baseline`` (mean-image predictor on the
    held-out part) and ``eval`` when an evaluation set is configured.
    """
    t0 = time.perf_counter()
    ds = _load(dataset, cfg.train_dataset_path)
    _require(ds, cfg)
    tr, held = ds.split(cfg.holdout_fraction)
    spec = build_network(cfg.architecture, ds.crop_size)
    state = init_state(spec, cfg.seed)
    state.config_digest, state.screen_seed = ds.config_digest, ds.screen_seed
    x, y = network_inputs(tr, cfg.input_mode), tr.target_array()
    init_output_bias(state, spec, y)
    ckpt = Path(out_dir) / "last_good.lsmw" if out_dir is not None else None
    curve = _fit(state, spec, x, y, cfg.loss, cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.momentum,
                 cfg.seed, ckpt)

    quality, exports = {}, {}
    quality["train"], _ = evaluate(state, spec, tr, cfg.input_mode)
    quality["holdout"], out = evaluate(state, spec, held, cfg.input_mode)
    exports["holdout"] = (out, held)
    quality["baseline"] = baseline_report(tr, held)
    if eval_dataset is not None or cfg.eval_dataset_path:
        ev = _load(eval_dataset, cfg.eval_dataset_path)
        check_provenance(state, ev)
        quality["eval"], out = evaluate(state, spec, ev, cfg.input_mode)
        exports["eval"] = (out, ev)
    report = RunReport(curve, quality, time.perf_counter() - t0, cfg, cfg.optical.digest())
    log.info("trained %s for %d steps in %.1f s", cfg.architecture, len(curve), report.wall_time)
    return state, spec, _finish(report, state, spec, out_dir, "", exports)


def vanilla_transfer(state: TrainState, spec: NetworkSpec, dataset: SpeckleDataset,
                     input_mode: str = "detector", out_dir=None, name: str = "eval") -> QualityReport:
    """Evaluate a trained model on another dataset recorded through the same diffuser."""
    check_provenance(state, dataset)
    report, out = evaluate(state, spec, dataset, input_mode)
    if out_dir is not None:
        atomic_write_text(Path(out_dir) / f"{name}_quality.csv",
                          QualityReport.CSV_HEADER + "\n" + report.csv_row(name, spec.name) + "\n")
        export_reconstructions(out, dataset, Path(out_dir) / f"{name}_images")
    return report


def finetune(state: TrainState, spec: NetworkSpec, cfg: RunConfig, dataset: SpeckleDataset | None = None,
             out_dir=None):
    """Retrain only the last ``cfg.finetune_trainable`` layers on a small target-domain sample.

    The fine-tune samples are the first ``cfg.finetune_samples`` records of the
    training portion; quality is measured on the held-out tail both before
    (``vanilla``) and after (``finetuned``). Returns ``(state, spec, report)``.
    """
    t0 = time.perf_counter()
    ds = _load(dataset, cfg.finetune_dataset_path)
    check_provenance(state, ds)
    tr, held = ds.split(cfg.holdout_fraction)
    if cfg.finetune_samples > len(tr):
        raise ValueError(f"finetune_samples={cfg.finetune_samples} exceeds the {len(tr)} available training records")
    sample = tr.subset(range(cfg.finetune_samples))
    ft_spec = freeze_all_but_last_k(spec, cfg.finetune_trainable)
    ft_state = state.astype(np.float32)
    ft_state.velocity = {}

    vanilla, _ = evaluate(ft_state, ft_spec, held, cfg.input_mode)
    x, y = network_inputs(sample, cfg.input_mode), sample.target_array()
    ckpt = Path(out_dir) / "finetune_last_good.lsmw" if out_dir is not None else None
    curve = _fit(ft_state, ft_spec, x, y, cfg.loss, cfg.finetune_epochs, cfg.batch_size,
                 cfg.learning_rate * cfg.finetune_lr_factor, cfg.momentum, cfg.seed + 1, ckpt)
    tuned, out = evaluate(ft_state, ft_spec, held, cfg.input_mode)
    report = RunReport(curve, {"vanilla": vanilla, "finetuned": tuned}, time.perf_counter() - t0, cfg,
                       cfg.optical.digest())
    return ft_state, ft_spec, _finish(report, ft_state, ft_spec, out_dir, "finetune_", {"finetuned": (out, held)})


@dataclass
class StudyResult:
    """Cells keyed by ``(train_name, target_name)``; off-diagonal cells are fine-tuned."""

    cells: dict[tuple[str, str], QualityReport]
    model: str

    def csv(self) -> str:
        rows = ["train,target," + QualityReport.CSV_HEADER.split(",", 2)[2]]
        for (src, dst), q in self.cells.items():
            rows.append(f"{src},{dst},{q.avg_gray_diff!r},{q.psnr_db!r},{q.ssim!r},{q.sample_count}")
        return "\n".join(rows) + "\n"


def dataset_selection_study(cfg: RunConfig, datasets: dict[str, SpeckleDataset], out_dir=None,
                            pretrained: dict | None = None) -> StudyResult:
    """Train on each of two datasets, then evaluate on each held-out tail.

    Diagonal cells evaluate the in-distribution model; off-diagonal cells
    fine-tune on the target dataset first. ``pretrained`` maps dataset names to
    ``(state, spec)`` pairs that skip the corresponding from-scratch run.
    """
    if len(datasets) != 2:
        raise ValueError("the study needs exactly two datasets")
    pretrained = dict(pretrained or {})
    models = {}
    for name, ds in datasets.items():
        if name in pretrained:
            models[name] = pretrained[name]
        else:
            state, spec, _ = train(cfg, ds)
            models[name] = (state, spec)
    cells = {}
    for src, (state, spec) in models.items():
        for dst, ds in datasets.items():
            if src == dst:
                cells[(src, dst)] = evaluate(state, spec, ds.split(cfg.holdout_fraction)[1], cfg.input_mode)[0]
            else:
                _, _, rep = finetune(state, spec, cfg, ds)
                cells[(src, dst)] = rep.quality["finetuned"]
    result = StudyResult(cells, cfg.architecture)
    if out_dir is not None:
        atomic_write_text(Path(out_dir) / "study.csv", result.csv())
    return result


def file_digests(paths) -> list[str]:
    """``sha256  name`` lines for a manifest."""
    return [f"{sha256_file(p)}  {Path(p).name}" for p in paths]
