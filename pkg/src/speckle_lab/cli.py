"""Command-line front end: ``speckle-lab <command> [flags]``.

Exit codes are 0 on success, 1 on runtime failure and 2 on usage errors.
Directory outputs are assembled in a scratch directory next to ``--out`` and
moved into place only after the command succeeds, together with a
``manifest.txt`` of ``sha256  filename`` lines and an echo of the settings.
"""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

FORMATS = ("idx", "cifar", "pgm-dir")
THREADS_ENV = "SPECKLE_LAB_THREADS"


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"must be in [0, 2**64), got {value}")
    return value


def _even_grid(text: str) -> int:
    value = _positive_int(text)
    if value % 2:
        raise argparse.ArgumentTypeError(f"grid must be even, got {value}")
    return value


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="speckle-lab", description="Speckle simulation and reconstruction experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--threads", type=_positive_int, default=_default_threads(),
                        help=f"worker threads (default: ${THREADS_ENV} or 1)")

    g = sub.add_parser("gen-diffuser", help="sample a diffuser screen")
    g.add_argument("--seed", type=_nonneg_int, default=0)
    g.add_argument("--grid", type=_even_grid, default=800)
    g.add_argument("--config", help="run config; only its optical.* keys are used")
    common(g, "output .lsds file")

    s = sub.add_parser("simulate", help="simulate speckle for a target set")
    s.add_argument("--targets", required=True)
    s.add_argument("--format", required=True, choices=FORMATS)
    s.add_argument("--diffuser", required=True)
    s.add_argument("--config", help="run config (default: desk-scale optics)")
    s.add_argument("--limit", type=_positive_int, help="use only the first N targets")
    common(s, "output .lsmd file")

    t = sub.add_parser("train", help="train a network from scratch")
    t.add_argument("--config", help="run config")
    t.add_argument("--dataset", required=True, help="training .lsmd (last 10%% held out)")
    t.add_argument("--eval-dataset", help="extra .lsmd evaluated after training")
    t.add_argument("--arch", choices=("fcn", "ocn"))
    t.add_argument("--epochs", type=_nonneg_int)
    t.add_argument("--seed", type=_nonneg_int)
    common(t)

    f = sub.add_parser("finetune", help="fine-tune the last layers of a trained model")
    f.add_argument("--config", help="run config")
    f.add_argument("--model", required=True, help=".lsmw weights")
    f.add_argument("--dataset", required=True)
    f.add_argument("--arch", choices=("fcn", "ocn"))
    f.add_argument("--samples", type=_positive_int)
    f.add_argument("--epochs", type=_nonneg_int)
    common(f)

    e = sub.add_parser("eval", help="evaluate a trained model on a dataset")
    e.add_argument("--config", help="run config")
    e.add_argument("--model", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--arch", choices=("fcn", "ocn"))
    e.add_argument("--holdout-only", action="store_true", help="score only the held-out tail")
    common(e)

    st = sub.add_parser("study", help="2x2 train/fine-tune dataset-selection grid")
    st.add_argument("--config", help="run config")
    st.add_argument("--dataset-a", required=True)
    st.add_argument("--dataset-b", required=True)
    st.add_argument("--names", default="a,b", help="comma-separated labels for the two datasets")
    st.add_argument("--arch", choices=("fcn", "ocn"))
    st.add_argument("--epochs", type=_nonneg_int, help="from-scratch epochs for both datasets")
    common(st)

    a = sub.add_parser("analyze", help="gray-level distribution of a target set")
    a.add_argument("--targets", required=True)
    a.add_argument("--format", required=True, choices=FORMATS)
    a.add_argument("--limit", type=_positive_int)
    a.add_argument("--crop", type=_positive_int, default=32)
    common(a)
    return p


class _Staging:
    """Collect outputs in a scratch directory; publish them atomically on success."""

    def __init__(self, out: Path):
        self.out = out
        out.parent.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))

    def publish(self, manifest_lines: list[str]) -> list[Path]:
        from ._io import atomic_write_text, sha256_file

        files = sorted(p for p in self.dir.rglob("*") if p.is_file())
        digests = [f"{sha256_file(p)}  {p.relative_to(self.dir).as_posix()}" for p in files]
        atomic_write_text(self.dir / "manifest.txt", "\n".join(digests + [""] + manifest_lines) + "\n")
        self.out.mkdir(parents=True, exist_ok=True)
        moved = []
        for p in sorted(self.dir.rglob("*")):
            if p.is_file():
                dest = self.out / p.relative_to(self.dir)
                dest.parent.mkdir(parents=True, exist_ok=True)
                os.replace(p, dest)
                moved.append(dest)
        self.discard()
        return moved

    def discard(self):
        shutil.rmtree(self.dir, ignore_errors=True)


def _load_config(args):
    from .pipeline import RunConfig

    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    if getattr(args, "arch", None):
        overrides["architecture"] = args.arch
        if cfg.loss == RunConfig(architecture=cfg.architecture).loss:
            overrides["loss"] = None  # follow the new architecture's default sign
    if getattr(args, "epochs", None) is not None:
        overrides["finetune_epochs" if args.command == "finetune" else "epochs"] = args.epochs
    if getattr(args, "seed", None) is not None and args.command == "train":
        overrides["seed"] = args.seed
    if getattr(args, "samples", None) is not None:
        overrides["finetune_samples"] = args.samples
    return replace(cfg, **overrides) if overrides else cfg


def _echo(args, cfg=None) -> list[str]:
    lines = ["# settings", f"command={args.command}"]
    for key, value in sorted(vars(args).items()):
        if key not in ("command", "verbose", "out"):
            lines.append(f"arg.{key}={value}")
    if cfg is not None:
        lines += cfg.to_text().splitlines()
    return lines


def _load_model(path, cfg):
    from .nn import build_network, load_weights

    spec = build_network(cfg.architecture, cfg.optical.crop_size)
    return load_weights(path, spec), spec


def cmd_gen_diffuser(args) -> int:
    from .optics import make_diffuser, save_screen

    optical = _load_config(args).optical
    display = min(optical.display_size, args.grid)
    optical = replace(optical, grid_size=args.grid, display_size=display, crop_size=min(optical.crop_size, display))
    screen = make_diffuser(optical, args.seed)
    path = save_screen(screen, args.out)
    from ._io import sha256_file

    print(f"{sha256_file(path)}  {path.name}  grid={args.grid} seed={args.seed}")
    return 0


def cmd_simulate(args) -> int:
    from .dataset import generate_dataset, load_targets, save_dataset
    from .optics import load_screen

    cfg = _load_config(args)
    screen = load_screen(args.diffuser)
    if screen.grid_size != cfg.optical.grid_size:
        raise ValueError(f"diffuser grid {screen.grid_size} does not match config grid {cfg.optical.grid_size}")
    targets = load_targets(args.targets, args.format, cfg.optical.crop_size)
    if args.limit:
        targets = targets[:args.limit]
    ds = generate_dataset(targets, screen, cfg.optical, Path(args.targets).name, workers=args.threads)
    save_dataset(ds, args.out)
    print(f"records={len(ds)} config_digest={ds.config_digest.hex()}")
    return 0


def cmd_train(args, stage: _Staging) -> list[str]:
    from .dataset import load_dataset
    from .pipeline import train

    cfg = _load_config(args)
    ds = load_dataset(args.dataset)
    ev = load_dataset(args.eval_dataset) if args.eval_dataset else None
    _, _, report = train(cfg, ds, stage.dir, ev)
    cfg.save(stage.dir / "run.cfg")
    for name, q in report.quality.items():
        print(f"{name}: psnr_db={q.psnr_db:.3f} ssim={q.ssim:.4f} avg_gray_diff={q.avg_gray_diff:.3f}")
    logging.getLogger(__name__).info("wall time %.1f s", report.wall_time)
    return _echo(args, cfg)


def cmd_finetune(args, stage: _Staging) -> list[str]:
    from .dataset import load_dataset
    from .pipeline import finetune

    cfg = _load_config(args)
    state, spec = _load_model(args.model, cfg)
    _, _, report = finetune(state, spec, cfg, load_dataset(args.dataset), stage.dir)
    cfg.save(stage.dir / "run.cfg")
    for name, q in report.quality.items():
        print(f"{name}: psnr_db={q.psnr_db:.3f} ssim={q.ssim:.4f} avg_gray_diff={q.avg_gray_diff:.3f}")
    return _echo(args, cfg)


def cmd_eval(args, stage: _Staging) -> list[str]:
    from .dataset import load_dataset
    from .pipeline import vanilla_transfer

    cfg = _load_config(args)
    state, spec = _load_model(args.model, cfg)
    ds = load_dataset(args.dataset)
    if args.holdout_only:
        ds = ds.split(cfg.holdout_fraction)[1]
    q = vanilla_transfer(state, spec, ds, cfg.input_mode, stage.dir, name="eval")
    print(f"eval: psnr_db={q.psnr_db:.3f} ssim={q.ssim:.4f} avg_gray_diff={q.avg_gray_diff:.3f} n={q.sample_count}")
    return _echo(args, cfg)


def cmd_study(args, stage: _Staging) -> list[str]:
    from .dataset import load_dataset
    from .pipeline import dataset_selection_study

    names = [n.strip() for n in args.names.split(",")]
    if len(names) != 2 or len(set(names)) != 2 or not all(names):
        raise ValueError("--names needs two distinct labels")
    cfg = _load_config(args)
    datasets = {names[0]: load_dataset(args.dataset_a), names[1]: load_dataset(args.dataset_b)}
    result = dataset_selection_study(cfg, datasets, stage.dir)
    print(result.csv(), end="")
    return _echo(args, cfg)


def cmd_analyze(args, stage: _Staging) -> list[str]:
    from .dataset import analyze_distribution, load_targets

    targets = load_targets(args.targets, args.format, args.crop)
    if args.limit:
        targets = targets[:args.limit]
    report = analyze_distribution(targets)
    report.write_csv(stage.dir)
    print(f"images={len(targets)} entropy_bits={report.entropy_bits:.4f}")
    return _echo(args)


DIR_COMMANDS = {"train": cmd_train, "finetune": cmd_finetune, "eval": cmd_eval,
                "study": cmd_study, "analyze": cmd_analyze}
FILE_COMMANDS = {"gen-diffuser": cmd_gen_diffuser, "simulate": cmd_simulate}


def _run(args) -> int:
    if args.command in FILE_COMMANDS:
        return FILE_COMMANDS[args.command](args)
    from .pipeline import TrainingDiverged

    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise ValueError(f"--out {out} exists and is not a directory")
    stage = _Staging(out)
    try:
        lines = DIR_COMMANDS[args.command](args, stage)
        stage.publish(lines)
    except TrainingDiverged as exc:
        # the last-good checkpoint is the one artifact kept from a failed run
        if exc.checkpoint is not None and Path(exc.checkpoint).exists():
            out.mkdir(parents=True, exist_ok=True)
            os.replace(exc.checkpoint, out / Path(exc.checkpoint).name)
        stage.discard()
        raise
    except BaseException:
        stage.discard()
        raise
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _run(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001  every runtime failure maps to exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
