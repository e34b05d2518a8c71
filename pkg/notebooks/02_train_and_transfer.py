"""Train on natural images, then carry the model over to digits.

A scaled-down version of the full workflow: simulate two corpora through one
diffuser, train a network from scratch on the natural images, evaluate it on
digits as-is, and fine-tune its last layers on a small digit budget.  The
defaults finish in a few minutes on one core; ``--samples 2000 --epochs 15``
reproduces the desk-scale setting.

    python3 notebooks/02_train_and_transfer.py --arch ocn --out /tmp/transfer_demo
"""
import argparse
import time
from pathlib import Path

from speckle_lab import synthetic
from speckle_lab.dataset import generate_dataset, rgb_to_gray, to_target
from speckle_lab.optics import OpticalConfig, make_diffuser
from speckle_lab.pipeline import RunConfig, finetune, train


def show(title, quality):
    print(title)
    for name, q in quality.items():
        print(f"  {name:>9}: {q.psnr_db:6.2f} dB  SSIM {q.ssim:.3f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", choices=("fcn", "ocn"), default="fcn")
    ap.add_argument("--samples", type=int, default=600)
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()

    config = OpticalConfig.desk()
    screen = make_diffuser(config, 42)
    t0 = time.perf_counter()
    natural = generate_dataset([to_target(x) for x in rgb_to_gray(synthetic.natural_images(args.samples, seed=1))],
                               screen, config, "natural")
    digits = generate_dataset([to_target(x) for x in synthetic.digit_images(args.samples, seed=2)],
                              screen, config, "digits")
    print(f"simulated 2 x {args.samples} speckle pairs in {time.perf_counter() - t0:.0f} s")

    cfg = RunConfig(architecture=args.arch, epochs=args.epochs, finetune_samples=min(300, args.samples // 2))
    out = args.out / "train" if args.out else None
    state, spec, report = train(cfg, natural, out, eval_dataset=digits)
    show(f"{args.arch.upper()} trained on natural images ({report.wall_time:.0f} s)", report.quality)
    print(f"  final training loss {report.loss_curve[-1][-1]:.2f}")

    _, _, ft = finetune(state, spec, cfg, digits, args.out / "finetune" if args.out else None)
    show(f"after fine-tuning the last {cfg.finetune_trainable} layers on {cfg.finetune_samples} digits",
         ft.quality)


if __name__ == "__main__":
    main()
