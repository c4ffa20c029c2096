"""Overfit the lite model on a handful of synthetic images and report training-set metrics.

    python3 scripts/desk_overfit.py --epochs 150 --out runs/desk
"""

import argparse
import time
from pathlib import Path

import numpy as np

from scanet.data import synth_generate
from scanet.metrics import METRIC_NAMES
from scanet.checkpoint import save_checkpoint
from scanet.model import build_model, config_for
from scanet.train import TrainConfig, evaluate, model_checkpoint, predict, train


def window_means(losses, width=10):
    n = len(losses) // width
    return [float(np.mean(losses[i * width : (i + 1) * width])) for i in range(n)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--batch-size", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--variant", default="lite", choices=["lite", "base"])
    ap.add_argument("--no-augment", action="store_true")
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    cfg = config_for(args.variant, args.size)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, seed=args.seed, augment=not args.no_augment)
    data = synth_generate(args.samples, args.size, args.seed)
    params = build_model(cfg, args.seed)

    t0 = time.perf_counter()
    history = train(params, cfg, data, [], tcfg)
    elapsed = time.perf_counter() - t0

    means = window_means(history.losses)
    print("10-epoch mean loss:", " ".join(f"{m:.3f}" for m in means))
    rises = sum(b > a for a, b in zip(means, means[1:]))
    print(f"windows with a higher mean than the previous one: {rises} of {max(len(means) - 1, 0)}")

    m = evaluate(lambda x: predict(cfg, params, x), data)["all"][1]
    print(f"{args.variant} {args.samples}x{args.size}^2, {args.epochs} epochs, {elapsed:.0f} s")
    for k in METRIC_NAMES:
        print(f"  {k:<10} {getattr(m, k):.4f}")

    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        history.write_csv(args.out / "history.csv")
        save_checkpoint(args.out / "final.sckp", model_checkpoint(params, cfg, args.epochs))
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
