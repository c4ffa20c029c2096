"""Epochs needed to hit the overfit target with and without SWPT backbone initialization.

The ordering is reported only; at desk scale it can go either way.

    python3 scripts/swpt_vs_scratch.py --epochs 150
"""

import argparse

from scanet.data import build_patch_set, synth_generate
from scanet.model import build_backbone, build_model, config_for
from scanet.train import TrainConfig, pretrain_swpt, train


def epochs_to_target(cfg, params, data, tcfg, target):
    """One uninterrupted run, scored on the training set after every epoch."""
    run_cfg = TrainConfig(**{**tcfg.to_dict(), "eval_every": 1})
    history = train(params, cfg, data, data, run_cfg)
    accs = [r["metrics"]["accuracy"] for r in history.rows]
    hit = next((i + 1 for i, a in enumerate(accs) if a >= target), None)
    return hit, accs[-1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=8)
    ap.add_argument("--pretrain-samples", type=int, default=32)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--pretrain-epochs", type=int, default=50)
    ap.add_argument("--target", type=float, default=0.95)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = config_for("lite", args.size)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=2, seed=args.seed, pretrain_epochs=args.pretrain_epochs)
    data = synth_generate(args.samples, args.size, args.seed)

    patches = build_patch_set(synth_generate(args.pretrain_samples, args.size, args.seed + 1000))
    print(f"patches: positive={patches.positive} negative={patches.negative} ignored={patches.ignored}")
    backbone, _ = build_backbone(cfg, args.seed)
    pre = pretrain_swpt(backbone, cfg, patches.patches, tcfg)
    print(f"swpt patch accuracy after {args.pretrain_epochs} epochs: {pre.accuracy[-1]:.3f}")

    scratch = build_model(cfg, args.seed)
    warm = build_model(cfg, args.seed)
    warm.load_state(pre.backbone.state(), strict=False)

    for name, params in (("scratch", scratch), ("swpt", warm)):
        n, acc = epochs_to_target(cfg, params, data, tcfg, args.target)
        reached = f"{n} epochs" if n is not None else f"not reached in {args.epochs} epochs"
        print(f"{name:<8} accuracy >= {args.target}: {reached} (last {acc:.4f})")


if __name__ == "__main__":
    main()
