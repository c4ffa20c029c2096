"""Command-line entry point: ``scanet <train|pretrain|eval|infer|curves|bench>``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T
from .bench import benchmark
from .blocks import ParamStore
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataError, build_patch_set, load_dataset, normalize, prepare, synth_generate
from .metrics import METRIC_NAMES, f_measure_curve, pr_curve, write_curve_csv
from .model import ScanetConfig, build_backbone, build_model, config_for, scanet_forward
from .train import TrainConfig, _materialize, evaluate, model_checkpoint, predict, pretrain_swpt, train

log = logging.getLogger("scanet")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_FAIL):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------------------
# configuration


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}", EXIT_USAGE)
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}", EXIT_USAGE)
    if not isinstance(cfg, dict) or set(cfg) - {"model", "train"}:
        raise CliError(f"config file {path} must be an object with 'model' and/or 'train' keys", EXIT_USAGE)
    return cfg


def resolve_configs(args) -> tuple[ScanetConfig, TrainConfig]:
    """Config file values, then command-line overrides."""
    file_cfg = _load_config_file(args.config)
    try:
        model_d = dict(file_cfg.get("model", {}))
        variant = args.variant or model_d.pop("variant", "lite")
        model = config_for(variant)
        model = ScanetConfig.from_dict({**model.to_dict(), **model_d})
        if args.size is not None:
            model = model.with_size(args.size)
        train_d = dict(file_cfg.get("train", {}))
        for flag, key in (("epochs", "epochs"), ("seed", "seed"), ("batch_size", "batch_size")):
            if getattr(args, flag, None) is not None:
                train_d[key] = getattr(args, flag)
        if getattr(args, "no_augment", False):
            train_d["augment"] = False
        tcfg = TrainConfig.from_dict(train_d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad configuration: {exc}", EXIT_USAGE)
    return model, tcfg


def resolve_data(args, model: ScanetConfig, seed: int):
    """Returns ``(train_items, test_items, subset_of)``."""
    if args.synthetic:
        samples = synth_generate(args.synthetic, model.input_size, seed, cover=args.synthetic_cover)
        n_test = len(samples) // 10
        return samples[n_test:], samples[:n_test], None
    if args.data is None:
        raise CliError("no data: pass --data PATH or --synthetic N", EXIT_USAGE)
    root = Path(args.data)
    if not root.exists():
        raise CliError(f"dataset root does not exist: {root}", EXIT_USAGE)
    try:
        index = load_dataset(root, seed)
    except DataError as exc:
        raise CliError(str(exc), EXIT_USAGE)
    return index.train, index.test, index.subset_of


def select_split(args, train_items, test_items):
    split = getattr(args, "split", "test")
    if split == "train":
        return list(train_items)
    if split == "all":
        return list(train_items) + list(test_items)
    return list(test_items)


def load_model(path) -> tuple[ScanetConfig, ParamStore]:
    try:
        ckpt = load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}", EXIT_USAGE)
    except CheckpointError as exc:
        raise CliError(str(exc))
    try:
        cfg = ScanetConfig.from_dict(ckpt.config)
        params = build_model(cfg, seed=0)
        params.load_state(ckpt.tensors)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"checkpoint {path} does not match a model config: {exc}")
    return cfg, params


def _checked_model(args) -> tuple[ScanetConfig, ParamStore]:
    if args.checkpoint is None:
        raise CliError("--checkpoint is required", EXIT_USAGE)
    cfg, params = load_model(args.checkpoint)
    if args.variant and args.variant != cfg.variant:
        raise CliError(f"checkpoint holds variant {cfg.variant!r}, but --variant {args.variant} was requested")
    if args.size is not None and args.size != cfg.input_size:
        cfg = cfg.with_size(args.size)
    return cfg, params


def write_metrics_table(path: Path, results: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subset", *METRIC_NAMES])
        for subset in ("day", "night", "all"):
            if subset in results:
                m = results[subset][1].as_dict()
                w.writerow([subset, *(f"{m[k]:.6f}" for k in METRIC_NAMES)])


def _print_table(results: dict) -> None:
    print("subset  " + "  ".join(f"{k:>10}" for k in METRIC_NAMES))
    for subset in ("day", "night", "all"):
        if subset in results:
            m = results[subset][1].as_dict()
            print(f"{subset:<7} " + "  ".join(f"{m[k]:>10.4f}" for k in METRIC_NAMES))


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    model, tcfg = resolve_configs(args)
    train_items, test_items, subset_of = resolve_data(args, model, tcfg.seed)
    if not train_items:
        raise CliError("training set is empty")
    params = build_model(model, tcfg.seed)
    if args.init:
        try:
            ckpt = load_checkpoint(args.init)
            params.load_state(ckpt.tensors, strict=False)
        except (OSError, CheckpointError, KeyError, ValueError) as exc:
            raise CliError(f"cannot initialize from {args.init}: {exc}")
    out = Path(args.out)
    history = train(params, model, train_items, test_items, tcfg, out, subset_of)
    if test_items:
        results = evaluate(
            lambda x: predict(model, params, x), test_items, tcfg.threshold, size=model.input_size, subset_of=subset_of
        )
        write_metrics_table(out / "metrics.csv", results)
        _print_table(results)
    print(f"trained {tcfg.epochs} epochs; final loss {history.rows[-1]['loss']:.6f}; outputs in {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    model, tcfg = resolve_configs(args)
    if model.input_size % 64:
        raise CliError(f"--size must be divisible by 64 so that patches fit the backbone, got {model.input_size}", EXIT_USAGE)
    train_items, _, subset_of = resolve_data(args, model, tcfg.seed)
    samples = [s if not isinstance(s, tuple) else prepare(s, model.input_size) for s in train_items]
    summary = build_patch_set(samples)
    print(f"patches: positive={summary.positive} negative={summary.negative} ignored={summary.ignored}")
    if summary.positive == 0 or summary.negative == 0:
        raise CliError("single class patch set: pre-training needs both cloud and sky patches")
    if args.epochs is not None:
        tcfg.pretrain_epochs = args.epochs
    backbone, _ = build_backbone(model, tcfg.seed)
    result = pretrain_swpt(backbone, model, summary.patches, tcfg)
    out = Path(args.out)
    save_checkpoint(
        out / "swpt_backbone.sckp",
        model_checkpoint(result.backbone, model, tcfg.pretrain_epochs, extra={"kind": "swpt-backbone"}),
    )
    print(f"pre-training accuracy {result.accuracy[-1]:.4f}; wrote {out / 'swpt_backbone.sckp'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, params = _checked_model(args)
    seed = args.seed if args.seed is not None else 0
    train_items, test_items, subset_of = resolve_data(args, cfg, seed)
    items = select_split(args, train_items, test_items)
    if not items:
        raise CliError("evaluation set is empty")
    results = evaluate(lambda x: predict(cfg, params, x), items, 0.5, size=cfg.input_size, subset_of=subset_of)
    write_metrics_table(Path(args.out) / "metrics.csv", results)
    _print_table(results)
    return EXIT_OK


def _to_u8(prob: np.ndarray) -> np.ndarray:
    return np.round(np.clip(prob, 0, 1) * 255).astype(np.uint8)


def cmd_infer(args) -> int:
    cfg, params = _checked_model(args)
    if args.image is None:
        raise CliError("--image is required", EXIT_USAGE)
    path = Path(args.image)
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot decode image {path}: {exc}")
    orig_w, orig_h = rgb.size
    arr = np.asarray(rgb.resize((cfg.input_size, cfg.input_size), Image.BILINEAR), dtype=np.float32) / 255.0
    image = T.Tensor(normalize(arr.transpose(2, 0, 1)[None]))
    with T.no_grad():
        outs = scanet_forward(cfg, image, params, training=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask = ((outs.final.data[0, 0] >= 0.5) * 255).astype(np.uint8)
    Image.fromarray(mask).resize((orig_w, orig_h), Image.NEAREST).save(out / f"{path.stem}_mask.png")
    if args.dump_stages:
        for i, s in enumerate(outs.preds, start=1):
            Image.fromarray(_to_u8(s.data[0, 0])).save(out / f"{path.stem}_s{i}.png")
        for i, m in enumerate(outs.masks, start=2):
            Image.fromarray(_to_u8(m.data[0].mean(axis=0))).save(out / f"{path.stem}_m{i}.png")
    print(f"wrote {out / (path.stem + '_mask.png')}")
    return EXIT_OK


def cmd_curves(args) -> int:
    cfg, params = _checked_model(args)
    seed = args.seed if args.seed is not None else 0
    train_items, test_items, subset_of = resolve_data(args, cfg, seed)
    items = select_split(args, train_items, test_items)
    if not items:
        raise CliError("test set is empty; nothing to draw curves from")
    groups: dict[str, tuple[list, list]] = {}
    for item in items:
        s = _materialize(item, cfg.input_size, False, None, subset_of)
        pred = predict(cfg, params, s.image)
        for key in (s.subset, "all"):
            preds, gts = groups.setdefault(key, ([], []))
            preds.append(pred.data)
            gts.append(s.mask.data)
    out = Path(args.out)
    for key, (preds, gts) in groups.items():
        write_curve_csv(out / f"pr_{key}.csv", ("threshold", "precision", "recall"), pr_curve(preds, gts, args.n_points))
        write_curve_csv(out / f"fmeasure_{key}.csv", ("threshold", "f_score"), f_measure_curve(preds, gts, args.n_points))
    print(f"wrote curves for {sorted(groups)} to {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.random_weights or args.checkpoint is None:
        cfg = config_for(args.variant or "lite", args.size)
        params = build_model(cfg, seed=args.seed or 0)
    else:
        cfg, params = _checked_model(args)
    from threadpoolctl import threadpool_limits

    # one worker so latency reflects a single inference stream
    with threadpool_limits(limits=1):
        report = benchmark(cfg, params, args.precision, args.iters, args.warmup)
    print(report.summary())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        d = report.as_dict()
        with (out / f"bench_{args.precision}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(d))
            w.writerow(list(d.values()))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "pretrain": cmd_pretrain,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "curves": cmd_curves,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with 'model' / 'train' sections")
    common.add_argument("--data", help="dataset root with images/ and GTmaps/")
    common.add_argument("--synthetic", type=int, default=0, metavar="N", help="use N synthetic samples")
    common.add_argument("--synthetic-cover", type=float, default=None, help="fix synthetic cloud cover (0..1)")
    common.add_argument("--size", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--no-augment", action="store_true")
    common.add_argument("--init", help="checkpoint to initialize weights from (e.g. SWPT backbone)")
    common.add_argument("--checkpoint", help="model checkpoint")
    common.add_argument("--variant", choices=["lite", "base"])
    common.add_argument("--image")
    common.add_argument("--split", choices=["train", "test", "all"], default="test")
    common.add_argument("--precision", choices=["fp32", "fp16"], default="fp32")
    common.add_argument("--iters", type=int, default=100)
    common.add_argument("--warmup", type=int, default=10)
    common.add_argument("--random-weights", action="store_true")
    common.add_argument("--n-points", type=int, default=256)
    common.add_argument("--out", default="runs/latest")
    common.add_argument("--dump-stages", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")
    ap = argparse.ArgumentParser(prog="scanet", description="SCANet sky/cloud segmentation")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return ap


@contextlib.contextmanager
def _thread_limit():
    limit = os.environ.get("SCANET_THREADS")
    if not limit:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(limit)):
        yield


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"scanet {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
