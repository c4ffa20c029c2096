"""Adam, learning-rate schedule, segmentation training and SWPT pre-training."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .blocks import ParamStore
from .checkpoint import Checkpoint, save_checkpoint
from .data import NEGATIVE, POSITIVE, PatchSample, Sample, augment_sample, prepare, stack
from .losses import LossWeights, bce_loss, total_loss
from .metrics import METRIC_NAMES, ConfusionCounts, Metrics, confusion_from_masks, metrics_from_counts
from .model import ScanetConfig, backbone_forward, scanet_forward
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gamma: float = 0.95
    epochs: int = 100
    batch_size: int = 16
    eval_every: int = 5
    alpha: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    seed: int = 0
    augment: bool = True
    threshold: float = 0.5
    pretrain_epochs: int = 50

    def __post_init__(self):
        self.alpha = tuple(self.alpha)
        LossWeights(self.alpha)
        for name in ("lr0", "eps", "gamma", "epochs", "batch_size", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["alpha"] = list(self.alpha)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def to_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(dict(d["m"]), dict(d["v"]), int(d["t"]))


def adam_step(params: ParamStore, state: AdamState, lr: float, cfg: TrainConfig, strict: bool = True) -> None:
    """One bias-corrected Adam update; gradients are left in place.

    With ``strict`` every learnable tensor must carry a gradient; otherwise
    tensors without one are skipped.
    """
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, p in params.params():
        g = p.grad
        if g is None:
            if strict:
                raise ValueError(f"parameter {name!r} has no gradient")
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if lr == 0:
            continue
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.data.dtype)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return cfg.lr0 * cfg.gamma**epoch


# ---------------------------------------------------------------------------
# evaluation


def _materialize(item, size: int, augment: bool, rng, subset_of=None) -> Sample:
    if isinstance(item, Sample):
        return augment_sample(item, rng) if augment else item
    subset = subset_of(item) if subset_of else "day"
    return prepare(item, size, augment, rng, subset)


def predict(model_cfg: ScanetConfig, params: ParamStore, images: Tensor) -> Tensor:
    with T.no_grad():
        return scanet_forward(model_cfg, images, params, training=False).final


def evaluate(
    predictor: Callable[[Tensor], Tensor],
    samples: Sequence,
    threshold: float = 0.5,
    batch_size: int = 8,
    size: int | None = None,
    subset_of=None,
) -> dict[str, tuple[ConfusionCounts, Metrics]]:
    """Pooled confusion counts and metrics per subset ("day", "night", "all").

    ``predictor`` maps an image batch to a probability map batch.
    """
    counts: dict[str, ConfusionCounts] = {}
    for start in range(0, len(samples), batch_size):
        chunk = [_materialize(s, size, False, None, subset_of) for s in samples[start : start + batch_size]]
        images, masks = stack(chunk)
        pred = predictor(images)
        for j, s in enumerate(chunk):
            c = confusion_from_masks(pred.data[j : j + 1], masks.data[j : j + 1], threshold)
            for key in (s.subset, "all"):
                counts[key] = counts.get(key, ConfusionCounts()) + c
    return {k: (c, metrics_from_counts(c)) for k, c in counts.items()}


# ---------------------------------------------------------------------------
# training loop


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    best_miou: float = -1.0
    best_epoch: int = -1

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "lr", *METRIC_NAMES])
            for r in self.rows:
                metrics = r.get("metrics")
                tail = [repr(metrics[k]) for k in METRIC_NAMES] if metrics else [""] * len(METRIC_NAMES)
                w.writerow([r["epoch"], repr(r["loss"]), repr(r["lr"]), *tail])


def model_checkpoint(
    params: ParamStore, model_cfg: ScanetConfig, epoch: int, state: AdamState | None = None, extra: dict | None = None
) -> Checkpoint:
    return Checkpoint(
        params.state(),
        config=model_cfg.to_dict(),
        epoch=epoch,
        optimizer=state.to_dict() if state is not None else None,
        extra=extra or {},
    )


def train(
    params: ParamStore,
    model_cfg: ScanetConfig,
    train_set: Sequence,
    test_set: Sequence,
    cfg: TrainConfig,
    out_dir=None,
    subset_of=None,
) -> History:
    """Deep-supervision training with Adam and per-epoch exponential decay.

    ``train_set``/``test_set`` items are in-memory ``Sample`` objects or
    ``(image_path, mask_path)`` pairs decoded on demand at the model size.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    weights = LossWeights(cfg.alpha)
    state = AdamState()
    history = History()
    size = model_cfg.input_size
    out_dir = Path(out_dir) if out_dir is not None else None
    params.zero_grad()
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        batch_losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch = [
                _materialize(train_set[i], size, cfg.augment, np.random.default_rng([cfg.seed, epoch, i]), subset_of)
                for i in idx
            ]
            images, masks = stack(batch)
            out = scanet_forward(model_cfg, images, params, training=True)
            loss = total_loss(out.preds, masks, weights)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            T.backward(loss)
            adam_step(params, state, lr, cfg, strict=False)
            params.zero_grad()
            batch_losses.append(value)
        row = {"epoch": epoch + 1, "loss": float(np.mean(batch_losses)), "lr": lr}
        if (epoch + 1) % cfg.eval_every == 0 and len(test_set):
            res = evaluate(
                lambda x: predict(model_cfg, params, x), test_set, cfg.threshold, size=size, subset_of=subset_of
            )
            metrics = res["all"][1]
            row["metrics"] = metrics.as_dict()
            row["by_subset"] = {k: m.as_dict() for k, (_, m) in res.items()}
            if metrics.miou > history.best_miou:
                history.best_miou, history.best_epoch = metrics.miou, epoch + 1
                if out_dir is not None:
                    save_checkpoint(out_dir / "best.sckp", model_checkpoint(params, model_cfg, epoch + 1, state))
        history.rows.append(row)
        log.info("epoch %d loss %.6f lr %.3g", epoch + 1, row["loss"], lr)
    if out_dir is not None:
        save_checkpoint(out_dir / "final.sckp", model_checkpoint(params, model_cfg, cfg.epochs, state))
        history.write_csv(out_dir / "history.csv")
    return history


# ---------------------------------------------------------------------------
# SWPT pre-training


def init_swpt_head(model_cfg: ScanetConfig, seed: int) -> ParamStore:
    rng = np.random.default_rng([seed, 2])
    head = ParamStore().scope("swpt_head")
    c = model_cfg.tap_widths[3]
    bound = 1 / np.sqrt(c)
    head.add_param("weight", rng.uniform(-bound, bound, (1, 1, 1, c)))
    head.add_param("bias", np.zeros((1, 1, 1, 1)))
    return head


def swpt_predict(model_cfg: ScanetConfig, backbone: ParamStore, head: ParamStore, patches: Tensor, training: bool) -> Tensor:
    """Backbone -> global average pool -> fully connected -> sigmoid."""
    t4 = backbone_forward(model_cfg, backbone, patches, training)[3]
    return T.sigmoid(T.fully_connected(T.global_avg_pool(t4), head["weight"], head["bias"]))


@dataclass
class PretrainResult:
    backbone: ParamStore
    head: ParamStore
    losses: list[float]
    accuracy: list[float]


def pretrain_swpt(
    backbone: ParamStore, model_cfg: ScanetConfig, patches: Sequence[PatchSample], cfg: TrainConfig
) -> PretrainResult:
    """Patch-level cloud/sky classification; the FC head is discarded afterwards."""
    labels = {p.label for p in patches}
    if labels != {POSITIVE, NEGATIVE}:
        raise ValueError(f"pre-training needs both positive and negative patches, got {sorted(labels) or 'none'}")
    head = init_swpt_head(model_cfg, cfg.seed)
    store = ParamStore()
    store._params.update(backbone._params)
    store._buffers.update(backbone._buffers)
    store._params.update(head._params)
    state = AdamState()
    xs = np.concatenate([p.patch.data for p in patches])
    ys = np.array([1.0 if p.label == POSITIVE else 0.0 for p in patches]).reshape(-1, 1, 1, 1)
    losses, accs = [], []
    store.zero_grad()
    for epoch in range(cfg.pretrain_epochs):
        lr = lr_at(epoch, cfg)
        order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(len(patches))
        total, correct = [], 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            prob = swpt_predict(model_cfg, backbone, head, Tensor(xs[idx]), training=True)
            loss = bce_loss(prob, Tensor(ys[idx]))
            T.backward(loss)
            adam_step(store, state, lr, cfg, strict=False)
            store.zero_grad()
            total.append(loss.item())
            correct += int(np.count_nonzero((prob.data >= 0.5) == (ys[idx] > 0.5)))
        losses.append(float(np.mean(total)))
        accs.append(correct / len(patches))
    return PretrainResult(backbone, head, losses, accs)


def swpt_accuracy(backbone: ParamStore, head: ParamStore, model_cfg: ScanetConfig, patches: Sequence[PatchSample]) -> float:
    xs = Tensor(np.concatenate([p.patch.data for p in patches]))
    ys = np.array([p.label == POSITIVE for p in patches])
    with T.no_grad():
        prob = swpt_predict(model_cfg, backbone, head, xs, training=False).data.reshape(-1)
    return float(np.mean((prob >= 0.5) == ys))
