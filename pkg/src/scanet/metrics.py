"""Pixel confusion counts, the six evaluation metrics, PR / F-measure curves."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import ShapeError

METRIC_NAMES = ("accuracy", "precision", "recall", "f_score", "error_rate", "miou")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"counts must be nonnegative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f_score: float
    error_rate: float
    miou: float
    miou_pos: float
    miou_neg: float
    # names of ratios that were 0/0 and therefore set to 1.0
    undefined: tuple[str, ...] = field(default=())

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x))


def confusion_from_masks(pred, gt, threshold: float = 0.5) -> ConfusionCounts:
    """Tally a probability map against a binary mask; p >= threshold is cloud."""
    p, g = _as_array(pred), _as_array(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    # compare in float64 so point metrics agree exactly with the curve path
    pos = p.astype(np.float64) >= float(threshold)
    cloud = g > 0.5
    tp = int(np.count_nonzero(pos & cloud))
    fp = int(np.count_nonzero(pos & ~cloud))
    fn = int(np.count_nonzero(~pos & cloud))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def _ratio(num: int, den: int, name: str, undefined: list[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 1.0
    return num / den


def metrics_from_counts(c: ConfusionCounts) -> Metrics:
    if c.total <= 0:
        raise ValueError("confusion counts are empty")
    undefined: list[str] = []
    total = c.total
    precision = _ratio(c.tp, c.tp + c.fp, "precision", undefined)
    recall = _ratio(c.tp, c.tp + c.fn, "recall", undefined)
    if precision + recall == 0:
        f = 0.0
    else:
        f = 2 * precision * recall / (precision + recall)
    miou_pos = _ratio(c.tp, c.fn + c.fp + c.tp, "miou_pos", undefined)
    miou_neg = _ratio(c.tn, c.tn + c.fn + c.fp, "miou_neg", undefined)
    correct = c.tp + c.tn
    return Metrics(
        accuracy=correct / total,
        precision=precision,
        recall=recall,
        f_score=f,
        # defined as the exact complement so accuracy + error_rate == 1.0
        error_rate=1.0 - correct / total,
        miou=(miou_pos + miou_neg) / 2,
        miou_pos=miou_pos,
        miou_neg=miou_neg,
        undefined=tuple(undefined),
    )


def curve_thresholds(n_points: int) -> np.ndarray:
    if n_points < 2:
        raise ValueError(f"need at least two curve points, got {n_points}")
    return np.arange(n_points) / (n_points - 1)


def _pooled_counts(preds, gts, thresholds) -> list[ConfusionCounts]:
    if len(preds) == 0 or len(preds) != len(gts):
        raise ValueError(f"need equal-length nonempty prediction/label lists, got {len(preds)} and {len(gts)}")
    pos_scores, neg_scores = [], []
    for p, g in zip(preds, gts):
        p, g = _as_array(p), _as_array(g)
        if p.shape != g.shape:
            raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
        cloud = g > 0.5
        p = p.astype(np.float64)
        pos_scores.append(p[cloud].ravel())
        neg_scores.append(p[~cloud].ravel())
    pos = np.sort(np.concatenate(pos_scores))
    neg = np.sort(np.concatenate(neg_scores))
    # number of scores >= t
    tp = pos.size - np.searchsorted(pos, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg, thresholds, side="left")
    return [
        ConfusionCounts(int(a), int(b), int(pos.size - a), int(neg.size - b)) for a, b in zip(tp, fp)
    ]


def pr_curve(preds: Sequence, gts: Sequence, n_points: int = 256) -> list[tuple[float, float, float]]:
    """Micro-averaged (threshold, precision, recall) over the pooled set."""
    ts = curve_thresholds(n_points)
    out = []
    for t, c in zip(ts, _pooled_counts(preds, gts, ts)):
        m = metrics_from_counts(c)
        out.append((float(t), m.precision, m.recall))
    return out


def f_measure_curve(preds: Sequence, gts: Sequence, n_points: int = 256) -> list[tuple[float, float]]:
    ts = curve_thresholds(n_points)
    return [
        (float(t), metrics_from_counts(c).f_score) for t, c in zip(ts, _pooled_counts(preds, gts, ts))
    ]


CURVE_DECIMALS = 12


def write_curve_csv(path, header: Sequence[str], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.{CURVE_DECIMALS}f}" for v in row])
