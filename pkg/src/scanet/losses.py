"""BCE and IoU losses with deep supervision over the four stage predictions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, _emit

PROB_CLAMP = 1e-7
IOU_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    alpha: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.alpha) != 4:
            raise ValueError(f"need four stage weights, got {self.alpha}")
        if any(a < 0 for a in self.alpha) or not any(a > 0 for a in self.alpha):
            raise ValueError(f"weights must be nonnegative with at least one positive: {self.alpha}")


def _same_shape(p: Tensor, y: Tensor) -> None:
    if p.shape != y.shape:
        raise ShapeError(f"prediction {p.shape} and target {y.shape} differ in shape")


def bce_loss(p: Tensor, y: Tensor) -> Tensor:
    """Mean binary cross-entropy; p is clamped to [1e-7, 1 - 1e-7]."""
    _same_shape(p, y)
    pd = np.clip(p.data, PROB_CLAMP, 1 - PROB_CLAMP)
    yd = y.data
    n = p.size
    loss = -(yd * np.log(pd) + (1 - yd) * np.log(1 - pd)).sum() / n
    inside = (p.data >= PROB_CLAMP) & (p.data <= 1 - PROB_CLAMP)

    def bw(g):
        gp = (pd - yd) / (pd * (1 - pd)) / n * inside
        return gp * g.reshape(()), None

    return _emit(np.reshape(loss, (1, 1, 1, 1)), (p, y), bw)


def iou_loss(p: Tensor, y: Tensor) -> Tensor:
    """1 - mean_j y_j p_j / (y_j + p_j - y_j p_j + 1e-7)."""
    _same_shape(p, y)
    pd, yd = p.data, y.data
    n = p.size
    den = yd + pd - yd * pd + IOU_EPS
    loss = 1 - (yd * pd / den).sum() / n

    def bw(g):
        # d/dp of y p / den, with d(den)/dp = 1 - y
        dterm = (yd * den - yd * pd * (1 - yd)) / (den * den)
        return -dterm / n * g.reshape(()), None

    return _emit(np.reshape(loss, (1, 1, 1, 1)), (p, y), bw)


def downsample_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of an ``(n, c, H, W)`` mask to ``size``x``size``.

    Output pixel o samples input index floor((o + 0.5) * H / size).
    """
    h, w = mask.shape[2:]
    ri = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
    ci = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
    return mask[:, :, ri][:, :, :, ci]


def stage_targets(gt: Tensor, preds: Sequence[Tensor]) -> list[Tensor]:
    return [Tensor(downsample_nearest(gt.data, p.shape[2])) for p in preds]


def total_loss(preds: Sequence[Tensor], gt: Tensor, weights: LossWeights | None = None) -> Tensor:
    """Weighted sum over stages of bce + iou against downsampled targets."""
    weights = weights or LossWeights()
    if len(preds) != 4:
        raise ValueError(f"expected four stage predictions, got {len(preds)}")
    if preds[-1].shape != gt.shape:
        raise ShapeError(f"final prediction {preds[-1].shape} must match ground truth {gt.shape}")
    total = None
    for a, p, y in zip(weights.alpha, preds, stage_targets(gt, preds)):
        if a == 0:
            continue
        term = T.scale(T.add(bce_loss(p, y), iou_loss(p, y)), a)
        total = term if total is None else T.add(total, term)
    return total
