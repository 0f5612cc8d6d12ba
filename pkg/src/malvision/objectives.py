"""Training losses: unit regression, depth, segmentation, and their blend.

The autoregressive loss is a mean squared error over scored prediction
units only.  Averaging (rather than summing) over units keeps the
masking-ratio knob from silently rescaling the learning rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericsError, SelectionError
from .masking import MaskSelection
from .serialize import ClusterPlan
from .tensor import (Tensor, add, index_select, mul, power, sub, texp, tlog,
                     tmean, tsum)


@dataclass(frozen=True)
class LossWeights:
    """Blend weights: ``alpha`` on the task loss, ``beta`` on the AR loss."""

    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise DimensionError(
                f"weights must be nonnegative with a positive sum "
                f"(alpha={self.alpha}, beta={self.beta})")


@dataclass
class LossReport:
    total: float
    components: dict[str, float]
    count: int


# -- unit bookkeeping ---------------------------------------------------------


def scored_units(plan: ClusterPlan, selection: MaskSelection) -> np.ndarray:
    """Boolean per unit: True when the unit contains a masked position."""
    size = plan.cluster_size
    return selection.masked.reshape(plan.num_clusters, size).any(axis=1)


def prediction_slots(plan: ClusterPlan, selection: MaskSelection | None,
                     mode: str = "masked") -> tuple[np.ndarray, np.ndarray]:
    """Pair decoder positions with the units they predict.

    Returns (positions, unit_ids), one entry per scored slot.  In
    ``masked`` mode every masked position predicts its own unit: the mask
    token there carries no unit content, so the prediction rests on
    attendable context only.  In ``next_unit`` mode the last position of
    unit k-1 predicts unit k, the classic next-unit-from-prefix
    arrangement (unit 0 has no prefix and is never scored).
    """
    size = plan.cluster_size
    if mode == "masked":
        if selection is None:
            raise SelectionError("masked mode requires a selection")
        positions = np.flatnonzero(selection.masked)
        if positions.size == 0:
            raise SelectionError("selection hides no positions")
        return positions, positions // size
    if mode == "next_unit":
        units = np.arange(1, plan.num_clusters, dtype=np.int64)
        positions = units * size - 1
        return positions, units
    raise SelectionError(f"unknown prediction mode {mode!r}")


# -- losses ---------------------------------------------------------------------


def ar_loss(preds: Tensor, targets: np.ndarray, scored: np.ndarray) -> Tensor:
    """Mean squared error over the scored units' pixel vectors.

    ``preds`` and ``targets`` are aligned per serialized prediction unit
    ((..., K, unit_dim)); ``scored`` selects which units contribute.
    """
    targets = np.asarray(targets)
    if preds.shape != targets.shape:
        raise DimensionError(
            f"prediction shape {preds.shape} != target shape {targets.shape}")
    ids = np.flatnonzero(np.asarray(scored, dtype=bool))
    if ids.size == 0:
        raise SelectionError("no scored units")
    axis = preds.ndim - 2
    p = index_select(preds, axis, ids)
    t = np.take(targets, ids, axis=axis).astype(preds.dtype)
    return tmean(power(sub(p, Tensor(t)), 2.0))


def depth_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-pixel squared error between depth maps of equal extent."""
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(
            f"depth extents differ: {pred.shape} vs {target.shape}")
    return tmean(power(sub(pred, Tensor(target.astype(pred.dtype))), 2.0))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the last axis."""
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(
            f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise DimensionError(f"label outside [0, {k})")
    shift = logits.data.max(axis=-1, keepdims=True)
    z = sub(logits, Tensor(shift))
    lse = tlog(tsum(texp(z), axis=-1, keepdims=True))
    onehot = np.eye(k, dtype=logits.dtype)[labels]
    true_logit = tsum(mul(z, Tensor(onehot)), axis=-1, keepdims=True)
    return tmean(sub(lse, true_logit))


def seg_loss(pred_logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy; targets are integer class ids."""
    return cross_entropy(pred_logits, target)


def multitask_loss(task: Tensor, ar: Tensor, weights: LossWeights,
                   task_name: str = "task") -> tuple[Tensor, LossReport]:
    """Weighted blend ``alpha * task + beta * ar`` plus a component report."""
    for name, value in (("task", task), ("ar", ar)):
        if not np.isfinite(float(value.data)):
            raise NumericsError(f"non-finite {name} loss")
    total = add(mul(task, weights.alpha), mul(ar, weights.beta))
    report = LossReport(
        total=float(total.data),
        components={task_name: float(task.data), "ar": float(ar.data)},
        count=2)
    return total, report
