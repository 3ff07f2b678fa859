"""Loss functions and evaluation metrics for the three affect tasks.

The VA objective is 1 - CCC per dimension; Expr uses multiclass
cross-entropy; AU uses sigmoid + binary cross-entropy in its numerically
stable fused form. Evaluation reports CCC for valence/arousal and macro F1
for Expr and AU. Frames flagged invalid are excluded from every loss and
metric.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as A
from .autodiff import Tensor
from . import tasks
from .errors import ContractError, EmptyBatchError, UndefinedStatisticError


def concordance(x, y):
    """Differentiable concordance correlation coefficient of two series.

    ccc = 2*cov(x, y) / (var(x) + var(y) + (mean(x) - mean(y))^2), in
    [-1, 1]. The agreement form is sometimes written with cov as the bare
    sum Σ(x-μx)(y-μy); normalizations would then disagree and ccc(x, x)
    would not be 1, so cov and both variances all use the same population
    (1/N) normalization here.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = y if isinstance(y, Tensor) else Tensor(y)
    x = A.reshape(x, (-1,))
    y = A.reshape(y, (-1,))
    if x.size != y.size:
        raise ContractError(f"series lengths differ: {x.size} vs {y.size}")
    if x.size < 2:
        raise ContractError(f"ccc needs at least 2 points, got {x.size}")
    mx = A.mean(x)
    my = A.mean(y)
    dx = A.sub(x, mx)
    dy = A.sub(y, my)
    cov = A.mean(A.mul(dx, dy))
    var_x = A.mean(A.mul(dx, dx))
    var_y = A.mean(A.mul(dy, dy))
    mean_gap = A.sub(mx, my)
    denom = A.add(A.add(var_x, var_y), A.mul(mean_gap, mean_gap))
    if denom.item() == 0.0:
        raise UndefinedStatisticError(
            "ccc undefined: both series constant with equal means"
        )
    return A.div(A.mul(cov, 2.0), denom)


def ccc(x, y):
    """CCC of two plain arrays, as a float."""
    with A.no_grad():
        return concordance(Tensor(np.asarray(x)), Tensor(np.asarray(y))).item()


def _flatten_masked(pred, target, mask, width):
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    flat = A.reshape(pred, (-1, width))
    target = np.asarray(target).reshape(-1, width)
    if mask is None:
        mask = np.ones(len(target), dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    return flat, target, mask


def va_loss(pred, target, mask=None):
    """Mean of (1 - CCC) over the valence and arousal dimensions.

    ``pred`` and ``target`` are ``[..., 2]``; ``mask`` flags which frames
    carry usable labels.
    """
    flat, target, mask = _flatten_masked(pred, target, mask, 2)
    idx = np.flatnonzero(mask)
    if idx.size < 2:
        raise EmptyBatchError(f"va_loss needs >= 2 valid frames, got {idx.size}")
    rows = A.take(flat, idx, axis=0)
    total = None
    for dim in range(2):
        col = A.take(rows, np.array([dim]), axis=1)
        term = A.sub(1.0, concordance(col, Tensor(target[idx, dim])))
        total = term if total is None else A.add(total, term)
    return A.mul(total, 0.5)


def expr_loss(logits, class_ids, mask=None):
    """Multiclass cross-entropy -mean(log p_true) over valid frames.

    ``class_ids`` in 0..7, or -1 for frames with no usable annotation.
    """
    num_classes = tasks.OUTPUT_DIMS[tasks.EXPR]
    pred = logits if isinstance(logits, Tensor) else Tensor(logits)
    flat = A.reshape(pred, (-1, num_classes))
    ids = np.asarray(class_ids).reshape(-1)
    if mask is None:
        mask = np.ones(len(ids), dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    valid = mask & (ids >= 0)
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        raise EmptyBatchError("expr_loss: every frame is masked")
    logp = A.log_softmax(flat, axis=-1)
    picked = A.take(A.reshape(logp, (-1,)), idx * num_classes + ids[idx], axis=0)
    return A.neg(A.mean(picked))


def au_loss(logits, targets, mask=None):
    """Mean binary cross-entropy with logits over unmasked AU entries.

    Computed as ``max(x,0) - x*y + log(1+exp(-|x|))`` per entry; ``mask``
    may be per frame or per entry and invalid entries do not count toward
    the mean's denominator.
    """
    num_units = tasks.OUTPUT_DIMS[tasks.AU]
    pred = logits if isinstance(logits, Tensor) else Tensor(logits)
    flat = A.reshape(pred, (-1, num_units))
    targ = np.asarray(targets).reshape(-1, num_units)
    entry_mask = _entry_mask(mask, targ.shape)
    count = int(entry_mask.sum())
    if count == 0:
        raise EmptyBatchError("au_loss: every entry is masked")
    elementwise = A.bce_with_logits(flat, np.where(entry_mask, targ, 0.0))
    kept = A.mul(elementwise, entry_mask.astype(flat.dtype))
    return A.div(A.sum_(kept), float(count))


def macro_f1(pred_ids, true_ids, num_classes):
    """Unweighted mean of per-class F1. A class absent from both the truth
    and the predictions scores 0 and still counts toward the mean.

    Returns ``(macro, per_class)``.
    """
    pred_ids = np.asarray(pred_ids).reshape(-1)
    true_ids = np.asarray(true_ids).reshape(-1)
    per_class = np.zeros(num_classes)
    for c in range(num_classes):
        tp = int(np.sum((pred_ids == c) & (true_ids == c)))
        fp = int(np.sum((pred_ids == c) & (true_ids != c)))
        fn = int(np.sum((pred_ids != c) & (true_ids == c)))
        denom = 2 * tp + fp + fn
        per_class[c] = 2.0 * tp / denom if denom else 0.0
    return float(per_class.mean()), per_class


def _entry_mask(mask, shape):
    """Normalize a per-frame or per-entry mask to the [rows, units] shape."""
    rows, units = shape
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.size == rows * units:
        return mask.reshape(shape)
    if mask.size == rows:
        return np.broadcast_to(mask.reshape(-1, 1), shape)
    raise ContractError(
        f"mask of size {mask.size} matches neither {rows} frames nor {rows}x{units} entries"
    )


def au_binary_f1(pred01, targets, mask=None):
    """Per-unit binary F1 of already-thresholded 0/1 AU predictions.

    Returns ``(macro, per_unit)``.
    """
    num_units = tasks.OUTPUT_DIMS[tasks.AU]
    pred = np.asarray(pred01).reshape(-1, num_units) > 0
    targ = np.asarray(targets).reshape(-1, num_units) > 0
    entry_mask = _entry_mask(mask, targ.shape)
    per_unit = np.zeros(num_units)
    for j in range(num_units):
        keep = entry_mask[:, j]
        p, t = pred[keep, j], targ[keep, j]
        tp = int(np.sum(p & t))
        fp = int(np.sum(p & ~t))
        fn = int(np.sum(~p & t))
        denom = 2 * tp + fp + fn
        per_unit[j] = 2.0 * tp / denom if denom else 0.0
    return float(per_unit.mean()), per_unit


def au_f1(logits, targets, mask=None, threshold=0.5):
    """Macro F1 over the 12 action units; a unit's F1 is the binary F1 of
    its positive label after thresholding sigmoid(logit) at ``threshold``.

    Returns ``(macro, per_unit)``.
    """
    num_units = tasks.OUTPUT_DIMS[tasks.AU]
    x = np.asarray(logits.data if isinstance(logits, Tensor) else logits).reshape(-1, num_units)
    pred = A._sigmoid_np(x.astype(np.float64)) >= threshold
    return au_binary_f1(pred, targets, mask)


@dataclass
class MetricReport:
    """Per-task evaluation scores in the shape the fold table expects."""

    task: str
    fold: int | None = None
    ccc_v: float | None = None
    ccc_a: float | None = None
    macro_f1: float | None = None
    per_class: list = field(default_factory=list)

    @property
    def summary(self):
        """Single model-selection score: mean CCC for VA, macro F1 otherwise."""
        if self.task == tasks.VA:
            return (self.ccc_v + self.ccc_a) / 2.0
        return self.macro_f1

    def to_dict(self):
        return {
            "task": self.task,
            "fold": self.fold,
            "ccc_v": self.ccc_v,
            "ccc_a": self.ccc_a,
            "macro_f1": self.macro_f1,
            "per_class": list(self.per_class),
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)
