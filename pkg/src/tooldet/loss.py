"""Multi-task detection objective: log loss plus smooth-L1 box regression.

The same routine serves the proposal head (object vs. background, per anchor)
and the detection head (K+1 classes with class-specific deltas, per region).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_FLOOR = 1e-12
clamp_events = 0  # number of times cls_loss had to floor a zero probability


def smooth_l1(x):
    """0.5 x^2 inside |x| < 1, |x| - 0.5 outside.

    Accepts floats, arrays, or tensors; on tensors the result is differentiable.
    """
    if isinstance(x, Tensor):
        d = x.data
        small = np.abs(d) < 1
        val = np.where(small, 0.5 * d * d, np.abs(d) - 0.5)
        slope = np.where(small, d, np.sign(d))
        return T.record_op("smooth_l1", val.astype(d.dtype), (x,), lambda g: (g * slope,))
    a = np.asarray(x, dtype=np.float64)
    out = np.where(np.abs(a) < 1, 0.5 * a * a, np.abs(a) - 0.5)
    return float(out) if out.ndim == 0 else out


def cls_loss(p, u: int) -> float:
    """Negative log-probability of the true class from a probability row."""
    global clamp_events
    pu = float(np.asarray(p, dtype=np.float64)[u])
    if pu <= 0.0:
        clamp_events += 1
        pu = PROB_FLOOR
    return -math.log(pu)


@dataclass
class LossBreakdown:
    total: Tensor
    cls_term: Tensor
    reg_term: Tensor
    n_cls: int
    n_reg: int
    lam: float

    def values(self) -> dict:
        return {
            "total": float(self.total.data),
            "cls": float(self.cls_term.data),
            "reg": float(self.reg_term.data),
        }


def multitask_loss(
    logits: Tensor,
    deltas: Tensor,
    labels,
    targets,
    n_cls: int,
    n_reg: int,
    lam: float = 10.0,
    reg_weights=None,
) -> LossBreakdown:
    """``1/n_cls * sum(-log p_u) + lam/n_reg * sum(p* smooth_l1(t - t*))``.

    ``logits`` is [N, C]; ``deltas`` is [N, 4] (class-agnostic) or [N, 4C]
    (class ``u`` uses columns ``4u:4u+4``). ``labels`` holds the true class of
    each row, 0 being background. Regression only counts rows with a positive
    label, or rows flagged in ``reg_weights`` when that is given.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    n, c = logits.shape
    if labels.shape[0] != n or deltas.shape[0] != n or targets.shape[0] != n:
        raise T.InvalidShapeError("logits, deltas, labels and targets disagree on row count")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError("class label out of range")

    logp = T.log_softmax(logits)
    picked = T.take(logp, np.arange(n) * c + labels)
    cls_term = T.scale(T.sum_all(picked), -1.0 / n_cls)

    active = labels > 0 if reg_weights is None else np.asarray(reg_weights) > 0
    rows = np.flatnonzero(active)
    width = deltas.shape[1]
    if rows.size:
        col0 = 4 * labels[rows] if width == 4 * c else np.zeros(rows.size, dtype=np.int64)
        idx = (rows * width + col0)[:, None] + np.arange(4)[None, :]
        diff = T.take(deltas, idx) - T.tensor(targets[rows])
        reg_term = T.scale(T.sum_all(smooth_l1(diff)), lam / n_reg)
    else:
        reg_term = T.scale(T.sum_all(T.take(deltas, np.zeros(0, dtype=np.int64))), 0.0)
    total = T.add(cls_term, reg_term)
    return LossBreakdown(total, cls_term, reg_term, n_cls, n_reg, lam)
