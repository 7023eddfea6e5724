"""Anchor generation, IoU labeling and positive/negative mini-batch sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import encode_targets, iou_matrix

FULL_RES_SCALES = (128, 256, 512)
DESK_SCALES = (32, 64, 128)
RATIOS = (0.5, 1.0, 2.0)

POSITIVE, NEGATIVE, NEUTRAL = 1, 0, -1


def base_anchors(stride: float, scales, ratios) -> np.ndarray:
    """Anchors of the top-left cell, scale-major then ratio.

    Ratio ``r`` is width/height; area stays ``scale**2``.
    """
    c = 0.5 * stride
    out = []
    for s in scales:
        for r in ratios:
            w = s * np.sqrt(r)
            h = s / np.sqrt(r)
            out.append([c - w / 2, c - h / 2, c + w / 2, c + h / 2])
    return np.asarray(out, dtype=np.float64)


def generate_anchors(feat_w: int, feat_h: int, stride: float, scales=DESK_SCALES, ratios=RATIOS) -> np.ndarray:
    """All ``feat_w * feat_h * k`` anchors as an [A, 4] array.

    Row ``(i * feat_w + j) * k + a`` is anchor ``a`` of feature cell (row i, col j).
    """
    if feat_w < 1 or feat_h < 1 or stride <= 0:
        raise ValueError("feature size and stride must be positive")
    if not len(scales) or not len(ratios):
        raise ValueError("scales and ratios must be non-empty")
    base = base_anchors(stride, scales, ratios)
    ys, xs = np.meshgrid(np.arange(feat_h) * stride, np.arange(feat_w) * stride, indexing="ij")
    shifts = np.stack([xs, ys, xs, ys], axis=-1).reshape(-1, 1, 4)
    return (shifts + base[None]).reshape(-1, 4)


def inside_mask(anchors: np.ndarray, width: float, height: float, allowed_border: float = 0.0) -> np.ndarray:
    return (
        (anchors[:, 0] >= -allowed_border)
        & (anchors[:, 1] >= -allowed_border)
        & (anchors[:, 2] <= width + allowed_border)
        & (anchors[:, 3] <= height + allowed_border)
    )


@dataclass
class AnchorLabels:
    labels: np.ndarray  # int8, POSITIVE / NEGATIVE / NEUTRAL
    matched: np.ndarray  # ground-truth index per anchor, -1 when not positive
    targets: np.ndarray  # [A, 4], zero rows for non-positives
    max_iou: np.ndarray

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)


def label_anchors(anchors, gt_boxes, hi: float = 0.7, lo: float = 0.3, valid=None) -> AnchorLabels:
    """Assign positive/negative/neutral labels by IoU against ground truth.

    Positives: IoU > ``hi`` with some box, plus the single best anchor of every
    ground truth it overlaps at all. Negatives: IoU < ``lo`` with every box.
    Anchors outside ``valid`` stay neutral.
    """
    if hi <= lo:
        raise ValueError("hi threshold must exceed lo threshold")
    anchors = np.asarray(anchors, dtype=np.float64)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(anchors)
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    labels = np.full(n, NEUTRAL, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4))
    if len(gt) == 0:
        labels[valid] = NEGATIVE
        return AnchorLabels(labels, matched, targets, np.zeros(n))

    ious = iou_matrix(anchors, gt)
    ious[~valid] = -1.0
    best_gt = ious.argmax(axis=1)
    max_iou = ious[np.arange(n), best_gt]
    labels[valid & (max_iou < lo)] = NEGATIVE
    pos = valid & (max_iou > hi)
    matched[pos] = best_gt[pos]
    for g in range(len(gt)):
        a = int(ious[:, g].argmax())
        if ious[a, g] > 0:
            pos[a] = True
            matched[a] = g
    labels[pos] = POSITIVE
    if pos.any():
        targets[pos] = encode_targets(anchors[pos], gt[matched[pos]])
    return AnchorLabels(labels, matched, targets, np.maximum(max_iou, 0.0))


@dataclass
class Minibatch:
    positives: np.ndarray
    negatives: np.ndarray

    @property
    def indices(self) -> np.ndarray:
        return np.concatenate([self.positives, self.negatives])

    @property
    def skip(self) -> bool:
        return self.positives.size + self.negatives.size == 0

    def __len__(self) -> int:
        return self.positives.size + self.negatives.size


def sample_minibatch(labels, batch: int = 256, pos_fraction: float = 0.5, rng=None) -> Minibatch:
    """Draw up to ``batch * pos_fraction`` positives, filling the rest with negatives."""
    if batch < 2:
        raise ValueError("batch must be at least 2")
    rng = np.random.default_rng(rng)
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == POSITIVE)
    neg = np.flatnonzero(labels == NEGATIVE)
    n_pos = min(len(pos), int(batch * pos_fraction))
    if len(pos) > n_pos:
        pos = np.sort(rng.choice(pos, size=n_pos, replace=False))
    n_neg = min(len(neg), batch - n_pos)
    if len(neg) > n_neg:
        neg = np.sort(rng.choice(neg, size=n_neg, replace=False))
    return Minibatch(pos.astype(np.int64), neg.astype(np.int64))
