"""Box arithmetic: IoU, NMS, regression transforms, clipping and ridge fitting.

Boxes are ``[xmin, ymin, xmax, ymax]`` rows in continuous pixel coordinates,
area ``(xmax - xmin) * (ymax - ymin)`` with no inclusive-pixel ``+1``.
Deltas are ``[dx, dy, dw, dh]``: center offsets scaled by the reference size
and log-space size ratios.
"""
from __future__ import annotations

import math

import numpy as np

# ln(1000/16): bound on log-size deltas before exponentiation
DELTA_CLAMP = math.log(1000.0 / 16)


def _as_boxes(b) -> np.ndarray:
    arr = np.asarray(b, dtype=np.float64)
    return arr.reshape(-1, 4)


def check_boxes(b) -> np.ndarray:
    arr = _as_boxes(b)
    bad = (arr[:, 2] <= arr[:, 0]) | (arr[:, 3] <= arr[:, 1])
    if bad.any():
        raise ValueError(f"degenerate box {arr[np.argmax(bad)].tolist()}")
    return arr


def to_center(b) -> np.ndarray:
    """Corner form to ``[cx, cy, w, h]``."""
    b = _as_boxes(b)
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    return np.stack([b[:, 0] + 0.5 * w, b[:, 1] + 0.5 * h, w, h], axis=1)


def to_corner(c) -> np.ndarray:
    c = _as_boxes(c)
    half_w = 0.5 * c[:, 2]
    half_h = 0.5 * c[:, 3]
    return np.stack([c[:, 0] - half_w, c[:, 1] - half_h, c[:, 0] + half_w, c[:, 1] + half_h], axis=1)


def area(b) -> np.ndarray:
    b = _as_boxes(b)
    return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between the rows of ``a`` [N,4] and ``b`` [M,4]."""
    a = _as_boxes(a)
    b = _as_boxes(b)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    union = area(a)[:, None] + area(b)[None, :] - inter
    return inter / union


def iou(a, b) -> float:
    a = check_boxes(a)
    b = check_boxes(b)
    return float(iou_matrix(a, b)[0, 0])


def encode_targets(anchors, gt) -> np.ndarray:
    """Regression targets mapping reference boxes onto matched ground truth."""
    p = to_center(anchors)
    g = to_center(gt)
    return np.stack(
        [
            (g[:, 0] - p[:, 0]) / p[:, 2],
            (g[:, 1] - p[:, 1]) / p[:, 3],
            np.log(g[:, 2] / p[:, 2]),
            np.log(g[:, 3] / p[:, 3]),
        ],
        axis=1,
    )


def decode_transform(anchors, deltas) -> np.ndarray:
    p = to_center(anchors)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    dw = np.clip(d[:, 2], -DELTA_CLAMP, DELTA_CLAMP)
    dh = np.clip(d[:, 3], -DELTA_CLAMP, DELTA_CLAMP)
    pred = np.stack(
        [
            p[:, 2] * d[:, 0] + p[:, 0],
            p[:, 3] * d[:, 1] + p[:, 1],
            p[:, 2] * np.exp(dw),
            p[:, 3] * np.exp(dh),
        ],
        axis=1,
    )
    return to_corner(pred)


def clip_boxes(b, width: float, height: float) -> tuple[np.ndarray, np.ndarray]:
    """Clamp boxes into the frame; returns the boxes and a validity mask.

    A box is invalid when clipping leaves it with zero width or height, which
    includes every box lying wholly outside the frame.
    """
    if width <= 0 or height <= 0:
        raise ValueError("frame size must be positive")
    b = _as_boxes(b).copy()
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, width)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, height)
    valid = (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1])
    return b, valid


def nms(boxes, scores, threshold: float, max_keep: int | None = None) -> np.ndarray:
    """Greedy non-maximum suppression.

    Candidates are visited by descending score, ties broken by input index;
    a candidate is dropped when its IoU with any kept box exceeds
    ``threshold``. Returns kept indices in visiting order, stopping early once
    ``max_keep`` boxes are kept.
    """
    boxes = _as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not 0 < threshold < 1:
        raise ValueError(f"NMS threshold must lie in (0, 1), got {threshold}")
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    keep = []
    while order.size and (max_keep is None or len(keep) < max_keep):
        i = order[0]
        keep.append(i)
        rest = order[1:]
        w = np.maximum(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0.0)
        h = np.maximum(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0.0)
        inter = w * h
        overlap = inter / (areas[i] + areas[rest] - inter)
        order = rest[overlap <= threshold]
    return np.asarray(keep, dtype=np.int64)


def fit_bbox_regressor_ridge(features, targets, lambda_ridge: float) -> np.ndarray:
    """Solve ``(F^T F + lambda I) w = F^T t`` for a [D, 4] weight matrix."""
    f = np.asarray(features, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if f.ndim != 2 or t.ndim != 2 or f.shape[0] != t.shape[0] or f.shape[0] < 1:
        raise ValueError(f"incompatible ridge inputs {f.shape} and {t.shape}")
    if lambda_ridge <= 0:
        raise ValueError("lambda_ridge must be positive")
    gram = f.T @ f + lambda_ridge * np.eye(f.shape[1])
    return np.linalg.solve(gram, f.T @ t)
