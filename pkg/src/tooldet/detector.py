"""Two-stream detection head over region proposals, and full-frame detection."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import clip_boxes, decode_transform, nms
from .tensor import Tensor

BACKGROUND, TOOL = 0, 1
CLASS_NAMES = ("__background__", "tool")


def roi_bin_edges(rois, stride: float, ph: int, pw: int, fh: int, fw: int):
    """Integer feature-cell bin edges ``(h0, h1, w0, w1)``, each [R, ph, pw].

    A roi spans cells ``floor(x0/stride)`` to ``ceil(x1/stride)``; bin ``i``
    of ``n`` over a span of length ``L`` starting at ``s`` covers
    ``[s + floor(i L / n), s + ceil((i + 1) L / n))``, clamped to the map.
    """
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    x0 = np.floor(rois[:, 0] / stride).astype(np.int64)
    y0 = np.floor(rois[:, 1] / stride).astype(np.int64)
    x1 = np.ceil(rois[:, 2] / stride).astype(np.int64)
    y1 = np.ceil(rois[:, 3] / stride).astype(np.int64)
    outside = (x1 <= 0) | (y1 <= 0) | (x0 >= fw) | (y0 >= fh)
    if outside.any():
        raise ValueError(f"roi {rois[np.argmax(outside)].tolist()} lies outside the {fw}x{fh} feature map")
    rw = np.maximum(x1 - x0, 1)[:, None]
    rh = np.maximum(y1 - y0, 1)[:, None]
    i = np.arange(ph)[None, :]
    j = np.arange(pw)[None, :]
    hs = np.clip(y0[:, None] + (i * rh) // ph, 0, fh)
    he = np.clip(y0[:, None] - ((-(i + 1) * rh) // ph), 0, fh)
    ws = np.clip(x0[:, None] + (j * rw) // pw, 0, fw)
    we = np.clip(x0[:, None] - ((-(j + 1) * rw) // pw), 0, fw)
    shape = (len(rois), ph, pw)
    return (np.broadcast_to(hs[:, :, None], shape), np.broadcast_to(he[:, :, None], shape),
            np.broadcast_to(ws[:, None, :], shape), np.broadcast_to(we[:, None, :], shape))


def _interval_max(fmap: np.ndarray):
    """Max and first argmax of ``fmap[c, y, a:b]`` for every column interval.

    Returns arrays indexed ``[c, y, a, b]``; entries with ``b <= a`` are -inf.
    """
    c, h, w = fmap.shape
    best = np.full((c, h, w, w + 1), -np.inf, dtype=fmap.dtype)
    where = np.zeros((c, h, w, w + 1), dtype=np.int64)
    for length in range(1, w + 1):
        a = np.arange(w - length + 1)
        last = a + length - 1
        prev = best[:, :, a, a + length - 1]
        new = fmap[:, :, last]
        take_new = new > prev
        best[:, :, a, a + length] = np.where(take_new, new, prev)
        where[:, :, a, a + length] = np.where(take_new, last, where[:, :, a, a + length - 1])
    return best, where


def roi_pool(features: Tensor, rois, output_size: tuple[int, int], stride: float) -> Tensor:
    """Max-pool every roi of a [1, C, H, W] map into a fixed [R, C, ph, pw] grid.

    Bins follow :func:`roi_bin_edges`. Empty bins produce 0. The gradient of
    each bin goes to its first (row-major) maximal cell.
    """
    if features.ndim != 4 or features.shape[0] != 1:
        raise T.InvalidShapeError(f"roi_pool expects a [1, C, H, W] map, got {features.shape}")
    _, c, fh, fw = features.shape
    ph, pw = output_size
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    out = np.zeros((len(rois), ph, pw, c), dtype=features.dtype)
    arg = np.full((len(rois), ph, pw, c), -1, dtype=np.int64)
    if len(rois):
        h0, h1, w0, w1 = (e.reshape(-1) for e in roi_bin_edges(rois, stride, ph, pw, fh, fw))
        full = (h1 > h0) & (w1 > w0)
        h0, h1, w0, w1 = h0[full], h1[full], w0[full], w1[full]
        colmax, colarg = _interval_max(features.data[0])
        best = colmax[:, h0, w0, w1]
        best_row = np.broadcast_to(h0, best.shape).copy()
        best_col = colarg[:, h0, w0, w1]
        for t in range(1, int((h1 - h0).max(initial=0))):
            row = h0 + t
            ok = row < h1
            row = np.minimum(row, fh - 1)
            v = colmax[:, row, w0, w1]
            better = ok & (v > best)
            best = np.where(better, v, best)
            best_row = np.where(better, row, best_row)
            best_col = np.where(better, colarg[:, row, w0, w1], best_col)
        out.reshape(-1, c)[full] = best.T
        arg.reshape(-1, c)[full] = (best_row * fw + best_col).T
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    arg = arg.transpose(0, 3, 1, 2)
    chan = np.broadcast_to(np.arange(c)[None, :, None, None], arg.shape)

    def back(g):
        grad = np.zeros((c, fh * fw), dtype=g.dtype)
        hit = arg >= 0
        np.add.at(grad, (chan[hit], arg[hit]), g[hit])
        return (grad.reshape(1, c, fh, fw),)

    return T.record_op("roi_pool", out, (features,), back)


@dataclass
class DetectionOutput:
    class_logits: Tensor  # [R, K+1]
    box_deltas: Tensor  # [R, 4(K+1)]

    def probs(self) -> np.ndarray:
        z = self.class_logits.data.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def _stream_head(params: dict, prefix: str, features: Tensor, rois, roi_size: int, stride: float) -> Tensor:
    pooled = roi_pool(features, rois, (roi_size, roi_size), stride)
    x = T.reshape(pooled, (pooled.shape[0], -1))
    x = T.relu(T.linear(x, params[f"{prefix}.fc6.w"], params[f"{prefix}.fc6.b"]))
    return T.relu(T.linear(x, params[f"{prefix}.fc7.w"], params[f"{prefix}.fc7.b"]))


def detector_forward(
    params: dict,
    rgb_features: Tensor,
    flow_features: Tensor | None,
    rois,
    roi_size: int = 6,
    stride: float = 16,
) -> DetectionOutput:
    """Pool each stream, two FC+ReLU layers per stream, concatenate, fuse, predict.

    With ``flow_features=None`` the model is the single-stream (RGB only)
    variant and the fusion layer sees just the RGB vector.
    """
    x = _stream_head(params, "det.rgb", rgb_features, rois, roi_size, stride)
    if flow_features is not None:
        if flow_features.shape != rgb_features.shape:
            raise T.InvalidShapeError(
                f"stream feature maps differ: rgb {rgb_features.shape}, flow {flow_features.shape}"
            )
        y = _stream_head(params, "det.flow", flow_features, rois, roi_size, stride)
        x = T.concat(x, y, axis=1)
    x = T.relu(T.linear(x, params["det.fusion.w"], params["det.fusion.b"]))
    cls = T.linear(x, params["det.cls.w"], params["det.cls.b"])
    box = T.linear(x, params["det.bbox.w"], params["det.bbox.b"])
    return DetectionOutput(cls, box)


@dataclass
class Detection:
    frame_id: str
    label: int
    score: float
    box: tuple  # (xmin, ymin, xmax, ymax)

    def to_line(self) -> str:
        x0, y0, x1, y1 = self.box
        return f"{self.frame_id} {CLASS_NAMES[self.label]} {self.score:.6f} {x0:.2f} {y0:.2f} {x1:.2f} {y1:.2f}"

    @classmethod
    def from_line(cls, line: str) -> "Detection":
        fid, name, score, *coords = line.split()
        return cls(fid, CLASS_NAMES.index(name), float(score), tuple(float(v) for v in coords))


def postprocess(
    out: DetectionOutput,
    rois: np.ndarray,
    image_size: tuple[int, int],
    target_stds,
    score_thresh: float,
    nms_thresh: float,
    frame_id: str = "",
    max_per_image: int = 100,
) -> list[Detection]:
    """Per-class decode, score threshold and NMS over detector outputs."""
    probs = out.probs()
    deltas = out.box_deltas.data.astype(np.float64)
    stds = np.asarray(target_stds, dtype=np.float64)
    dets: list[Detection] = []
    for u in range(1, probs.shape[1]):
        boxes = decode_transform(rois, deltas[:, 4 * u:4 * u + 4] * stds)
        boxes, valid = clip_boxes(boxes, *image_size)
        sel = np.flatnonzero(valid & (probs[:, u] >= score_thresh))
        if sel.size == 0:
            continue
        keep = sel[nms(boxes[sel], probs[sel, u], nms_thresh)]
        dets.extend(Detection(frame_id, u, float(probs[i, u]), tuple(boxes[i].tolist())) for i in keep)
    dets.sort(key=lambda d: -d.score)
    return dets[:max_per_image]


def detect(model, frame: np.ndarray, flow_image: np.ndarray | None, score_thresh: float = 0.05,
           nms_thresh: float = 0.3, frame_id: str = "") -> tuple[list[Detection], float]:
    """Run the whole pipeline on one frame; returns detections and wall-clock seconds."""
    start = time.perf_counter()
    if model.config.two_stream and flow_image is None:
        raise ValueError("two-stream model needs a flow image")
    if flow_image is not None and flow_image.shape[:2] != frame.shape[:2]:
        raise ValueError(f"frame {frame.shape[:2]} and flow image {flow_image.shape[:2]} sizes differ")
    h, w = frame.shape[:2]
    cfg = model.config
    rgb_feat = model.backbone(model.prepare(frame), "rgb")
    rpn_out = model.rpn(rgb_feat)
    anchors = model.anchors(rgb_feat.shape[3], rgb_feat.shape[2])
    props = model.propose(rpn_out, anchors, (w, h), training=False)
    if len(props) == 0:
        return [], time.perf_counter() - start
    flow_feat = model.backbone(model.prepare(flow_image), "flow") if cfg.two_stream else None
    out = model.detector(rgb_feat, flow_feat, props.boxes)
    dets = postprocess(out, props.boxes, (w, h), cfg.target_stds, score_thresh, nms_thresh, frame_id)
    return dets, time.perf_counter() - start
