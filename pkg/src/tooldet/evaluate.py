"""PASCAL VOC-style evaluation: matching, precision/recall, average precision."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import iou_matrix


def match_detections(det_boxes, gt_boxes, iou_thresh: float = 0.5) -> np.ndarray:
    """True-positive flags for detections already ranked by descending score.

    Each detection takes the highest-IoU ground truth not yet matched; it is a
    true positive when that IoU reaches ``iou_thresh``. A ground truth is
    matched at most once.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    flags = np.zeros(len(det_boxes), dtype=bool)
    if len(gt_boxes) == 0 or len(det_boxes) == 0:
        return flags
    ious = iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for d in range(len(det_boxes)):
        cand = np.where(taken, -1.0, ious[d])
        g = int(cand.argmax())
        if cand[g] >= iou_thresh:
            flags[d] = True
            taken[g] = True
    return flags


def pr_curve(flags, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    flags = np.asarray(flags, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision


def average_precision(flags, n_gt: int, eleven_point: bool = False) -> float:
    """Area under the interpolated precision/recall curve of ranked flags.

    Interpolated precision at recall ``r`` is the best precision at any
    recall ``>= r``. ``eleven_point`` switches to the older 11-sample mean.
    """
    if n_gt < 1:
        raise ValueError("average precision is undefined without ground truth")
    recall, precision = pr_curve(flags, n_gt)
    if eleven_point:
        ap = 0.0
        for t in np.linspace(0, 1, 11):
            above = precision[recall >= t]
            ap += (above.max() if above.size else 0.0) / 11
        return float(ap)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


@dataclass
class EvalReport:
    ap: float
    recall: np.ndarray
    precision: np.ndarray
    n_gt: int
    n_det: int
    n_tp: int
    mean_seconds: float
    frame_seconds: dict = field(default_factory=dict)
    per_frame: dict = field(default_factory=dict)  # frame id -> (n_gt, n_det, n_tp)
    missing_frames: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"ap: {self.ap:.6f}",
            f"n_gt: {self.n_gt}",
            f"n_det: {self.n_det}",
            f"n_tp: {self.n_tp}",
            f"n_frames: {len(self.per_frame)}",
            f"mean_detection_seconds: {self.mean_seconds:.6f}",
            f"missing_frames: {' '.join(self.missing_frames) if self.missing_frames else '-'}",
        ]
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(self.to_text())
        np.savetxt(out_dir / "pr_curve.txt", np.stack([self.recall, self.precision], axis=1),
                   fmt="%.6f", header="recall precision")


def evaluate(annotations: dict, detections: dict, timings: dict | None = None, iou_thresh: float = 0.5,
             eleven_point: bool = False, class_name: str = "tool") -> EvalReport:
    """Pool detections over frames, rank by score, and score them against ground truth.

    ``annotations`` maps frame id to an Annotation; ``detections`` maps frame
    id to a list of Detection. Frames with annotations but no detection entry
    are listed as missing and contribute only their ground truth.
    """
    timings = timings or {}
    missing = sorted(set(annotations) - set(detections))
    n_gt = 0
    per_frame = {}
    scores, flags = [], []
    for fid, ann in annotations.items():
        gts = ann.boxes(class_name)
        n_gt += len(gts)
        dets = sorted(detections.get(fid, []), key=lambda d: -d.score)
        f = match_detections([d.box for d in dets], gts, iou_thresh)
        per_frame[fid] = (len(gts), len(dets), int(f.sum()))
        scores.extend(d.score for d in dets)
        flags.extend(f.tolist())
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    ranked = np.asarray(flags, dtype=bool)[order]
    ap = average_precision(ranked, n_gt, eleven_point) if n_gt else 0.0
    recall, precision = pr_curve(ranked, max(n_gt, 1))
    secs = [timings[f] for f in annotations if f in timings]
    return EvalReport(
        ap=ap, recall=recall, precision=precision, n_gt=n_gt, n_det=len(ranked), n_tp=int(ranked.sum()),
        mean_seconds=float(np.mean(secs)) if secs else 0.0,
        frame_seconds={f: timings[f] for f in annotations if f in timings},
        per_frame=per_frame, missing_frames=missing,
    )
