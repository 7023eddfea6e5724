"""SGD with momentum, the approximate joint training loop, and checkpoints."""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .anchors import POSITIVE, inside_mask, label_anchors, sample_minibatch
from .boxes import encode_targets, iou_matrix
from .loss import LossBreakdown, multitask_loss
from .model import ModelConfig, TwoStreamDetector, init_weights  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    iterations: int = 2000
    seed: int = 0
    rpn_batch: int = 256
    rpn_pos_fraction: float = 0.5
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_lambda: float = 10.0
    allowed_border: float = 0.0
    roi_batch: int = 64
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    roi_bg_iou_hi: float = 0.5
    roi_bg_iou_lo: float = 0.0
    det_lambda: float = 1.0
    add_gt_rois: bool = True
    hflip: bool = True
    checkpoint_every: int = 0


@dataclass
class OptimState:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    iteration: int = 0
    velocity: dict = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, state: OptimState) -> None:
    """In-place update: ``g' = g + wd * w; v = mu * v + g'; w -= lr * v``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise T.NonFiniteError(f"non-finite gradient for {name} at iteration {state.iteration}")
    for name, g in grads.items():
        w = params[name].data
        g = g + state.weight_decay * w
        v = state.velocity.get(name)
        v = g if v is None else state.momentum * v + g
        state.velocity[name] = v
        w -= (state.lr * v).astype(w.dtype)
    state.iteration += 1


@dataclass
class StepResult:
    rpn: LossBreakdown
    det: LossBreakdown
    total: T.Tensor
    rpn_deltas: T.Tensor
    rois: np.ndarray
    fixed: dict = field(default_factory=dict)


def sample_rois(rois: np.ndarray, gt: np.ndarray, cfg: TrainConfig, rng: np.random.Generator, stds):
    """Pick foreground/background regions and their class labels and targets."""
    if len(gt):
        ious = iou_matrix(rois, gt)
        best = ious.argmax(axis=1)
        max_iou = ious.max(axis=1)
    else:
        best = np.zeros(len(rois), dtype=np.int64)
        max_iou = np.zeros(len(rois))
    fg = np.flatnonzero(max_iou >= cfg.roi_fg_iou)
    bg = np.flatnonzero((max_iou < cfg.roi_bg_iou_hi) & (max_iou >= cfg.roi_bg_iou_lo))
    n_fg = min(len(fg), int(round(cfg.roi_batch * cfg.roi_fg_fraction)))
    if len(fg) > n_fg:
        fg = rng.choice(fg, size=n_fg, replace=False)
    n_bg = min(len(bg), cfg.roi_batch - n_fg)
    if len(bg) > n_bg:
        bg = rng.choice(bg, size=n_bg, replace=False)
    keep = np.concatenate([fg, bg]).astype(np.int64)
    labels = np.zeros(len(keep), dtype=np.int64)
    labels[:len(fg)] = 1
    targets = np.zeros((len(keep), 4))
    if len(fg):
        targets[:len(fg)] = encode_targets(rois[fg], gt[best[fg]]) / np.asarray(stds)
    return rois[keep], labels, targets


def flip_sample(image, flow_image, boxes):
    """Mirror a frame, its flow rendering and boxes left-right.

    The flow rendering's hue encodes direction, so mirroring the image also
    mirrors the hue about the vertical axis; the rendered RGB is re-derived
    by reflecting the colour wheel (hue -> 0.5 - hue).
    """
    from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

    w = image.shape[1]
    image = image[:, ::-1].copy()
    if flow_image is not None:
        hsv = rgb_to_hsv(flow_image[:, ::-1].astype(np.float64) / 255.0)
        hsv[..., 0] = (0.5 - hsv[..., 0]) % 1.0
        flow_image = np.round(hsv_to_rgb(hsv) * 255).astype(np.uint8)
    boxes = boxes.copy()
    if len(boxes):
        boxes[:, [0, 2]] = w - boxes[:, [2, 0]]
    return image, flow_image, boxes


def compute_losses(model: TwoStreamDetector, image, flow_image, gt: np.ndarray, cfg: TrainConfig,
                   rng: np.random.Generator, fixed=None) -> StepResult | None:
    """Forward pass and both stage losses for one frame.

    Proposal coordinates leave the graph as plain arrays, so the detector loss
    has no path back into the proposal deltas. ``fixed`` (a previous
    ``StepResult.fixed``) freezes the anchor batch and rois,
    which gradient checks rely on.
    """
    mcfg = model.config
    h, w = image.shape[:2]
    rgb = model.backbone(model.prepare(image), "rgb")
    rpn_out = model.rpn(rgb)
    fh, fw = rgb.shape[2], rgb.shape[3]
    anchors = model.anchors(fw, fh)

    if fixed is None:
        valid = inside_mask(anchors, w, h, cfg.allowed_border)
        labels = label_anchors(anchors, gt, cfg.rpn_pos_iou, cfg.rpn_neg_iou, valid)
        batch = sample_minibatch(labels.labels, cfg.rpn_batch, cfg.rpn_pos_fraction, rng)
        if batch.skip:
            return None
        idx = batch.indices
        anchor_cls = (labels.labels[idx] == POSITIVE).astype(np.int64)
        anchor_targets = labels.targets[idx]
    else:
        idx, anchor_cls, anchor_targets = fixed["anchors"]

    logits = T.take_rows(rpn_out.flat_logits(), idx)
    deltas = T.take_rows(rpn_out.flat_deltas(), idx)
    rpn_loss = multitask_loss(logits, deltas, anchor_cls, anchor_targets, n_cls=len(idx), n_reg=fh * fw,
                              lam=cfg.rpn_lambda)

    if fixed is None:
        props = model.propose(rpn_out, anchors, (w, h), training=True)
        rois = props.boxes
        if cfg.add_gt_rois and len(gt):
            rois = np.concatenate([rois, gt], axis=0)
        rois, roi_cls, roi_targets = sample_rois(rois, gt, cfg, rng, mcfg.target_stds)
    else:
        rois, roi_cls, roi_targets = fixed["rois"]

    flow = model.backbone(model.prepare(flow_image), "flow") if mcfg.two_stream else None
    det_out = model.detector(rgb, flow, rois)
    det_loss = multitask_loss(det_out.class_logits, det_out.box_deltas, roi_cls, roi_targets,
                              n_cls=len(rois), n_reg=len(rois), lam=cfg.det_lambda)
    total = T.add(rpn_loss.total, det_loss.total)
    fixed = {"anchors": (idx, anchor_cls, anchor_targets), "rois": (rois, roi_cls, roi_targets)}
    return StepResult(rpn_loss, det_loss, total, rpn_out.deltas, rois, fixed)


@dataclass
class LogEntry:
    iteration: int
    total: float
    rpn_cls: float
    rpn_reg: float
    det_cls: float
    det_reg: float
    ms: float

    def to_line(self) -> str:
        return (f"{self.iteration} {self.total:.6f} {self.rpn_cls:.6f} {self.rpn_reg:.6f} "
                f"{self.det_cls:.6f} {self.det_reg:.6f} {self.ms:.1f}")


def train(model: TwoStreamDetector, samples: list, cfg: TrainConfig, log_path: Path | None = None,
          checkpoint_path: Path | None = None, extra_config: dict | None = None) -> list[LogEntry]:
    """Approximate joint training, one frame per iteration.

    Frames are visited in a fresh seeded permutation each epoch. Frames whose
    anchor batch would be empty are skipped; a NaN loss aborts.
    """
    if not samples:
        raise ValueError("no training samples")
    rng = np.random.default_rng(cfg.seed)
    state = OptimState(cfg.lr, cfg.momentum, cfg.weight_decay)
    params = model.params
    history: list[LogEntry] = []
    order: list[int] = []
    log_file = open(log_path, "w") if log_path else None
    try:
        while state.iteration < cfg.iterations:
            if not order:
                order = rng.permutation(len(samples)).tolist()
            s = samples[order.pop()]
            image, flow_image = s.image, s.flow_image
            gt = s.annotation.boxes("tool")
            if cfg.hflip and rng.random() < 0.5:
                image, flow_image, gt = flip_sample(image, flow_image, gt)
            start = time.perf_counter()
            model.zero_grad()
            step = compute_losses(model, image, flow_image, gt, cfg, rng)
            if step is None:
                log.info("skipping frame %s: empty anchor batch", s.frame_id)
                continue
            total = float(step.total.data)
            if not np.isfinite(total):
                raise T.NonFiniteError(f"loss is {total} at iteration {state.iteration}")
            T.backward(step.total)
            grads = {n: p.grad for n, p in params.items() if p.grad is not None}
            sgd_step(params, grads, state)
            rpn_v, det_v = step.rpn.values(), step.det.values()
            entry = LogEntry(state.iteration, total, rpn_v["cls"], rpn_v["reg"], det_v["cls"], det_v["reg"],
                             1000 * (time.perf_counter() - start))
            history.append(entry)
            if log_file:
                log_file.write(entry.to_line() + "\n")
            if checkpoint_path and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                save_checkpoint(Checkpoint.from_model(model, state.iteration, cfg.seed, extra_config), checkpoint_path)
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path:
        save_checkpoint(Checkpoint.from_model(model, state.iteration, cfg.seed, extra_config), checkpoint_path)
    return history


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"TSDETCKP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")  # magic, version, json length


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    tensors: dict  # name -> np.ndarray
    config: dict
    seed: int = 0
    iteration: int = 0

    @classmethod
    def from_model(cls, model: TwoStreamDetector, iteration: int = 0, seed: int = 0, extra: dict | None = None):
        cfg = {"model": asdict(model.config)}
        if extra:
            cfg.update(extra)
        return cls({n: p.data.copy() for n, p in model.params.items()}, cfg, seed, iteration)

    def to_model(self) -> TwoStreamDetector:
        mcfg = self.config["model"]
        mcfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in mcfg.items()})
        model = TwoStreamDetector(mcfg, seed=0)
        expected = set(model.params)
        unknown = sorted(set(self.tensors) - expected)
        missing = sorted(expected - set(self.tensors))
        if unknown:
            raise CheckpointError(f"unknown tensor names in checkpoint: {unknown}")
        if missing:
            raise CheckpointError(f"checkpoint lacks tensors: {missing}")
        for name, arr in self.tensors.items():
            p = model.params[name]
            if p.shape != arr.shape:
                raise CheckpointError(f"tensor {name} has shape {arr.shape}, model expects {p.shape}")
            p.data = np.array(arr, dtype=arr.dtype)
        return model


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    """Write magic, version, a JSON index, then raw little-endian tensor bytes."""
    index = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": ckpt.config, "seed": ckpt.seed, "iteration": ckpt.iteration,
                         "tensors": index, "payload_bytes": offset}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)


def load_checkpoint(path: Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, hlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    body = _HEADER.size + hlen
    if len(data) < body:
        raise CheckpointError(f"{path}: truncated index")
    try:
        header = json.loads(data[_HEADER.size:body])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt index: {exc}") from exc
    if len(data) != body + header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(data) - body} bytes, index says {header['payload_bytes']}")
    tensors = {}
    for entry in header["tensors"]:
        start = body + entry["offset"]
        raw = data[start:start + entry["nbytes"]]
        tensors[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return Checkpoint(tensors, header["config"], header["seed"], header["iteration"])
