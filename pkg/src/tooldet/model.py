"""Parameter container for the two-stream proposal + detection network."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .anchors import DESK_SCALES, RATIOS, generate_anchors
from .detector import DetectionOutput, detector_forward
from .rpn import Proposals, RpnOutput, propose, rpn_forward
from .tensor import Tensor

# conv1..conv5 widths of the full-size layout the desk-scale backbone shrinks
ZF_CHANNELS = (96, 256, 384, 384, 256)
BACKBONE_STRIDE = 16
# layers that would carry pretrained weights in a full-size setup; the rest
# are new layers drawn from N(0, 0.01^2)
PRETRAINED_LAYERS = ("conv1", "conv2", "conv3", "conv4", "conv5", "fc6", "fc7")


@dataclass
class ModelConfig:
    backbone_channels: tuple = (16, 32, 48, 64, 64)
    scales: tuple = DESK_SCALES
    ratios: tuple = RATIOS
    stride: int = BACKBONE_STRIDE
    rpn_width: int = 256
    roi_size: int = 6
    fc_width: int = 256
    fusion_width: int = 256
    num_classes: int = 2  # background + tool
    two_stream: bool = True
    backbone_init: str = "he"
    target_stds: tuple = (0.1, 0.1, 0.2, 0.2)
    pre_nms_top_n_train: int = 6000
    post_nms_top_n_train: int = 2000
    pre_nms_top_n_test: int = 6000
    post_nms_top_n_test: int = 300
    proposal_nms_thresh: float = 0.7

    @property
    def k(self) -> int:
        return len(self.scales) * len(self.ratios)


def init_weights(shape, kind: str = "gaussian-0.01", rng=None) -> np.ndarray:
    """Draw initial weights.

    ``gaussian-0.01`` is N(0, 0.01^2). ``he`` scales a zero-mean Gaussian by
    sqrt(2 / fan_in), the stand-in for pretrained backbone weights.
    ``zeros`` is used for biases.
    """
    rng = np.random.default_rng(rng)
    shape = tuple(shape)
    if kind == "gaussian-0.01":
        return rng.normal(0.0, 0.01, size=shape)
    if kind == "he":
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    if kind in ("zeros", "pretrained-absent"):
        return np.zeros(shape)
    raise ValueError(f"unknown init kind {kind!r}")


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    streams = ("rgb", "flow") if cfg.two_stream else ("rgb",)
    for s in streams:
        c_in = 3
        for i, c_out in enumerate(cfg.backbone_channels, start=1):
            shapes[f"{s}.conv{i}.w"] = (c_out, c_in, 3, 3)
            shapes[f"{s}.conv{i}.b"] = (c_out,)
            c_in = c_out
    c5 = cfg.backbone_channels[-1]
    k = cfg.k
    shapes["rpn.conv.w"] = (cfg.rpn_width, c5, 3, 3)
    shapes["rpn.conv.b"] = (cfg.rpn_width,)
    shapes["rpn.cls.w"] = (2 * k, cfg.rpn_width, 1, 1)
    shapes["rpn.cls.b"] = (2 * k,)
    shapes["rpn.bbox.w"] = (4 * k, cfg.rpn_width, 1, 1)
    shapes["rpn.bbox.b"] = (4 * k,)
    pooled = c5 * cfg.roi_size * cfg.roi_size
    for s in streams:
        shapes[f"det.{s}.fc6.w"] = (pooled, cfg.fc_width)
        shapes[f"det.{s}.fc6.b"] = (cfg.fc_width,)
        shapes[f"det.{s}.fc7.w"] = (cfg.fc_width, cfg.fc_width)
        shapes[f"det.{s}.fc7.b"] = (cfg.fc_width,)
    shapes["det.fusion.w"] = (cfg.fc_width * len(streams), cfg.fusion_width)
    shapes["det.fusion.b"] = (cfg.fusion_width,)
    shapes["det.cls.w"] = (cfg.fusion_width, cfg.num_classes)
    shapes["det.cls.b"] = (cfg.num_classes,)
    shapes["det.bbox.w"] = (cfg.fusion_width, 4 * cfg.num_classes)
    shapes["det.bbox.b"] = (4 * cfg.num_classes,)
    return shapes


class TwoStreamDetector:
    """Shared RGB backbone feeding the RPN, a separate flow backbone, fused head."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, params: dict | None = None):
        self.config = config or ModelConfig()
        if self.config.stride != BACKBONE_STRIDE:
            raise ValueError(f"backbone stride is fixed at {BACKBONE_STRIDE}, config says {self.config.stride}")
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for name, shape in parameter_shapes(self.config).items():
                if name.endswith(".b"):
                    kind = "zeros"
                elif name.split(".")[-2] in PRETRAINED_LAYERS and not name.startswith("rpn"):
                    kind = self.config.backbone_init
                else:
                    kind = "gaussian-0.01"
                params[name] = T.tensor(init_weights(shape, kind, rng), requires_grad=True, name=name)
        self.params: dict[str, Tensor] = params
        self._anchor_cache: dict = {}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @staticmethod
    def prepare(image: np.ndarray) -> Tensor:
        """HxWx3 uint8 image to a centred [1, 3, H, W] tensor."""
        x = np.asarray(image, dtype=np.float64) / 255.0 - 0.5
        return T.tensor(x.transpose(2, 0, 1)[None])

    def backbone(self, x: Tensor, stream: str) -> Tensor:
        p = self.params
        h = T.relu(T.conv2d(x, p[f"{stream}.conv1.w"], p[f"{stream}.conv1.b"], stride=2, pad=1))
        h = T.max_pool(h, 2, 2)
        h = T.relu(T.conv2d(h, p[f"{stream}.conv2.w"], p[f"{stream}.conv2.b"], pad=1))
        h = T.max_pool(h, 2, 2)
        h = T.relu(T.conv2d(h, p[f"{stream}.conv3.w"], p[f"{stream}.conv3.b"], pad=1))
        h = T.max_pool(h, 2, 2)
        h = T.relu(T.conv2d(h, p[f"{stream}.conv4.w"], p[f"{stream}.conv4.b"], pad=1))
        return T.relu(T.conv2d(h, p[f"{stream}.conv5.w"], p[f"{stream}.conv5.b"], pad=1))

    def rpn(self, features: Tensor) -> RpnOutput:
        return rpn_forward(self.params, features, self.config.k)

    def detector(self, rgb_features: Tensor, flow_features: Tensor | None, rois) -> DetectionOutput:
        return detector_forward(self.params, rgb_features, flow_features, rois, self.config.roi_size, self.config.stride)

    def anchors(self, feat_w: int, feat_h: int) -> np.ndarray:
        key = (feat_w, feat_h)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_anchors(feat_w, feat_h, self.config.stride, self.config.scales, self.config.ratios)
        return self._anchor_cache[key]

    def propose(self, rpn_out: RpnOutput, anchors: np.ndarray, image_size, training: bool) -> Proposals:
        cfg = self.config
        pre = cfg.pre_nms_top_n_train if training else cfg.pre_nms_top_n_test
        post = cfg.post_nms_top_n_train if training else cfg.post_nms_top_n_test
        deltas = rpn_out.deltas.data.transpose(0, 2, 3, 1).reshape(-1, 4)
        return propose(rpn_out.object_prob(), deltas, anchors, image_size, pre, cfg.proposal_nms_thresh, post)
