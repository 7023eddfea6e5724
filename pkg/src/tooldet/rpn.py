"""Region proposal head and test-time proposal generation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import clip_boxes, decode_transform, nms
from .tensor import Tensor


@dataclass
class RpnOutput:
    objectness: Tensor  # [N, 2k, H, W], channel 2a + c for anchor a, class c
    deltas: Tensor  # [N, 4k, H, W], channel 4a + j

    @property
    def num_anchors(self) -> int:
        return self.objectness.shape[1] // 2

    def flat_logits(self) -> Tensor:
        """[H*W*k, 2] logits in anchor order (row, col, anchor)."""
        x = T.transpose(self.objectness, (0, 2, 3, 1))
        return T.reshape(x, (-1, 2))

    def flat_deltas(self) -> Tensor:
        x = T.transpose(self.deltas, (0, 2, 3, 1))
        return T.reshape(x, (-1, 4))

    def object_prob(self) -> np.ndarray:
        """Softmax probability of the object class per anchor (no graph)."""
        z = self.objectness.data.transpose(0, 2, 3, 1).reshape(-1, 2).astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e[:, 1] / e.sum(axis=1)


def rpn_forward(params: dict, features: Tensor, k: int) -> RpnOutput:
    """3x3 conv + ReLU to the intermediate feature, then sibling 1x1 convs."""
    if params["rpn.cls.w"].shape[0] != 2 * k or params["rpn.bbox.w"].shape[0] != 4 * k:
        raise T.InvalidShapeError(
            f"RPN heads emit {params['rpn.cls.w'].shape[0]}/{params['rpn.bbox.w'].shape[0]} channels, "
            f"expected {2 * k}/{4 * k} for k={k}"
        )
    h = T.relu(T.conv2d(features, params["rpn.conv.w"], params["rpn.conv.b"], stride=1, pad=1))
    cls = T.conv2d(h, params["rpn.cls.w"], params["rpn.cls.b"])
    box = T.conv2d(h, params["rpn.bbox.w"], params["rpn.bbox.b"])
    return RpnOutput(cls, box)


@dataclass
class Proposals:
    boxes: np.ndarray  # [R, 4]
    scores: np.ndarray  # [R]

    def __len__(self) -> int:
        return len(self.boxes)


def propose(
    scores: np.ndarray,
    deltas: np.ndarray,
    anchors: np.ndarray,
    image_size: tuple[int, int],
    pre_nms_top_n: int = 6000,
    nms_thresh: float = 0.7,
    post_nms_top_n: int = 300,
) -> Proposals:
    """Decode, clip, rank, suppress and truncate anchor predictions.

    ``image_size`` is ``(width, height)``. Scores only matter through their
    ranking.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    boxes = decode_transform(anchors, deltas)
    boxes, valid = clip_boxes(boxes, *image_size)
    keep = np.flatnonzero(valid)
    order = keep[np.argsort(-scores[keep], kind="stable")][:pre_nms_top_n]
    boxes, scores = boxes[order], scores[order]
    if len(boxes) == 0:
        return Proposals(np.zeros((0, 4)), np.zeros(0))
    kept = nms(boxes, scores, nms_thresh, max_keep=post_nms_top_n)
    return Proposals(boxes[kept], scores[kept])
