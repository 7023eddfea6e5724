"""
Boxes, anchors and non-maximum suppression
==========================================
"""

import math

import numpy as np

from tooldet.anchors import NEGATIVE, NEUTRAL, POSITIVE, generate_anchors, inside_mask, label_anchors, sample_minibatch
from tooldet.boxes import decode_transform, encode_targets, iou_matrix, nms

# %%
# Regression targets are offsets of the box centre in units of the anchor
# size plus log size ratios. Doubling the width of a box anchored at its left
# edge moves the centre half an anchor to the right:

anchor = np.array([[5.0, 5, 15, 15]])
gt = np.array([[5.0, 5, 25, 15]])
t = encode_targets(anchor, gt)
print("targets", t, "expected", [0.5, 0, math.log(2), 0])
print("decoded back", decode_transform(anchor, t))

# %%
# Anchors: k = 3 scales x 3 ratios at every cell of the stride-16 feature
# map. A 256x256 frame gives a 16x16 map and 16*16*9 anchors.

anchors = generate_anchors(16, 16, 16)
print(anchors.shape, "first cell:\n", anchors[:9].round(1))

# %%
# Label them against two tools. Anchors crossing the image border are left
# neutral during training.

tools = np.array([[40.0, 60, 120, 110], [150, 140, 230, 250]])
valid = inside_mask(anchors, 256, 256)
labels = label_anchors(anchors, tools, valid=valid)
for name, code in [("positive", POSITIVE), ("negative", NEGATIVE), ("neutral", NEUTRAL)]:
    print(f"{name:9s} {np.sum(labels.labels == code)}")

batch = sample_minibatch(labels.labels, 256, 0.5, rng=0)
print("minibatch:", batch.positives.size, "positives,", batch.negatives.size, "negatives")

# %%
# Greedy NMS keeps the highest-scoring box and drops everything that
# overlaps it by more than the threshold.

rng = np.random.default_rng(1)
jitter = rng.normal(scale=4, size=(12, 4))
boxes = np.vstack([tools[0] + jitter[:6], tools[1] + jitter[6:]])
scores = rng.random(12)
keep = nms(boxes, scores, 0.3)
print("kept", keep, "with scores", scores[keep].round(3))
print("IoU of survivors with the tools:\n", iou_matrix(boxes[keep], tools).round(2))
