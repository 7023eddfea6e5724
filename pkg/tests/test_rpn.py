import numpy as np
import pytest

from tooldet import tensor as T
from tooldet.anchors import generate_anchors
from tooldet.boxes import clip_boxes, decode_transform
from tooldet.model import ModelConfig, parameter_shapes
from tooldet.rpn import RpnOutput, propose, rpn_forward
from oracles import nms_brute


def rpn_params(rng, c=4, width=6, k=9, scale=0.3):
    shapes = {
        "rpn.conv.w": (width, c, 3, 3), "rpn.conv.b": (width,),
        "rpn.cls.w": (2 * k, width, 1, 1), "rpn.cls.b": (2 * k,),
        "rpn.bbox.w": (4 * k, width, 1, 1), "rpn.bbox.b": (4 * k,),
    }
    return {n: T.tensor(rng.normal(scale=scale, size=s), requires_grad=True) for n, s in shapes.items()}


def test_spatial_dims_preserved(rng):
    out = rpn_forward(rpn_params(rng), T.tensor(rng.normal(size=(1, 4, 5, 7))), 9)
    assert out.objectness.shape == (1, 18, 5, 7)
    assert out.deltas.shape == (1, 36, 5, 7)
    assert out.flat_logits().shape == (5 * 7 * 9, 2)
    assert out.flat_deltas().shape == (5 * 7 * 9, 4)


def test_zero_weights_give_half(rng):
    params = {n: T.tensor(np.zeros(p.shape)) for n, p in rpn_params(rng).items()}
    out = rpn_forward(params, T.tensor(rng.normal(size=(1, 4, 3, 3))), 9)
    np.testing.assert_array_equal(out.object_prob(), 0.5)


def test_probabilities_valid(rng):
    out = rpn_forward(rpn_params(rng, scale=2.0), T.tensor(rng.normal(size=(1, 4, 3, 3))), 9)
    p = out.object_prob()
    assert ((p >= 0) & (p <= 1)).all()


def test_channel_mismatch(rng):
    with pytest.raises(T.InvalidShapeError):
        rpn_forward(rpn_params(rng, k=9), T.tensor(np.zeros((1, 4, 3, 3))), 3)


def test_flat_layout_matches_anchor_order(rng):
    out = rpn_forward(rpn_params(rng), T.tensor(rng.normal(size=(1, 4, 2, 3))), 9)
    i, j, a = 1, 2, 4
    row = (i * 3 + j) * 9 + a
    np.testing.assert_array_equal(out.flat_logits().data[row], out.objectness.data[0, 2 * a:2 * a + 2, i, j])
    np.testing.assert_array_equal(out.flat_deltas().data[row], out.deltas.data[0, 4 * a:4 * a + 4, i, j])


def test_gradient_check(f64, rng):
    params = rpn_params(rng, c=3, width=4, k=2)
    x = T.tensor(rng.normal(size=(1, 3, 3, 4)), requires_grad=True)
    wc = rng.normal(size=(1, 4, 3, 4))
    wb = rng.normal(size=(1, 8, 3, 4))
    names = list(params)

    def fn(x, *ps):
        out = rpn_forward(dict(zip(names, ps)), x, 2)
        return T.add(T.sum_all(T.mul(out.objectness, wc)), T.sum_all(T.mul(out.deltas, wb)))

    assert T.grad_check(fn, [x, *params.values()]) <= 1e-4


def test_default_heads_are_256_wide():
    shapes = parameter_shapes(ModelConfig())
    assert shapes["rpn.conv.w"][0] == 256


# propose

def propose_oracle(scores, deltas, anchors, size, pre, thresh, post):
    boxes, valid = clip_boxes(decode_transform(anchors, deltas), *size)
    idx = [i for i in sorted(range(len(scores)), key=lambda i: (-scores[i], i)) if valid[i]][:pre]
    kept = nms_brute(boxes[idx].tolist(), [scores[i] for i in idx], thresh)[:post]
    return boxes[idx][kept], np.asarray(scores)[idx][kept]


def test_zero_deltas_give_clipped_anchors(rng):
    anchors = generate_anchors(4, 4, 16, scales=(16,), ratios=(1.0,))
    scores = rng.random(len(anchors))
    props = propose(scores, np.zeros((len(anchors), 4)), anchors, (64, 64), nms_thresh=0.7, post_nms_top_n=300)
    order = np.argsort(-scores)
    np.testing.assert_allclose(props.boxes, anchors[order])
    np.testing.assert_allclose(props.scores, scores[order])


def test_under_supply_returns_all(rng):
    anchors = np.array([[0, 0, 10, 10], [20, 0, 30, 10], [40, 0, 50, 10], [0, 20, 10, 30], [20, 20, 30, 30]], float)
    props = propose(rng.random(5), np.zeros((5, 4)), anchors, (100, 100), post_nms_top_n=300)
    assert len(props) == 5


def test_matches_pipeline_oracle(rng):
    anchors = generate_anchors(8, 8, 16)
    for _ in range(10):
        scores = rng.random(len(anchors))
        deltas = rng.normal(scale=0.3, size=(len(anchors), 4))
        props = propose(scores, deltas, anchors, (128, 120), pre_nms_top_n=200, nms_thresh=0.7, post_nms_top_n=30)
        boxes, sc = propose_oracle(scores, deltas, anchors, (128, 120), 200, 0.7, 30)
        np.testing.assert_array_equal(props.boxes, boxes)
        np.testing.assert_array_equal(props.scores, sc)


def test_properties(rng):
    anchors = generate_anchors(8, 8, 16)
    scores = rng.random(len(anchors))
    deltas = rng.normal(scale=0.5, size=(len(anchors), 4))
    props = propose(scores, deltas, anchors, (128, 128), post_nms_top_n=50)
    assert len(props) <= 50
    assert (np.diff(props.scores) <= 0).all()
    assert (props.boxes >= 0).all() and (props.boxes <= 128).all()
    monotone = propose(scores**3 + 5, deltas, anchors, (128, 128), post_nms_top_n=50)
    np.testing.assert_array_equal(monotone.boxes, props.boxes)


def test_rpn_output_num_anchors(rng):
    out = RpnOutput(T.tensor(np.zeros((1, 6, 2, 2))), T.tensor(np.zeros((1, 12, 2, 2))))
    assert out.num_anchors == 3
