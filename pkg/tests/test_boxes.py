import math

import numpy as np
import pytest

from tooldet.boxes import (
    DELTA_CLAMP,
    clip_boxes,
    decode_transform,
    encode_targets,
    fit_bbox_regressor_ridge,
    iou,
    iou_matrix,
    nms,
)
from oracles import nms_brute, raster_iou


def random_boxes(rng, n, lo=0.0, hi=200.0, min_size=2.0, max_size=80.0):
    xy = rng.uniform(lo, hi, size=(n, 2))
    wh = rng.uniform(min_size, max_size, size=(n, 2))
    return np.hstack([xy, xy + wh])


# iou

def test_iou_identical_and_disjoint():
    assert iou([0, 0, 10, 10], [0, 0, 10, 10]) == 1.0
    assert iou([0, 0, 10, 10], [20, 20, 30, 30]) == 0.0
    assert iou([0, 0, 10, 10], [10, 0, 20, 10]) == 0.0


def test_iou_half_overlap():
    assert iou([0, 0, 10, 10], [5, 0, 15, 10]) == pytest.approx(1 / 3)
    assert raster_iou([0, 0, 10, 10], [5, 0, 15, 10], res=0.5) == pytest.approx(1 / 3)


def test_iou_matches_raster(rng):
    for _ in range(20):
        a, b = np.round(random_boxes(rng, 2, hi=40, max_size=30))
        assert iou(a, b) == pytest.approx(raster_iou(a, b), abs=1e-12)


def test_iou_symmetric_and_bounded(rng):
    a, b = random_boxes(rng, 50), random_boxes(rng, 60)
    m = iou_matrix(a, b)
    np.testing.assert_allclose(m, iou_matrix(b, a).T)
    assert m.min() >= 0 and m.max() <= 1


def test_iou_degenerate_raises():
    with pytest.raises(ValueError, match="degenerate"):
        iou([0, 0, 0, 10], [0, 0, 5, 5])


# transforms

def test_encode_hand_case():
    t = encode_targets([[5, 5, 15, 15]], [[5, 5, 25, 15]])[0]
    assert t.tolist() == [0.5, 0.0, math.log(2), 0.0]


def test_decode_hand_case():
    out = decode_transform([[5, 5, 15, 15]], [[0, 0, math.log(2), 0]])[0]
    np.testing.assert_allclose(out, [0, 5, 20, 15])


def test_encode_identity_is_zero(rng):
    b = random_boxes(rng, 10)
    assert not encode_targets(b, b).any()


def test_round_trip(rng):
    a, g = random_boxes(rng, 1000), random_boxes(rng, 1000)
    np.testing.assert_allclose(decode_transform(a, encode_targets(a, g)), g, atol=1e-9, rtol=0)


def test_decode_clamps_log_size():
    out = decode_transform([[0, 0, 16, 16]], [[0, 0, 50.0, 50.0]])[0]
    assert out[2] - out[0] == pytest.approx(1000.0)
    assert DELTA_CLAMP == pytest.approx(math.log(1000 / 16))


# clipping

def test_clip_inside_unchanged():
    b, valid = clip_boxes([[10, 10, 20, 20]], 100, 50)
    np.testing.assert_array_equal(b, [[10, 10, 20, 20]])
    assert valid.all()


def test_clip_partially_outside():
    b, valid = clip_boxes([[-5, -5, 120, 60]], 100, 50)
    np.testing.assert_array_equal(b, [[0, 0, 100, 50]])
    assert valid.all()


def test_clip_fully_outside_is_invalid():
    _, valid = clip_boxes([[110, 0, 130, 10], [-20, -20, -1, -1]], 100, 50)
    assert not valid.any()


def test_clip_idempotent(rng):
    b, _ = clip_boxes(random_boxes(rng, 100, lo=-50, hi=250), 200, 150)
    b2, _ = clip_boxes(b, 200, 150)
    np.testing.assert_array_equal(b, b2)


# nms

def test_nms_single_and_disjoint():
    assert nms([[0, 0, 1, 1]], [0.3], 0.5).tolist() == [0]
    boxes = [[0, 0, 10, 10], [20, 20, 30, 30], [40, 0, 50, 10]]
    assert sorted(nms(boxes, [0.1, 0.9, 0.5], 0.5).tolist()) == [0, 1, 2]


def test_nms_suppresses_duplicates():
    boxes = [[0, 0, 10, 10], [0, 0, 10, 10], [1, 0, 11, 10]]
    assert nms(boxes, [0.5, 0.9, 0.7], 0.5).tolist() == [1]


def test_nms_tie_break_by_index():
    assert nms([[0, 0, 10, 10], [0, 0, 10, 10]], [0.5, 0.5], 0.5).tolist() == [0]


def test_nms_threshold_validation():
    with pytest.raises(ValueError):
        nms([[0, 0, 1, 1]], [1.0], 1.0)


def test_nms_kept_pairs_below_threshold(rng):
    boxes = random_boxes(rng, 200, hi=100)
    scores = rng.random(200)
    kept = nms(boxes, scores, 0.4)
    m = iou_matrix(boxes[kept], boxes[kept])
    np.fill_diagonal(m, 0)
    assert m.max() <= 0.4


def test_nms_matches_brute_force(rng):
    for _ in range(20):
        boxes = random_boxes(rng, 200, hi=100)
        scores = np.round(rng.random(200), 2)  # force some ties
        assert nms(boxes, scores, 0.5).tolist() == nms_brute(boxes.tolist(), scores.tolist(), 0.5)


def test_nms_max_keep_is_prefix(rng):
    boxes, scores = random_boxes(rng, 100), rng.random(100)
    full = nms(boxes, scores, 0.7)
    assert nms(boxes, scores, 0.7, max_keep=5).tolist() == full[:5].tolist()


# ridge

def test_ridge_small_lambda_recovers_exact_solution(rng):
    f = rng.normal(size=(50, 6))
    w_true = rng.normal(size=(6, 4))
    w = fit_bbox_regressor_ridge(f, f @ w_true, 1e-10)
    np.testing.assert_allclose(w, w_true, atol=1e-6)


def test_ridge_large_lambda_shrinks(rng):
    f, t = rng.normal(size=(30, 5)), rng.normal(size=(30, 4))
    assert np.abs(fit_bbox_regressor_ridge(f, t, 1e8)).max() < 1e-5


def test_ridge_normal_equation_residual(rng):
    f, t = rng.normal(size=(40, 8)), rng.normal(size=(40, 4))
    w = fit_bbox_regressor_ridge(f, t, 0.3)
    residual = (f.T @ f + 0.3 * np.eye(8)) @ w - f.T @ t
    assert np.abs(residual).max() <= 1e-8


def test_ridge_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_bbox_regressor_ridge(np.zeros((3, 2)), np.zeros((4, 4)), 1.0)
    with pytest.raises(ValueError):
        fit_bbox_regressor_ridge(np.zeros((3, 2)), np.zeros((3, 4)), 0.0)
