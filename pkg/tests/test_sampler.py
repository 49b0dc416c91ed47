"""Adaptive sampling: point placement, level weighting, pyramid reads."""

import numpy as np
import pytest

from lrdet import tensor as T
from lrdet.errors import ContractError
from lrdet.sampler import AdaptiveSampler, FeaturePyramid


def make_pyramid(r, dim, image=(32, 32), strides=(4, 8), dtype=np.float64):
    w, h = image
    levels = [
        T.Tensor(r.standard_normal((h // s, w // s, dim)).astype(dtype))
        for s in strides
    ]
    return FeaturePyramid(levels=levels, strides=list(strides), image_size=image)


def test_initial_points_lie_inside_their_boxes():
    r = np.random.default_rng(0)
    s = AdaptiveSampler(16, 2, 8, 2, r, np.float64)
    content = T.Tensor(r.standard_normal((6, 16)))
    boxes = np.stack([
        r.uniform(12, 20, 6), r.uniform(12, 20, 6),
        r.uniform(4, 10, 6), r.uniform(4, 10, 6),
    ], axis=1)
    pts = s.generate_points(content, boxes).data
    for q in range(6):
        cx, cy, w, h = boxes[q]
        assert np.all(pts[q, :, :, 0] >= cx - w / 2 - 1e-9)
        assert np.all(pts[q, :, :, 0] <= cx + w / 2 + 1e-9)
        assert np.all(pts[q, :, :, 1] >= cy - h / 2 - 1e-9)
        assert np.all(pts[q, :, :, 1] <= cy + h / 2 + 1e-9)


def test_initial_points_ignore_content():
    # Offsets come from zero weights + bias, so content cannot matter yet.
    r = np.random.default_rng(1)
    s = AdaptiveSampler(16, 2, 4, 2, r, np.float64)
    boxes = np.array([[16.0, 16.0, 8.0, 6.0]])
    a = s.generate_points(T.Tensor(r.standard_normal((1, 16))), boxes).data
    b = s.generate_points(T.Tensor(r.standard_normal((1, 16))), boxes).data
    assert np.array_equal(a, b)


def test_point_formula_direct_substitution():
    r = np.random.default_rng(2)
    s = AdaptiveSampler(8, 1, 1, 1, r, np.float64)
    s.offset.bias.data[:] = np.array([0.25, -0.5])
    boxes = np.array([[10.0, 10.0, 4.0, 2.0]])
    pts = s.generate_points(T.Tensor(np.zeros((1, 8))), boxes, refine=False).data
    assert np.allclose(pts[0, 0, 0], [11.0, 9.0], atol=1e-12)


def test_refinement_adds_unscaled_pixels():
    r = np.random.default_rng(3)
    s = AdaptiveSampler(8, 1, 1, 1, r, np.float64)
    s.offset.bias.data[:] = np.array([0.25, -0.5])
    s.refine.bias.data[:] = np.array([1.5, -2.0])
    boxes = np.array([[10.0, 10.0, 4.0, 2.0]])
    on = s.generate_points(T.Tensor(np.zeros((1, 8))), boxes, refine=True).data
    off = s.generate_points(T.Tensor(np.zeros((1, 8))), boxes, refine=False).data
    assert np.allclose(on[0, 0, 0], [12.5, 7.0], atol=1e-12)
    assert np.allclose(off[0, 0, 0], [11.0, 9.0], atol=1e-12)


def test_level_weights_uniform_at_init():
    r = np.random.default_rng(4)
    s = AdaptiveSampler(16, 2, 4, 3, r, np.float64)
    boxes = np.array([[16.0, 16.0, 8.0, 8.0], [10.0, 20.0, 3.0, 12.0]])
    w = s.level_weights(boxes, (64, 64), np.float64).data
    assert w.shape == (2, 3, 8)
    assert np.allclose(w, 1.0 / 3.0, atol=1e-12)


def test_level_weights_normalized_after_training_drift():
    r = np.random.default_rng(5)
    s = AdaptiveSampler(16, 2, 4, 3, r, np.float64)
    s.level_weight.weight.data[:] = r.standard_normal(
        s.level_weight.weight.data.shape)
    s.level_weight.bias.data[:] = r.standard_normal(s.level_weight.bias.data.shape)
    boxes = np.stack([
        r.uniform(10, 50, 5), r.uniform(10, 50, 5),
        r.uniform(2, 30, 5), r.uniform(2, 30, 5),
    ], axis=1)
    w = s.level_weights(boxes, (64, 64), np.float64).data
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-6)


def test_equal_areas_get_identical_weights():
    # The only box signal into level weighting is normalized area.
    r = np.random.default_rng(6)
    s = AdaptiveSampler(16, 2, 4, 3, r, np.float64)
    s.level_weight.weight.data[:] = r.standard_normal(
        s.level_weight.weight.data.shape)
    boxes = np.array([
        [10.0, 10.0, 6.0, 8.0],
        [50.0, 30.0, 4.0, 12.0],  # different shape, same area
    ])
    w = s.level_weights(boxes, (64, 64), np.float64).data
    assert np.allclose(w[0], w[1], atol=1e-12)


def test_single_level_weight_is_one():
    r = np.random.default_rng(7)
    s = AdaptiveSampler(16, 2, 4, 1, r, np.float64)
    boxes = np.array([[16.0, 16.0, 8.0, 8.0]])
    w = s.level_weights(boxes, (64, 64), np.float64).data
    assert np.array_equal(w, np.ones((1, 1, 8)))


def test_constant_field_reconstructs_value():
    # Every level holds the constant v; weights sum to 1 over levels, so
    # the weighted multi-level read returns v at any in-bounds point.
    r = np.random.default_rng(8)
    dim, heads, pts, lv = 8, 2, 4, 2
    s = AdaptiveSampler(dim, heads, pts, lv, r, np.float64)
    v = 0.73
    w, h = 32, 32
    levels = [
        T.Tensor(np.full((h // st, w // st, dim), v)) for st in (4, 8)
    ]
    pyr = FeaturePyramid(levels=levels, strides=[4, 8], image_size=(w, h))
    content = T.Tensor(r.standard_normal((3, dim)))
    boxes = np.array([[16.0, 16.0, 8.0, 8.0]] * 3)
    out = s(content, boxes, pyr)
    total = out.values.data.reshape(3, heads, lv, pts, dim // heads).sum(axis=2)
    assert np.allclose(total, v, atol=1e-9)


def test_forward_matches_hand_computed_blend():
    # One query, one head, one point, two levels: weighted bilinear blend.
    r = np.random.default_rng(9)
    s = AdaptiveSampler(4, 1, 1, 2, r, np.float64)
    pyr = make_pyramid(r, 4, image=(32, 32), strides=(4, 8))
    content = T.Tensor(r.standard_normal((1, 4)))
    boxes = np.array([[15.0, 13.0, 6.0, 4.0]])
    out = s(content, boxes, pyr)

    pts = s.generate_points(content, boxes).data[0, 0, 0]
    wts = s.level_weights(boxes, (32, 32), np.float64).data[0, :, 0]
    blend = np.zeros(4)
    for l, stride in enumerate(pyr.strides):
        feat = pyr.levels[l].data
        x, y = pts / stride
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        val = ((1 - fx) * (1 - fy) * feat[y0, x0]
               + fx * (1 - fy) * feat[y0, x0 + 1]
               + (1 - fx) * fy * feat[y0 + 1, x0]
               + fx * fy * feat[y0 + 1, x0 + 1])
        blend += wts[l] * val
    got = out.values.data.reshape(2, 4).sum(axis=0)
    assert np.allclose(got, blend, atol=1e-9)


def test_points_record_is_level_tiled():
    r = np.random.default_rng(10)
    s = AdaptiveSampler(8, 2, 3, 2, r, np.float64)
    pyr = make_pyramid(r, 8)
    content = T.Tensor(r.standard_normal((2, 8)))
    boxes = np.array([[16.0, 16.0, 8.0, 8.0], [10.0, 12.0, 4.0, 6.0]])
    out = s(content, boxes, pyr)
    assert out.points.shape == (2, 2, 6, 2)
    # Same image point repeated for each level.
    assert np.array_equal(out.points[:, :, :3], out.points[:, :, 3:])


def test_level_count_mismatch_rejected():
    r = np.random.default_rng(11)
    s = AdaptiveSampler(8, 2, 3, 3, r, np.float64)
    pyr = make_pyramid(r, 8)  # two levels
    content = T.Tensor(r.standard_normal((2, 8)))
    boxes = np.array([[16.0, 16.0, 8.0, 8.0]] * 2)
    with pytest.raises(ContractError):
        s(content, boxes, pyr)


def test_head_reads_its_channel_block():
    # Zero one head's channel block in every level; that head's sampled
    # values must be exactly zero, the other head's untouched.
    r = np.random.default_rng(12)
    dim, heads = 8, 2
    s = AdaptiveSampler(dim, heads, 2, 2, r, np.float64)
    pyr = make_pyramid(r, dim)
    for lvl in pyr.levels:
        lvl.data[:, :, : dim // heads] = 0.0
    content = T.Tensor(r.standard_normal((1, dim)))
    boxes = np.array([[16.0, 16.0, 10.0, 10.0]])
    out = s(content, boxes, pyr)
    assert np.array_equal(out.values.data[0, 0], np.zeros_like(out.values.data[0, 0]))
    assert np.abs(out.values.data[0, 1]).max() > 0
