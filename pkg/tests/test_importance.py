import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmsplat.core import RasterGrid
from mmsplat.importance import (
    PriorInputs,
    ablated_weights,
    boundary_mask,
    compute_scores,
    fuse,
    geometry_score,
    geometry_score_raw,
    percentile_threshold,
    reliability_mask,
    render_residual,
    semantic_score,
    semantic_score_raw,
)


def _labels(a):
    return PriorInputs(depth=None, labels=RasterGrid(np.asarray(a, dtype=float)))


def test_residual_zero_and_345():
    a = np.zeros((4, 4, 3))
    assert np.all(render_residual(a, a).data == 0)
    b = a.copy()
    b[1, 2] = [0.3, 0.4, 0.0]
    r = render_residual(b, a).plane
    assert r[1, 2] == pytest.approx(0.5, abs=1e-15)
    assert np.count_nonzero(r) == 1


def test_residual_matches_channel_loop_and_is_symmetric():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(6, 5, 3)), rng.uniform(size=(6, 5, 3))
    r = render_residual(a, b).plane
    for i in range(6):
        for j in range(5):
            ref = sum((a[i, j, c] - b[i, j, c]) ** 2 for c in range(3)) ** 0.5
            assert r[i, j] == pytest.approx(ref, abs=1e-14)
    assert np.array_equal(r, render_residual(b, a).plane)


def test_semantic_uniform_foreground_is_constant():
    s = semantic_score(_labels(np.ones((10, 10)))).plane
    assert not boundary_mask(np.ones((10, 10))).any()
    assert np.all(s == s[0, 0])


def test_semantic_all_background_is_zero():
    assert np.all(semantic_score(_labels(np.zeros((10, 10)))).plane == 0)


def test_semantic_half_plane_band():
    lab = np.zeros((12, 16))
    lab[:, 8:] = 1
    band = boundary_mask(lab, 2)
    # oracle: columns within Chebyshev distance 2 of the other class
    expected = np.zeros_like(band)
    expected[:, 6:10] = True
    assert np.array_equal(band, expected)
    s = semantic_score(_labels(lab)).plane
    top = s == s.max()
    assert s.max() == 1.0
    assert np.all(band[top])
    assert np.array_equal(top, band & (lab == 1))
    raw = semantic_score_raw(_labels(lab))
    assert raw[0, 7] == pytest.approx(0.1) and raw[0, 0] == 0.0 and raw[0, 12] == 1.0


def test_geometry_constant_depth_is_zero():
    assert np.all(geometry_score_raw(np.full((8, 8), 2.5), 0.5) == 0)


def test_geometry_ramp():
    a = 0.25
    d = 1.0 + a * np.arange(10)[None, :] * np.ones((8, 1))
    raw = geometry_score_raw(d, lambda_curv=0.0)
    assert np.allclose(raw, abs(a), atol=1e-12)
    curv_only = geometry_score_raw(d, lambda_curv=1.0) - raw
    assert np.allclose(curv_only[1:-1, 1:-1], 0.0, atol=1e-12)


def test_geometry_spike_curvature_peaks_there():
    d = np.ones((9, 9))
    d[4, 4] = 2.0
    grad_free = geometry_score_raw(d, 1.0) - geometry_score_raw(d, 0.0)
    # 5-point stencil: |4 * 1| at the spike, |1| at the 4 neighbours
    assert grad_free[4, 4] == pytest.approx(4.0)
    assert np.unravel_index(np.argmax(grad_free), d.shape) == (4, 4)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (7, 7), elements=st.floats(0.5, 5.0)), st.floats(-0.4, 3.0))
def test_geometry_offset_invariance(d, c):
    a = geometry_score(PriorInputs(RasterGrid(d), None), 0.5).plane
    b = geometry_score(PriorInputs(RasterGrid(d + c), None), 0.5).plane
    assert np.allclose(a, b, atol=1e-9)


def test_geometry_invalid_pixels_score_zero():
    d = np.linspace(1, 2, 64).reshape(8, 8)
    d[2:4, 2:4] = 0.0
    raw = geometry_score_raw(d, 0.5)
    assert np.all(raw[2:4, 2:4] == 0)
    assert np.all(np.isfinite(raw))


def test_fuse_examples():
    one, zero = np.ones((3, 3)), np.zeros((3, 3))
    assert np.allclose(fuse(one, zero, zero, (0.4, 0.2, 0.4)).plane, 0.4)
    rng = np.random.default_rng(0)
    sr = rng.uniform(size=(3, 3))
    assert np.array_equal(fuse(sr, rng.uniform(size=(3, 3)), rng.uniform(size=(3, 3)), (1, 0, 0)).plane, sr)
    with pytest.raises(ValueError):
        fuse(one, one, one, (0.5, -0.1, 0.6))


def test_reliability_examples():
    s = np.array([[0.0, 0.5], [1.0, 0.2]])
    assert np.array_equal(reliability_mask(s, 0.0).plane, [[0, 1], [1, 1]])
    assert np.all(reliability_mask(s, 1.0).plane == 0)


def test_reliability_percentile_density():
    rng = np.random.default_rng(1)
    s = rng.uniform(size=(100, 100))
    for p in (10, 50, 90):
        m = reliability_mask(s, percentile_threshold(s, p)).plane
        # sort-based oracle
        k = int(round(s.size * (100 - p) / 100))
        assert abs(m.sum() - k) <= 1
        assert m.mean() == pytest.approx((100 - p) / 100, abs=1e-3)


def test_percentile_over_valid_pixels():
    s = np.zeros((10, 10))
    s[:, :5] = np.linspace(0.1, 1.0, 50).reshape(10, 5)
    valid = np.zeros((10, 10), bool)
    valid[:, :5] = True
    tau = percentile_threshold(s, 50, valid)
    assert tau == pytest.approx(np.median(s[:, :5]))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(0, 1)), st.floats(0, 1), st.floats(0, 1))
def test_reliability_monotone(s, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    assert np.all(reliability_mask(s, hi).plane <= reliability_mask(s, lo).plane)


def test_ablated_weights_rescale():
    w = ablated_weights((0.4, 0.2, 0.4), use_semantic=False)
    assert np.allclose(w, [0.5, 0.0, 0.5])
    assert np.allclose(ablated_weights((0.4, 0.2, 0.4)), [0.4, 0.2, 0.4])


def test_compute_scores_ranges_and_fallbacks(caplog):
    rng = np.random.default_rng(2)
    gt, rend = rng.uniform(size=(12, 12, 3)), rng.uniform(size=(12, 12, 3))
    lab = np.zeros((12, 12))
    lab[3:9, 3:9] = 2
    depth = np.where(lab > 0, rng.uniform(1, 2, (12, 12)), 0.0)
    maps = compute_scores(gt, rend, PriorInputs(RasterGrid(depth), RasterGrid(lab)), (0.4, 0.2, 0.4), 0.5)
    for name, g in maps.items():
        assert g.plane.min() >= 0.0
    for g in (maps.s_render, maps.s_semantic, maps.s_geometry):
        assert g.plane.max() <= 1.0
    assert maps.s_importance.plane.max() <= 1.0 + 1e-12
    with caplog.at_level(logging.WARNING):
        m2 = compute_scores(gt, rend, PriorInputs(None, RasterGrid(lab)), (0.4, 0.2, 0.4), 0.5)
    assert np.all(m2.s_geometry.plane == 0)
    assert "no depth prior" in caplog.text
    m3 = compute_scores(gt, rend, PriorInputs(RasterGrid(depth), RasterGrid(lab)), (0.4, 0.2, 0.4), 0.5,
                        use_reliability=False)
    assert np.all(m3.m_reliable.plane == 1)


def test_label_validation():
    with pytest.raises(ValueError):
        _labels(np.full((2, 2), 21))
    with pytest.raises(ValueError):
        _labels(np.full((2, 2), 0.5))
