import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import savgol_coeffs

from mocapkit.errors import ValidationError
from mocapkit.model import KeypointFrame2D
from mocapkit.smoothing import (FilterSpec, adaptive_half_width, half_width_map, sg_coefficients,
                                smooth_keypoints)


def normal_equation_coeffs(w, p):
    """Center row of the hat matrix from explicit normal equations."""
    x = np.arange(-w, w + 1, dtype=float)
    v = np.vander(x, p + 1, increasing=True)
    return (np.linalg.inv(v.T @ v) @ v.T)[0]


def test_moving_average_case():
    np.testing.assert_allclose(sg_coefficients(1, 0), [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_five_point_quadratic():
    frozen = np.array([-3, 12, 17, 12, -3]) / 35.0
    np.testing.assert_allclose(normal_equation_coeffs(2, 2), frozen, atol=1e-14)
    np.testing.assert_allclose(sg_coefficients(2, 2), frozen, atol=1e-14)


@pytest.mark.parametrize("w", range(1, 9))
@pytest.mark.parametrize("p", range(0, 5))
def test_coefficients_match_reference(w, p):
    if p >= 2 * w + 1:
        pytest.skip("window too small")
    c = sg_coefficients(w, p)
    np.testing.assert_allclose(c, savgol_coeffs(2 * w + 1, p, use="dot"), atol=1e-12)
    assert abs(c.sum() - 1.0) < 1e-12
    np.testing.assert_array_equal(c, c[::-1])


def test_coefficients_reject_large_order():
    with pytest.raises(ValidationError):
        sg_coefficients(1, 3)


def test_half_width_endpoints_and_midpoint():
    spec = FilterSpec(poly_order=2, w_min=2, w_max=8)
    assert adaptive_half_width(np.ones(9), spec) == 2
    assert adaptive_half_width(np.zeros(9), spec) == 8
    assert adaptive_half_width(np.full(9, 0.5), spec) == 5


def test_half_width_custom_breakpoints():
    spec = FilterSpec(w_min=2, w_max=8, confidence_breakpoints=((0.0, 8), (0.5, 3), (1.0, 2)))
    assert adaptive_half_width(np.full(5, 0.25), spec) == 6  # 5.5 rounds half-up
    with pytest.raises(ValidationError):
        FilterSpec(w_min=2, w_max=8, confidence_breakpoints=((0.0, 2), (1.0, 8)))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(0, 2**31))
def test_lowering_confidence_never_shrinks_window(conf, seed):
    rng = np.random.default_rng(seed)
    conf = np.array(conf)
    lowered = conf * rng.uniform(0, 1, conf.shape)
    spec = FilterSpec(poly_order=2, w_min=2, w_max=8)
    assert adaptive_half_width(lowered, spec) >= adaptive_half_width(conf, spec)


def frames(points, conf=None):
    t = len(points)
    conf = np.ones((t, points.shape[1])) if conf is None else conf
    return KeypointFrame2D(points, conf)


def padded(series):
    """Place a (T,) series into keypoint 0, x channel, of a (T, 133, 2) array."""
    pts = np.zeros((len(series), 133, 2))
    pts[:, 0, 0] = series
    pts[:, 0, 1] = -series
    return pts


def test_constant_trajectory_unchanged(rng):
    pts = np.broadcast_to(rng.normal(size=(1, 133, 2)), (40, 133, 2)).copy()
    conf = rng.uniform(0, 1, (40, 133))
    out = smooth_keypoints(frames(pts, conf))
    np.testing.assert_allclose(out.points, pts, atol=1e-12)
    np.testing.assert_array_equal(out.confidence, conf)


@pytest.mark.parametrize("boundary_conf", ["uniform", "random"])
def test_quadratic_trajectory_reproduced(rng, boundary_conf):
    t = np.arange(60, dtype=float)
    series = 0.02 * t ** 2 - 1.3 * t + 4.0
    conf = np.ones((60, 133)) if boundary_conf == "uniform" else rng.uniform(0, 1, (60, 133))
    out = smooth_keypoints(frames(padded(series), conf), FilterSpec(poly_order=2, w_min=2, w_max=8))
    np.testing.assert_allclose(out.points[:, 0, 0], series, atol=1e-9)


def windowed_ls_oracle(series, i, w, p):
    lo, hi = i - w, i + w + 1
    x = np.arange(lo, hi)
    return np.polyval(np.polyfit(x - i, series[lo:hi], p), 0.0)


def test_outlier_suppressed_at_low_confidence_frame():
    t = np.arange(80, dtype=float)
    clean = np.sin(t / 6.0)
    noisy = clean.copy()
    noisy[40] += 3.0
    conf = np.ones((80, 133))
    conf[36:45, 0] = 0.05
    spec = FilterSpec(poly_order=2, w_min=2, w_max=8)
    out = smooth_keypoints(frames(padded(noisy), conf), spec)
    w = half_width_map(conf, spec)[40, 0]
    assert w > spec.w_min
    assert out.points[40, 0, 0] == pytest.approx(windowed_ls_oracle(noisy, 40, w, 2), abs=1e-10)
    assert abs(out.points[40, 0, 0] - clean[40]) < abs(noisy[40] - clean[40])


def test_linearity(rng):
    conf = rng.uniform(0, 1, (30, 133))
    x = rng.normal(size=(30, 133, 2))
    y = rng.normal(size=(30, 133, 2))
    sx = smooth_keypoints(frames(x, conf)).points
    sy = smooth_keypoints(frames(y, conf)).points
    sxy = smooth_keypoints(frames(2.0 * x - 3.0 * y, conf)).points
    np.testing.assert_allclose(sxy, 2.0 * sx - 3.0 * sy, atol=1e-12)


def test_shift_equivariance_away_from_boundaries(rng):
    spec = FilterSpec(poly_order=2, w_min=2, w_max=4)
    x = rng.normal(size=(60, 133, 2))
    conf = np.full((60, 133), 0.7)
    a = smooth_keypoints(frames(x[:50], conf[:50]), spec).points
    b = smooth_keypoints(frames(x[5:55], conf[5:55]), spec).points
    np.testing.assert_allclose(a[5 + 8:50 - 8], b[8:45 - 8], atol=1e-12)


@pytest.mark.parametrize("boundary", ["interp", "mirror"])
def test_moving_average_does_not_increase_total_variation(rng, boundary):
    spec = FilterSpec(poly_order=0, w_min=3, w_max=3, boundary=boundary)
    x = rng.normal(size=(50, 133, 2))
    out = smooth_keypoints(frames(x), spec).points
    tv_in = np.abs(np.diff(x, axis=0)).sum(0)
    tv_out = np.abs(np.diff(out, axis=0)).sum(0)
    assert np.all(tv_out <= tv_in + 1e-12)


def test_mirror_boundary_reproduces_constant(rng):
    spec = FilterSpec(boundary="mirror")
    pts = np.broadcast_to(rng.normal(size=(1, 133, 2)), (20, 133, 2)).copy()
    np.testing.assert_allclose(smooth_keypoints(frames(pts), spec).points, pts, atol=1e-12)


def test_short_sequence_rejected():
    with pytest.raises(ValidationError):
        smooth_keypoints(frames(np.zeros((4, 133, 2))), FilterSpec(w_min=2, w_max=8))


def test_filter_spec_rejects_bad_order():
    with pytest.raises(ValidationError):
        FilterSpec(poly_order=5, w_min=2, w_max=4)
