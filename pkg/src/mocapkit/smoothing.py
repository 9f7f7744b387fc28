"""Confidence-guided adaptive Savitzky-Golay smoothing of keypoint tracks.

Low-confidence stretches of a keypoint trajectory get a wider window;
confident stretches keep a narrow one so fast motion survives.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ValidationError
from .model import KeypointFrame2D


@dataclass(frozen=True)
class FilterSpec:
    """Window rule for the adaptive filter.

    ``confidence_breakpoints`` is a sequence of (mean_confidence, half_width)
    pairs; ``None`` means the straight line from (0, w_max) to (1, w_min).
    ``boundary`` is ``"interp"`` (polynomial fit on the nearest full window)
    or ``"mirror"`` (reflect the signal about the edge sample).
    """

    poly_order: int = 2
    w_min: int = 2
    w_max: int = 8
    confidence_breakpoints: tuple = None
    boundary: str = "interp"

    def __post_init__(self):
        if not (0 < self.w_min <= self.w_max):
            raise ValidationError("need 0 < w_min <= w_max")
        if self.poly_order < 0 or self.poly_order >= 2 * self.w_min + 1:
            raise ValidationError("poly_order must satisfy 0 <= p < 2*w_min + 1")
        if self.boundary not in ("interp", "mirror"):
            raise ValidationError("boundary must be 'interp' or 'mirror'")
        if self.confidence_breakpoints is not None:
            bp = np.asarray(self.confidence_breakpoints, dtype=float)
            if bp.ndim != 2 or bp.shape[1] != 2 or len(bp) < 2:
                raise ValidationError("breakpoints must be (confidence, half_width) pairs")
            if np.any(np.diff(bp[:, 0]) <= 0):
                raise ValidationError("breakpoint confidences must increase")
            if np.any(np.diff(bp[:, 1]) > 0):
                raise ValidationError("half-width must not increase with confidence")
            if bp[:, 1].min() < self.w_min or bp[:, 1].max() > self.w_max:
                raise ValidationError("breakpoint half-widths must lie in [w_min, w_max]")
            object.__setattr__(self, "confidence_breakpoints", tuple(map(tuple, bp.tolist())))

    def breakpoints(self):
        if self.confidence_breakpoints is None:
            return np.array([[0.0, self.w_max], [1.0, self.w_min]], dtype=float)
        return np.asarray(self.confidence_breakpoints, dtype=float)


@lru_cache(maxsize=None)
def _fit_weights(left, right, poly_order, at):
    """Least-squares weights evaluating the degree-p fit over offsets [-left, right] at offset ``at``."""
    offsets = np.arange(-left, right + 1, dtype=float)
    vander = offsets[:, None] ** np.arange(poly_order + 1)
    row = float(at) ** np.arange(poly_order + 1)
    # weights = row @ (V^T V)^-1 V^T, computed through a least-squares solve
    weights = np.linalg.lstsq(vander.T, row, rcond=None)[0]
    weights.setflags(write=False)
    return weights


def sg_coefficients(half_width, poly_order):
    """Savitzky-Golay smoothing coefficients c_{-w..w} for the window center."""
    w, p = int(half_width), int(poly_order)
    if w < 0 or p < 0:
        raise ValidationError("half_width and poly_order must be non-negative")
    if p >= 2 * w + 1:
        raise ValidationError(f"poly_order {p} must be smaller than the window size {2 * w + 1}")
    c = np.array(_fit_weights(w, w, p, 0))
    # enforce exact symmetry; the least-squares solution is symmetric up to roundoff
    return 0.5 * (c + c[::-1])


def adaptive_half_width(window_confidences, spec):
    """Half-width for a window whose keypoint confidences are given.

    Mean confidence 1 maps to ``w_min`` and 0 to ``w_max`` through the
    (monotone) breakpoint curve; the result is rounded half-up.
    """
    conf = np.asarray(window_confidences, dtype=float)
    if conf.size == 0:
        return spec.w_max
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValidationError("confidences must lie in [0, 1]")
    bp = spec.breakpoints()
    w = np.interp(conf.mean(), bp[:, 0], bp[:, 1])
    return int(np.clip(np.floor(w + 0.5), spec.w_min, spec.w_max))


def _window_means(conf, w):
    """Mean of conf over [i-w, i+w] clipped to the sequence, for every i. conf is (T, K)."""
    t = len(conf)
    csum = np.concatenate([np.zeros((1,) + conf.shape[1:]), np.cumsum(conf, axis=0)])
    lo = np.clip(np.arange(t) - w, 0, t)
    hi = np.clip(np.arange(t) + w + 1, 0, t)
    return (csum[hi] - csum[lo]) / (hi - lo)[:, None]


def half_width_map(confidence, spec):
    """Per-frame, per-keypoint half-width (T, K) from confidences (T, K)."""
    conf = np.asarray(confidence, dtype=float)
    means = _window_means(conf, spec.w_max)
    bp = spec.breakpoints()
    w = np.interp(means, bp[:, 0], bp[:, 1])
    return np.clip(np.floor(w + 0.5), spec.w_min, spec.w_max).astype(int)


def _mirror_index(idx, t):
    period = 2 * (t - 1)
    idx = np.abs(idx) % period if period > 0 else np.zeros_like(idx)
    return np.where(idx >= t, period - idx, idx)


def smooth_series(values, half_widths, poly_order, boundary="interp"):
    """Filter ``values`` (T, K, D) with per-sample half-widths (T, K)."""
    values = np.asarray(values, dtype=float)
    t = len(values)
    out = np.empty_like(values)
    for w in np.unique(half_widths):
        w = int(w)
        sel = half_widths == w
        if boundary == "interp" and 2 * w + 1 > t:
            raise ValidationError(f"sequence of {t} frames is shorter than a window of {2 * w + 1}")
        for i in range(t):
            cols = np.flatnonzero(sel[i])
            if cols.size == 0:
                continue
            if boundary == "mirror":
                idx = _mirror_index(np.arange(i - w, i + w + 1), t)
                coeffs = sg_coefficients(w, poly_order)
            elif w <= i < t - w:
                idx = np.arange(i - w, i + w + 1)
                coeffs = sg_coefficients(w, poly_order)
            else:
                start = min(max(i - w, 0), t - 2 * w - 1)
                idx = np.arange(start, start + 2 * w + 1)
                coeffs = _fit_weights(w, w, poly_order, i - start - w)
            # weights sum to one, so filtering differences to the centre sample keeps constants bit-exact
            ref = values[i, cols]
            out[i, cols] = ref + np.einsum("j,jkd->kd", coeffs, values[idx][:, cols] - ref)
    return out


def smooth_keypoints(keypoints, spec=None):
    """Adaptive smoothing of a keypoint sequence.

    Args:
        keypoints: KeypointFrame2D/3D with a leading frame axis, points (T, K, D).
        spec: FilterSpec; defaults to FilterSpec().

    Returns:
        Same type with smoothed points; confidences pass through unchanged.
    """
    spec = spec or FilterSpec()
    points = keypoints.points
    if points.ndim != 3:
        raise ValidationError("expected points with shape (T, K, D)")
    t = points.shape[0]
    if t < 2 * spec.w_min + 1:
        raise ValidationError(f"need at least {2 * spec.w_min + 1} frames, got {t}")
    widths = half_width_map(keypoints.confidence, spec)
    if spec.boundary == "interp":
        widths = np.minimum(widths, (t - 1) // 2)
    smoothed = smooth_series(points, widths, spec.poly_order, spec.boundary)
    return type(keypoints)(smoothed, keypoints.confidence)


def smooth_keypoints_2d(points, confidence, spec=None):
    """Array front end: points (T, 133, 2), confidence (T, 133)."""
    return smooth_keypoints(KeypointFrame2D(points, confidence), spec).points
