"""Camera trajectory from masked bundle adjustment over tracked keyframe pixels.

Each tracked pixel p_i of keyframe i carries an inverse depth d. A
correspondence (i, j) predicts where that pixel lands in keyframe j:

    p_ij ~ Pi(G_j G_i^-1 Pi^-1(p_i, d))

with world-to-camera poses G. The objective is the weighted squared
difference between the observed target (pixel + flow + revision) and the
prediction. Pixels inside the human mask are removed before solving.
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve
from scipy.spatial.transform import Rotation, Slerp

from ..camera import project_camera_points
from ..errors import DivergenceError, ProjectionError, UnderconstrainedError, ValidationError
from ..model import CameraState
from ..rotations import axis_angle_to_matrix, skew

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FrameMask:
    """Human mask of one frame: a boolean bitmap (H, W) and/or boxes (x0, y0, x1, y1)."""

    frame_index: int
    bitmap: np.ndarray = None
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        if self.bitmap is not None:
            b = np.asarray(self.bitmap, dtype=bool)
            if b.ndim != 2:
                raise ValidationError("mask bitmap must be 2D")
            object.__setattr__(self, "bitmap", b)
        boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 4)
        if np.any(boxes[:, 2] < boxes[:, 0]) or np.any(boxes[:, 3] < boxes[:, 1]):
            raise ValidationError("mask boxes need x0 <= x1 and y0 <= y1")
        object.__setattr__(self, "boxes", boxes)

    def contains(self, pixels):
        """Boolean (M,) for pixels (M, 2) given as (x, y)."""
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        inside = np.zeros(len(pixels), dtype=bool)
        if self.bitmap is not None:
            h, w = self.bitmap.shape
            col = np.floor(pixels[:, 0]).astype(np.int64)
            row = np.floor(pixels[:, 1]).astype(np.int64)
            ok = (col >= 0) & (col < w) & (row >= 0) & (row < h)
            inside[ok] = self.bitmap[row[ok], col[ok]]
        for x0, y0, x1, y1 in self.boxes:
            inside |= (pixels[:, 0] >= x0) & (pixels[:, 0] <= x1) & (pixels[:, 1] >= y0) & (pixels[:, 1] <= y1)
        return inside


@dataclass(frozen=True)
class BAProblem:
    """Sparse correspondence set between keyframes.

    Attributes:
        keyframes: (K,) frame indices of the keyframes.
        intrinsics: (2, 3) shared camera matrix.
        poses: (K, 4, 4) initial world-to-camera poses.
        inverse_depths: (P,) initial inverse depth per tracked pixel.
        point_ids: (M,) tracked pixel of each correspondence.
        source: (M,) keyframe slot of the source pixel (must match the point's slot).
        target: (M,) keyframe slot the pixel is matched into.
        pixels: (M, 2) source pixels.
        flow: (M, 2) observed displacement to the matched pixel.
        revision: (M, 2) additive correction to the flow.
        weights: (M, 2) per-coordinate confidence.
        image_size: (width, height).
    """

    keyframes: np.ndarray
    intrinsics: np.ndarray
    poses: np.ndarray
    inverse_depths: np.ndarray
    point_ids: np.ndarray
    source: np.ndarray
    target: np.ndarray
    pixels: np.ndarray
    flow: np.ndarray
    revision: np.ndarray
    weights: np.ndarray
    image_size: tuple = (0, 0)

    def __post_init__(self):
        conv = {"keyframes": np.int64, "point_ids": np.int64, "source": np.int64, "target": np.int64}
        for name in ("keyframes", "intrinsics", "poses", "inverse_depths", "point_ids", "source", "target",
                     "pixels", "flow", "revision", "weights"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=conv.get(name, np.float64)))
        m = len(self.point_ids)
        k = len(self.keyframes)
        if self.poses.shape != (k, 4, 4):
            raise ValidationError("one 4x4 pose per keyframe is required")
        for name in ("pixels", "flow", "revision", "weights"):
            if getattr(self, name).shape != (m, 2):
                raise ValidationError(f"{name} must have shape ({m}, 2)")
        if len(self.source) != m or len(self.target) != m:
            raise ValidationError("source/target slots must cover every correspondence")
        if np.any(self.weights < 0):
            raise ValidationError("correspondence weights must be non-negative")
        if m and (self.point_ids.max() >= len(self.inverse_depths) or self.point_ids.min() < 0):
            raise ValidationError("point id out of range")
        if m and (max(self.source.max(), self.target.max()) >= k or min(self.source.min(), self.target.min()) < 0):
            raise ValidationError("keyframe slot out of range")

    @property
    def observed(self):
        """Matched pixel in the target keyframe."""
        return self.pixels + self.flow + self.revision

    @property
    def active(self):
        return np.any(self.weights > 0, axis=1)

    def replace(self, **changes):
        return replace(self, **changes)


def _mask_lookup(problem, masks):
    if isinstance(masks, dict):
        by_frame = masks
    else:
        masks = list(masks)
        if len(masks) != len(problem.keyframes):
            raise ValidationError(f"{len(masks)} masks for {len(problem.keyframes)} keyframes")
        by_frame = {}
        for slot, m in enumerate(masks):
            if m is not None and m.frame_index != problem.keyframes[slot]:
                raise ValidationError(f"mask for frame {m.frame_index} given at keyframe {problem.keyframes[slot]}")
            by_frame[int(problem.keyframes[slot])] = m
    w, h = problem.image_size
    for m in by_frame.values():
        if m is not None and m.bitmap is not None and w and m.bitmap.shape != (h, w):
            raise ValidationError(f"mask bitmap shape {m.bitmap.shape} does not match image {(h, w)}")
    return by_frame


def apply_masks(problem, masks):
    """Zero the weight, revision and source pixel of correspondences whose source pixel lies in the human mask.

    Args:
        masks: FrameMask per keyframe (sequence aligned with ``problem.keyframes``,
            ``None`` for no mask) or dict frame_index -> FrameMask.
    """
    by_frame = _mask_lookup(problem, masks)
    hit = np.zeros(len(problem.point_ids), dtype=bool)
    for slot, frame in enumerate(problem.keyframes):
        m = by_frame.get(int(frame))
        if m is None:
            continue
        sel = problem.source == slot
        hit[sel] = m.contains(problem.pixels[sel])
    if not hit.any():
        return problem
    weights = problem.weights.copy()
    revision = problem.revision.copy()
    pixels = problem.pixels.copy()
    weights[hit] = 0.0
    revision[hit] = 0.0
    pixels[hit] = 0.0
    return problem.replace(weights=weights, revision=revision, pixels=pixels)


def _pose_inverse(g):
    out = np.zeros_like(g)
    r = g[..., :3, :3]
    out[..., :3, :3] = np.swapaxes(r, -1, -2)
    out[..., :3, 3] = -np.einsum("...ba,...b->...a", r, g[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def _rays(problem, pixels):
    k = problem.intrinsics
    uv = np.linalg.solve(k[:, :2], (pixels - k[:, 2]).T).T
    return np.concatenate([uv, np.ones((len(pixels), 1))], axis=1)


def _predict(problem, poses, inv_depth, sel, with_jacobian=False):
    """Predicted target pixels for correspondences ``sel`` and, optionally, Jacobians."""
    src, dst = problem.source[sel], problem.target[sel]
    d = inv_depth[problem.point_ids[sel]]
    ray = _rays(problem, problem.pixels[sel])
    xc = ray / d[:, None]
    ri, ti = poses[src, :3, :3], poses[src, :3, 3]
    rj, tj = poses[dst, :3, :3], poses[dst, :3, 3]
    xw = np.einsum("mba,mb->ma", ri, xc - ti)
    y = np.einsum("mab,mb->ma", rj, xw) + tj
    pix, dpix = project_camera_points(problem.intrinsics, y)
    if not with_jacobian:
        return pix
    rji = rj @ np.swapaxes(ri, 1, 2)
    dd = dpix @ (rji @ (-ray / (d * d)[:, None])[..., None])  # (m, 2, 1)
    dwj = dpix @ -skew(y)
    dvj = dpix
    dwi = dpix @ rji @ skew(xc)
    dvi = -(dpix @ rji)
    return pix, dd[..., 0], np.concatenate([dwi, dvi], axis=2), np.concatenate([dwj, dvj], axis=2)


def dba_objective(problem, poses=None, inverse_depths=None):
    """Weighted squared flow reprojection error over correspondences with positive weight."""
    poses = problem.poses if poses is None else poses
    inv = problem.inverse_depths if inverse_depths is None else inverse_depths
    sel = np.flatnonzero(problem.active)
    if not len(sel):
        return 0.0
    pred = _predict(problem, poses, inv, sel)
    res = problem.observed[sel] - pred
    return float(np.sum(problem.weights[sel] * res * res))


@dataclass(frozen=True)
class DBAConfig:
    iterations: int = 100
    tolerance: float = 1e-14
    max_depth_ratio: float = 1e6


@dataclass
class DBAResult:
    poses: np.ndarray
    inverse_depths: np.ndarray
    trace: list = field(default_factory=list)
    iterations: int = 0

    def cameras(self, intrinsics):
        """World-to-camera CameraState per keyframe."""
        return [CameraState(intrinsics, g[:3, :3], g[:3, 3]) for g in self.poses]


def solve_masked_ba(problem, config=None):
    """Damped Gauss-Newton on the weighted flow objective.

    The first keyframe pose and the inverse depth of the median-depth point
    are held fixed, which removes the rigid and scale gauge freedoms.

    Returns:
        DBAResult with refined world-to-camera poses (K, 4, 4), inverse depths
        and the accepted objective trace.
    """
    config = config or DBAConfig()
    sel = np.flatnonzero(problem.active)
    if not len(sel):
        raise UnderconstrainedError("no correspondence survives masking")
    k = len(problem.keyframes)
    used = np.unique(problem.point_ids[sel])
    inv0 = problem.inverse_depths
    if np.any(inv0[used] <= 0):
        raise ValidationError("inverse depths must be positive")
    anchor = used[np.argsort(inv0[used], kind="stable")[len(used) // 2]]
    free_pts = used[used != anchor]
    pt_col = -np.ones(len(inv0), dtype=np.int64)
    n_pose = 6 * (k - 1)
    pt_col[free_pts] = n_pose + np.arange(len(free_pts))
    n_var = n_pose + len(free_pts)
    w = problem.weights[sel]
    sw = np.sqrt(w)
    target = problem.observed[sel]

    def evaluate(poses, inv, jac=True):
        out = _predict(problem, poses, inv, sel, jac)
        pix = out[0] if jac else out
        r = (sw * (pix - target)).reshape(-1)
        if not jac:
            return r
        _, dd, dpi, dpj = out
        m = len(sel)
        rows, cols, vals = [], [], []
        base = 2 * np.arange(m)
        for blocks, slots in ((dpi, problem.source[sel]), (dpj, problem.target[sel])):
            keep = slots > 0
            rr = base[keep][:, None, None] + np.arange(2)[None, :, None]
            cc = (6 * (slots[keep] - 1))[:, None, None] + np.arange(6)[None, None, :]
            rr, cc = np.broadcast_arrays(rr, cc)
            rows.append(rr.reshape(-1))
            cols.append(cc.reshape(-1))
            vals.append((sw[keep][:, :, None] * blocks[keep]).reshape(-1))
        pc = pt_col[problem.point_ids[sel]]
        keep = pc >= 0
        rr = base[keep][:, None] + np.arange(2)[None, :]
        rows.append(rr.reshape(-1))
        cols.append(np.repeat(pc[keep], 2))
        vals.append((sw[keep] * dd[keep]).reshape(-1))
        jm = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                           shape=(2 * m, n_var))
        return r, jm

    def step_state(poses, inv, delta):
        poses = poses.copy()
        for s in range(1, k):
            xi = delta[6 * (s - 1):6 * s]
            upd = np.eye(4)
            upd[:3, :3] = axis_angle_to_matrix(xi[:3])
            upd[:3, 3] = xi[3:]
            poses[s] = upd @ poses[s]
        inv = inv.copy()
        inv[free_pts] += delta[n_pose:]
        return poses, inv

    poses, inv = problem.poses.copy(), inv0.copy()
    r, jm = evaluate(poses, inv)
    f = float(r @ r)
    trace = [f]
    mu = None
    it = 0
    for it in range(1, config.iterations + 1):
        if f <= 1e-30:
            break
        jtj = (jm.T @ jm).tocsc()
        g = jm.T @ r
        if mu is None:
            mu = 1e-6 * max(float(jtj.diagonal().max()), 1e-12)
        accepted = False
        while mu < 1e30:
            delta = spsolve(jtj + mu * sp.identity(n_var, format="csc"), -g)
            cand = step_state(poses, inv, np.atleast_1d(delta))
            if np.all(cand[1][used] > 0):
                try:
                    r_new = evaluate(*cand, jac=False)
                    f_new = float(r_new @ r_new)
                except ProjectionError:
                    f_new = np.inf
                if f_new < f:
                    accepted = True
                    break
            mu *= 4.0
        if not accepted:
            break
        poses, inv = cand
        r, jm = evaluate(poses, inv)
        decrease = f - f_new
        f = float(r @ r)
        trace.append(f)
        mu = max(mu / 3.0, 1e-15)
        if decrease <= config.tolerance * max(f, 1e-300):
            break
    if not np.isfinite(f):
        raise DivergenceError("camera bundle adjustment diverged", trace)
    logger.info("masked BA: %d keyframes, %d terms, objective %.3e -> %.3e", k, len(sel), trace[0], trace[-1])
    return DBAResult(poses, inv, trace, it)


def relative_translation_norms(poses):
    """Norm of each keyframe camera center relative to the first keyframe."""
    poses = np.asarray(poses, dtype=float)
    centers = -np.einsum("kba,kb->ka", poses[:, :3, :3], poses[:, :3, 3])
    return np.linalg.norm(centers - centers[0], axis=1)


def interpolate_poses(keyframes, poses, n_frames):
    """World-to-camera poses for every frame: slerp rotation, linear camera center."""
    keyframes = np.asarray(keyframes)
    poses = np.asarray(poses, dtype=float)
    rot = Rotation.from_matrix(poses[:, :3, :3])
    centers = -np.einsum("kba,kb->ka", poses[:, :3, :3], poses[:, :3, 3])
    frames = np.clip(np.arange(n_frames), keyframes[0], keyframes[-1])
    if len(keyframes) == 1:
        r_all = Rotation.from_matrix(np.repeat(poses[:1, :3, :3], n_frames, axis=0))
        c_all = np.repeat(centers[:1], n_frames, axis=0)
    else:
        r_all = Slerp(keyframes, rot)(frames)
        c_all = np.stack([np.interp(frames, keyframes, centers[:, a]) for a in range(3)], axis=1)
    out = np.tile(np.eye(4), (n_frames, 1, 1))
    out[:, :3, :3] = r_all.as_matrix()
    out[:, :3, 3] = -np.einsum("tab,tb->ta", out[:, :3, :3], c_all)
    return out


@dataclass(frozen=True)
class KeyframeSelector:
    """Information threshold and per-frame scores/areas for keyframe selection."""

    info_threshold: float
    scores: np.ndarray
    bbox_areas: np.ndarray
    frame_area: float

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        a = np.asarray(self.bbox_areas, dtype=float)
        if s.shape != a.shape:
            raise ValidationError("one score and one bbox area per frame are required")
        if not self.frame_area > 0 or np.any(a < 0) or np.any(a > self.frame_area):
            raise ValidationError("bbox areas must lie in [0, frame_area]")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "bbox_areas", a)

    @property
    def scale_factors(self):
        """1 - S_bbox / S_frame per frame, always in [0, 1]."""
        return 1.0 - self.bbox_areas / self.frame_area


def keyframe_scale(bbox_area, frame_area):
    if not frame_area > 0 or not 0 <= bbox_area <= frame_area:
        raise ValidationError("bbox area must lie in [0, frame_area]")
    return 1.0 - bbox_area / frame_area


def select_keyframes(selector, frames=None):
    """Frames whose information score clears the threshold after bbox scaling.

    A frame is kept when ``scale * score > info_threshold``. Dividing the
    threshold by the scale favours frames where the person covers less of the
    image, so shrinking a box can only turn a rejected frame into a keyframe.
    """
    idx = np.arange(len(selector.scores)) if frames is None else np.asarray(frames)
    keep = selector.scale_factors[idx] * selector.scores[idx] > selector.info_threshold
    return [int(i) for i in idx[keep]]


def information_scores(flows, boxes=None):
    """Mean flow magnitude outside the subject box for each flow field (one per frame pair)."""
    by_frame = {} if boxes is None else {b.frame_index: b for b in boxes}
    return np.array([f.mean_outside(by_frame.get(f.frame_index)) for f in flows])
