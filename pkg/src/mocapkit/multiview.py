"""Multi-view triangulation and bundle adjustment of whole-body keypoints.

Cameras are world-to-camera (x_cam = R x + scale * T) with frozen intrinsics
and scale. Rotation updates are left perturbations R <- exp(w) R.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .camera import project_camera_points
from .errors import DegenerateGeometryError, DivergenceError, UnderconstrainedError, ValidationError
from .model import BodyShape, CameraState, KeypointFrame2D
from .rotations import axis_angle_to_matrix, skew
from .skeleton import default_skeleton

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e8


def projection_matrix(camera):
    """3x4 matrix mapping homogeneous world points to homogeneous pixels."""
    return camera.K3 @ np.hstack([camera.rotation, camera.scale * camera.translation[:, None]])


def triangulate(pixels, cameras, confidence=None, cutoff=0.0):
    """Direct linear triangulation of one point seen by several cameras.

    Args:
        pixels: (V, 2) observations.
        cameras: V CameraState.
        confidence: optional (V,) weights; views at or below ``cutoff`` are ignored.

    Returns:
        (point (3,), RMS reprojection residual in pixels over the used views).

    Raises:
        UnderconstrainedError: fewer than two usable views.
        DegenerateGeometryError: near-parallel rays (condition number above 1e8).
    """
    pixels = np.asarray(pixels, dtype=float)
    conf = np.ones(len(pixels)) if confidence is None else np.asarray(confidence, dtype=float)
    use = np.flatnonzero((conf > cutoff) & np.all(np.isfinite(pixels), axis=-1))
    if len(use) < 2:
        raise UnderconstrainedError(f"point seen by {len(use)} usable views, need at least 2")
    rows = []
    for v in use:
        p = projection_matrix(cameras[v])
        for a, coord in enumerate(pixels[v]):
            row = coord * p[2] - p[a]
            rows.append(np.sqrt(conf[v]) * row / np.linalg.norm(row))
    a = np.array(rows)
    _, s, vt = np.linalg.svd(a)
    if s[2] <= 0 or s[0] / s[2] > CONDITION_LIMIT:
        raise DegenerateGeometryError("near-parallel rays: triangulation is ill-conditioned")
    h = vt[-1]
    if abs(h[3]) < 1e-300:
        raise DegenerateGeometryError("triangulated point at infinity")
    point = h[:3] / h[3]
    res = []
    for v in use:
        pc = cameras[v].rotation @ point + cameras[v].scale * cameras[v].translation
        pix, _ = project_camera_points(cameras[v].intrinsics, pc)
        res.append(np.sum((pix - pixels[v]) ** 2))
    return point, float(np.sqrt(np.mean(res)))


@dataclass(frozen=True)
class MultiViewObservation:
    """Keypoints of one frame as seen by every view of a (static) rig."""

    keypoints: tuple
    cameras: tuple
    frame_index: int = 0

    def __post_init__(self):
        kps = tuple(self.keypoints)
        cams = tuple(self.cameras)
        if len(kps) != len(cams):
            raise ValidationError("one keypoint frame per camera is required")
        if len(kps) < 2:
            raise ValidationError("multi-view observations need at least two views")
        if len({k.points.shape for k in kps}) != 1:
            raise ValidationError("all views must carry the same keypoint layout")
        object.__setattr__(self, "keypoints", kps)
        object.__setattr__(self, "cameras", cams)

    @property
    def pixels(self):
        return np.stack([k.points for k in self.keypoints])

    @property
    def confidence(self):
        return np.stack([k.confidence for k in self.keypoints])


def triangulate_frame(observation, cutoff=0.0):
    """Triangulate every keypoint of one frame.

    Returns:
        points (N, 3) with NaN rows for keypoints that cannot be triangulated,
        and per-keypoint RMS residuals (NaN where undefined).
    """
    pix, conf = observation.pixels, observation.confidence
    n = pix.shape[1]
    points = np.full((n, 3), np.nan)
    residual = np.full(n, np.nan)
    for k in range(n):
        try:
            points[k], residual[k] = triangulate(pix[:, k], observation.cameras, conf[:, k], cutoff)
        except (UnderconstrainedError, DegenerateGeometryError):
            continue
    return points, residual


@dataclass(frozen=True)
class BoneGraph:
    """Rigid keypoint pairs with target lengths; ``gauge_edge`` fixes the global scale."""

    edges: np.ndarray
    lengths: np.ndarray
    gauge_edge: int = 0

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        ln = np.asarray(self.lengths, dtype=float).reshape(-1)
        if len(e) != len(ln):
            raise ValidationError("one target length per edge is required")
        if np.any(~np.isfinite(ln)) or np.any(ln <= 0):
            raise ValidationError("bone lengths must be positive")
        if len(e) and not 0 <= self.gauge_edge < len(e):
            raise ValidationError("gauge_edge out of range")
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "lengths", ln)

    @classmethod
    def from_skeleton(cls, skeleton=None, shape=None):
        """Rigid pairs among whole-body keypoints: parent-child bones and siblings.

        Both kinds keep a pose-independent distance. The inter-hip pair comes
        first and serves as the scale gauge.
        """
        from .skeleton import forward_kinematics_raw

        skeleton = skeleton or default_skeleton()
        scales = skeleton.bone_scales(shape or BodyShape())
        rest = forward_kinematics_raw(np.zeros((skeleton.rotation_joint_count, 3)), np.zeros(3), np.zeros(3),
                                      skeleton, scales)
        wb = skeleton.wholebody_index
        kp_of = {}
        for kp in np.flatnonzero(wb >= 0):
            kp_of.setdefault(int(wb[kp]), int(kp))
        pairs = []
        joints = sorted(kp_of)
        for a in joints:
            for b in joints:
                if a >= b:
                    continue
                pa, pb = skeleton.parents[a], skeleton.parents[b]
                if pa == b or pb == a or (pa == pb and pa >= 0):
                    pairs.append((kp_of[a], kp_of[b], float(np.linalg.norm(rest[a] - rest[b]))))
        hips = {kp_of[skeleton.index("left_hip")], kp_of[skeleton.index("right_hip")]}
        pairs.sort(key=lambda p: (set(p[:2]) != hips, p[0], p[1]))
        return cls(np.array([p[:2] for p in pairs]), np.array([p[2] for p in pairs]), 0)

    def measure(self, points):
        """Edge lengths (..., E) of points (..., N, 3)."""
        p = np.asarray(points, dtype=float)
        return np.linalg.norm(p[..., self.edges[:, 0], :] - p[..., self.edges[:, 1], :], axis=-1)


@dataclass(frozen=True)
class BAWeights:
    temporal: float = 1.0
    bone: float = 1.0
    gauge: float = 1e4

    def __post_init__(self):
        if min(self.temporal, self.bone, self.gauge) < 0:
            raise ValidationError("bundle-adjustment weights must be non-negative")


@dataclass(frozen=True)
class BAConfig:
    iterations: int = 100
    tolerance: float = 1e-12
    confidence_cutoff: float = 0.0
    optimize_cameras: bool = True


@dataclass
class BAResult:
    cameras: tuple
    points: np.ndarray
    trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


class _Problem:
    def __init__(self, observations, init_points, bones, weights, config):
        self.cams0 = observations[0].cameras
        self.n_views = len(self.cams0)
        self.pix = np.stack([o.pixels for o in observations])  # (T, V, N, 2)
        self.conf = np.stack([o.confidence for o in observations])  # (T, V, N)
        self.points0 = np.asarray(init_points, dtype=float)
        t_len, n = self.points0.shape[:2]
        if self.pix.shape[:1] + self.pix.shape[2:3] != (t_len, n):
            raise ValidationError("initial points must match the observation layout")
        self.active = np.all(np.isfinite(self.points0), axis=-1)  # (T, N)
        self.col = -np.ones((t_len, n), dtype=np.int64)
        self.cam_vars = 6 * (self.n_views - 1) if config.optimize_cameras else 0
        self.col[self.active] = self.cam_vars + 3 * np.arange(int(self.active.sum()))
        self.n_vars = self.cam_vars + 3 * int(self.active.sum())
        self.bones = bones
        self.weights = weights
        self.config = config
        obs = (self.conf > config.confidence_cutoff) & np.all(np.isfinite(self.pix), axis=-1)
        self.obs = obs & self.active[:, None, :]
        views = self.obs.sum(1)
        weak = self.active & (views < 2)
        if weak.any() and weights.temporal == 0 and (bones is None or weights.bone == 0):
            raise UnderconstrainedError(f"{int(weak.sum())} points are seen by fewer than two views")

    def residuals(self, state, with_jacobian=True):
        rots, trans, points = state
        w, cfg = self.weights, self.config
        res, rows, cols, vals = [], [], [], []
        n_row = 0

        def add(r, jblocks):
            nonlocal n_row
            r = np.asarray(r).reshape(-1)
            res.append(r)
            if with_jacobian:
                for rr, cc, vv in jblocks:
                    rows.append(rr + n_row)
                    cols.append(cc)
                    vals.append(vv)
            n_row += len(r)

        # reprojection
        for v, cam in enumerate(self.cams0):
            tt, kk = np.nonzero(self.obs[:, v])
            if not len(tt):
                continue
            p = points[tt, kk]
            rp = p @ rots[v].T
            pc = rp + cam.scale * trans[v]
            pix, dpix = project_camera_points(cam.intrinsics, pc)
            sw = np.sqrt(self.conf[tt, v, kk])
            r = sw[:, None] * (pix - self.pix[tt, v, kk])
            blocks = []
            if with_jacobian:
                m = len(tt)
                base = 2 * np.arange(m)
                jp = sw[:, None, None] * (dpix @ rots[v])
                blocks.append(_dense_block(base, self.col[tt, kk], jp))
                if cfg.optimize_cameras and v > 0:
                    c0 = 6 * (v - 1)
                    jw = sw[:, None, None] * (dpix @ -skew(rp))
                    jt = sw[:, None, None] * dpix * cam.scale
                    blocks.append(_dense_block(base, np.full(m, c0), np.concatenate([jw, jt], axis=2)))
            add(r, blocks)
        # temporal smoothness
        if w.temporal > 0 and len(points) > 1:
            tt, kk = np.nonzero(self.active[1:] & self.active[:-1])
            s = np.sqrt(w.temporal)
            r = s * (points[tt + 1, kk] - points[tt, kk])
            m = len(tt)
            eye = np.broadcast_to(s * np.eye(3), (m, 3, 3))
            base = 3 * np.arange(m)
            add(r, [_dense_block(base, self.col[tt + 1, kk], eye), _dense_block(base, self.col[tt, kk], -eye)])
        # bone lengths and scale gauge
        if self.bones is not None and len(self.bones.edges):
            e = self.bones.edges
            if w.bone > 0:
                tt, ee = np.nonzero(self.active[:, e[:, 0]] & self.active[:, e[:, 1]])
                add(*self._bone_terms(points, tt, e[ee], self.bones.lengths[ee], np.sqrt(w.bone), with_jacobian))
            if w.gauge > 0 and self.config.optimize_cameras:
                g = self.bones.gauge_edge
                frames = np.flatnonzero(self.active[:, e[g, 0]] & self.active[:, e[g, 1]])
                if len(frames):
                    add(*self._bone_terms(points, frames[:1], e[g][None], self.bones.lengths[g:g + 1],
                                          np.sqrt(w.gauge), with_jacobian))
        r = np.concatenate(res) if res else np.zeros(0)
        if not with_jacobian:
            return r
        if rows:
            jac = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                shape=(len(r), self.n_vars))
        else:
            jac = sp.csr_matrix((len(r), self.n_vars))
        return r, jac

    def _bone_terms(self, points, tt, edges, lengths, s, with_jacobian):
        d = points[tt, edges[:, 0]] - points[tt, edges[:, 1]]
        dist = np.linalg.norm(d, axis=-1)
        r = s * (dist - lengths)
        blocks = []
        if with_jacobian:
            u = (s * d / np.maximum(dist, 1e-300)[:, None])[:, None, :]
            base = np.arange(len(tt))
            blocks = [_dense_block(base, self.col[tt, edges[:, 0]], u),
                      _dense_block(base, self.col[tt, edges[:, 1]], -u)]
        return r, blocks

    def apply(self, state, step):
        rots, trans, points = state
        rots, trans, points = list(rots), list(trans), points.copy()
        if self.config.optimize_cameras:
            for v in range(1, self.n_views):
                d = step[6 * (v - 1):6 * v]
                rots[v] = axis_angle_to_matrix(d[:3]) @ rots[v]
                trans[v] = trans[v] + d[3:]
        points[self.active] += step[self.cam_vars:].reshape(-1, 3)
        return rots, trans, points


def _dense_block(row_base, col_base, block):
    """Sparse triplets for per-item dense blocks (m, r, c) at given row/column offsets."""
    m, nr, nc = block.shape
    rr = row_base[:, None, None] + np.arange(nr)[None, :, None]
    cc = col_base[:, None, None] + np.arange(nc)[None, None, :]
    rr, cc = np.broadcast_arrays(rr, cc)
    return rr.reshape(-1), cc.reshape(-1), block.reshape(-1)


def bundle_adjust(observations, init_points, bone_graph=None, weights=None, config=None):
    """Jointly refine rig cameras and a 3D keypoint sequence.

    Minimizes the confidence-weighted squared reprojection error plus
    ``temporal`` * sum |P_{t+1} - P_t|^2 plus ``bone`` * sum (|P_i - P_j| - L)^2
    with Levenberg-Marquardt. The first camera is frozen and, when cameras are
    refined, the gauge edge of ``bone_graph`` pins the global scale (its length
    in the first frame where it is visible).

    Args:
        observations: sequence of MultiViewObservation over a static rig.
        init_points: (T, N, 3) initial points; NaN rows are left out.

    Returns:
        BAResult with refined cameras, points and the accepted objective trace.
    """
    weights = weights or BAWeights()
    config = config or BAConfig()
    observations = list(observations)
    if not observations:
        raise ValidationError("bundle adjustment needs at least one frame")
    if config.optimize_cameras and (bone_graph is None or not len(bone_graph.edges) or weights.gauge == 0):
        raise UnderconstrainedError("refining cameras needs a bone graph with a gauge edge to fix the scale")
    prob = _Problem(observations, init_points, bone_graph, weights, config)
    cams = prob.cams0
    state = ([c.rotation.copy() for c in cams], [c.translation.copy() for c in cams], prob.points0.copy())
    r, jac = prob.residuals(state)
    f = float(r @ r)
    trace = [f]
    mu = None
    it = 0
    converged = False
    for it in range(1, config.iterations + 1):
        if f <= 1e-30:
            converged = True
            break
        jtj = (jac.T @ jac).tocsc()
        g = jac.T @ r
        if mu is None:
            mu = 1e-4 * float(jtj.diagonal().max())
        while True:
            lhs = jtj + mu * sp.identity(prob.n_vars, format="csc")
            step = spsolve(lhs, -g)
            if not np.all(np.isfinite(step)):
                raise DegenerateGeometryError("normal equations are rank deficient")
            cand = prob.apply(state, step)
            r_new = prob.residuals(cand, with_jacobian=False)
            f_new = float(r_new @ r_new)
            if f_new < f:
                break
            mu *= 4.0
            if mu > 1e30:
                break
        if not f_new < f:
            converged = True
            break
        decrease = f - f_new
        state = cand
        r, jac = prob.residuals(state)
        f = float(r @ r)
        trace.append(f)
        mu = max(mu / 3.0, 1e-15)
        if decrease <= config.tolerance * f or np.abs(step).max() < 1e-15:
            converged = True
            break
    if not np.isfinite(f):
        raise DivergenceError("bundle adjustment objective became non-finite", trace)
    rots, trans, points = state
    out_cams = tuple(c.replace(rotation=_orthonormalize(rots[v]), translation=trans[v]) for v, c in enumerate(cams))
    logger.info("bundle adjustment: %d iterations, objective %.3e -> %.3e", it, trace[0], trace[-1])
    return BAResult(out_cams, points, trace, it, converged)


def _orthonormalize(r):
    u, _, vt = np.linalg.svd(r)
    m = u @ vt
    if np.linalg.det(m) < 0:
        u[:, -1] *= -1
        m = u @ vt
    return m


def ba_objective(observations, cameras, points, bone_graph=None, weights=None, config=None):
    """Objective value for the given cameras and points (same terms as :func:`bundle_adjust`)."""
    weights = weights or BAWeights()
    config = config or BAConfig()
    prob = _Problem(list(observations), points, bone_graph, weights, config)
    state = ([c.rotation for c in cameras], [c.translation for c in cameras], np.asarray(points, dtype=float))
    r = prob.residuals(state, with_jacobian=False)
    return float(r @ r)


def observations_from_points(points, cameras, confidence=None, frame_offset=0):
    """Noiseless multi-view observations of a point sequence (T, N, 3); NaN points get confidence 0."""
    points = np.asarray(points, dtype=float)
    out = []
    for t, frame in enumerate(points):
        seen = np.all(np.isfinite(frame), axis=-1)
        kps = []
        for cam in cameras:
            pix = np.zeros((len(frame), 2))
            pc = frame[seen] @ cam.rotation.T + cam.scale * cam.translation
            pix[seen], _ = project_camera_points(cam.intrinsics, pc)
            conf = np.ones(len(frame)) if confidence is None else np.asarray(confidence[t], dtype=float).copy()
            conf[~seen] = 0.0
            kps.append(KeypointFrame2D(pix, conf))
        out.append(MultiViewObservation(tuple(kps), tuple(cameras), frame_offset + t))
    return out


def rig_camera(center, target, focal=1000.0, size=(1024, 1024), up=(0.0, 1.0, 0.0)):
    """Camera at ``center`` looking at ``target`` (image y pointing down)."""
    center = np.asarray(center, dtype=float)
    fwd = np.asarray(target, dtype=float) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    return CameraState.simple(focal, size[0] / 2, size[1] / 2, rotation=r, translation=-r @ center)
