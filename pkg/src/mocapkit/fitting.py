"""Local whole-body fitting to smoothed 2D/3D keypoints.

The objective is

    L = l_joint * L_joint + l_smooth * L_smooth + l_pen * L_pen + l_phy * L_phy

with L1 keypoint/prior/smoothness terms, a joint-sphere collision hinge and
a joint-limit hinge. The optimizer works on a Huber-smoothed copy of the
L1 terms; the reported loss functions are exact.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.linalg import cho_factor, cho_solve

from .camera import DEPTH_EPS, as_torch_cameras, torch_project
from .errors import ProjectionError, ValidationError
from .model import BodyShape, KeypointFrame2D, KeypointFrame3D, WholeBodyPose
from .optim import adaptive_descent
from .skeleton import default_skeleton, fk_jacobian, fk_torch

logger = logging.getLogger(__name__)

DTYPE = torch.float64
ROT_SLICE = slice(3, 3 + 66 + 3 + 90)  # theta_body, theta_jaw, theta_hand: the 53 rotation rows in order


@dataclass(frozen=True)
class FittingTargets:
    k2d: KeypointFrame2D
    k3d: KeypointFrame3D
    cameras: tuple

    def __post_init__(self):
        cams = tuple(self.cameras)
        t = self.k2d.points.shape[0]
        if len(cams) == 1 and t > 1:
            cams = cams * t
        if self.k3d.points.shape[0] != t or len(cams) != t:
            raise ValidationError("2D targets, 3D targets and cameras must cover the same frames")
        object.__setattr__(self, "cameras", cams)

    def __len__(self):
        return self.k2d.points.shape[0]


@dataclass(frozen=True)
class LossWeights:
    joint: float = 1.0
    smooth: float = 0.5
    pen: float = 1.0
    phy: float = 1.0

    def __post_init__(self):
        if min(self.joint, self.smooth, self.pen, self.phy) < 0:
            raise ValidationError("loss weights must be non-negative")


@dataclass(frozen=True)
class PenetrationSpheres:
    radii: np.ndarray
    excluded: frozenset = frozenset()

    def __post_init__(self):
        r = np.asarray(self.radii, dtype=float)
        if np.any(r <= 0):
            raise ValidationError("sphere radii must be positive")
        object.__setattr__(self, "radii", r)
        object.__setattr__(self, "excluded", frozenset(tuple(sorted(p)) for p in self.excluded))

    def pairs(self):
        n = len(self.radii)
        a, b = np.triu_indices(n, k=1)
        keep = np.array([(i, j) not in self.excluded for i, j in zip(a.tolist(), b.tolist())], dtype=bool)
        return a[keep], b[keep]


@dataclass(frozen=True)
class JointLimits:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValidationError("joint limits need min < max on every channel")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings.

    ``method="gauss_newton"`` runs damped Gauss-Newton on the Huber majorizer
    (one linear solve per iteration); ``method="adaptive"`` runs the
    first-order adaptive-moment descent with step size ``lr``.
    """

    method: str = "gauss_newton"
    lr: float = 1e-2
    iterations: int = 500
    huber_delta: float = 1e-4
    tolerance: float = 1e-6
    monotone: bool = True

    def __post_init__(self):
        if self.method not in ("gauss_newton", "adaptive"):
            raise ValidationError(f"unknown fitting method {self.method!r}")
        if self.iterations < 1 or self.huber_delta <= 0:
            raise ValidationError("iterations must be >= 1 and huber_delta > 0")


@dataclass
class FitResult:
    poses: WholeBodyPose
    trace: list = field(default_factory=list)
    initial_loss: float = 0.0
    final_loss: float = 0.0


def default_spheres(skeleton=None, exclude_within=2):
    """Joint spheres sized by body region; pairs within ``exclude_within`` tree edges are ignored."""
    skeleton = skeleton or default_skeleton()
    radii = np.full(skeleton.joint_count, 0.04)
    for j in skeleton.group("hand"):
        radii[j] = 0.006
    for j in skeleton.group("face"):
        radii[j] = 0.01
    for name in ("left_wrist", "right_wrist"):
        radii[skeleton.index(name)] = 0.02
    for name in ("left_heel", "right_heel", "left_foot", "right_foot"):
        radii[skeleton.index(name)] = 0.02
    excluded = set()
    n = skeleton.joint_count
    for i in range(n):
        for j in range(i + 1, n):
            if skeleton.tree_distance(i, j) <= exclude_within:
                excluded.add((i, j))
    return PenetrationSpheres(radii, frozenset(excluded))


def default_limits(skeleton=None):
    """Generous per-axis limits; knees and elbows get a tighter hyper-extension bound."""
    skeleton = skeleton or default_skeleton()
    n = skeleton.rotation_joint_count
    lower = np.full((n, 3), -np.pi)
    upper = np.full((n, 3), np.pi)
    for side in ("left", "right"):
        k = skeleton.index(f"{side}_knee")
        lower[k] = [-0.3, -0.5, -0.5]
        upper[k] = [2.8, 0.5, 0.5]
    return JointLimits(lower, upper)


def _penalty(x, delta):
    """|x| when delta is None, else the Huber function with threshold delta."""
    if delta is None:
        return x.abs()
    ax = x.abs()
    return torch.where(ax < delta, 0.5 * x * x / delta, ax - 0.5 * delta)


class FittingProblem:
    """Tensorized objective for one pose sequence."""

    def __init__(self, init, targets, weights=None, skeleton=None, shape=None, spheres=None, limits=None):
        self.skeleton = skeleton or default_skeleton()
        self.weights = weights or LossWeights()
        self.spheres = spheres or default_spheres(self.skeleton)
        self.limits = limits or default_limits(self.skeleton)
        shape = shape or BodyShape()
        self.scales = torch.as_tensor(self.skeleton.bone_scales(shape), dtype=DTYPE)
        self.init = torch.as_tensor(np.atleast_2d(init.to_vector()), dtype=DTYPE)
        t = self.init.shape[0]
        if len(targets) != t:
            raise ValidationError(f"targets cover {len(targets)} frames but init has {t}")
        self.k3d = torch.as_tensor(targets.k3d.points, dtype=DTYPE)
        if self.k3d.shape[1] != self.skeleton.joint_count:
            raise ValidationError("3D targets must have one point per skeleton joint")
        self.m3d = torch.as_tensor(targets.k3d.confidence > 0, dtype=DTYPE)[..., None]
        wb = self.skeleton.wholebody_index
        self.kp_idx = torch.as_tensor(np.flatnonzero(wb >= 0))
        self.kp_joint = torch.as_tensor(wb[wb >= 0])
        self.k2d = torch.as_tensor(targets.k2d.points, dtype=DTYPE)[:, self.kp_idx]
        self.m2d = torch.as_tensor(targets.k2d.confidence > 0, dtype=DTYPE)[:, self.kp_idx, None]
        self.cam_k, self.cam_r, self.cam_t, self.cam_s = as_torch_cameras(targets.cameras)
        pa, pb = self.spheres.pairs()
        self.pair_a = torch.as_tensor(pa)
        self.pair_b = torch.as_tensor(pb)
        self.pair_r = torch.as_tensor(self.spheres.radii[pa] + self.spheres.radii[pb], dtype=DTYPE)
        self.lim_lo = torch.as_tensor(self.limits.lower.reshape(-1), dtype=DTYPE)
        self.lim_hi = torch.as_tensor(self.limits.upper.reshape(-1), dtype=DTYPE)
        self.n_rot = self.skeleton.rotation_joint_count

    def joints(self, x):
        rot = x[:, ROT_SLICE].reshape(-1, self.n_rot, 3)
        return fk_torch(rot, x[:, 0:3], x[:, -3:], self.skeleton, bone_scales=self.scales)

    def project(self, joints):
        return torch_project(self.cam_k, self.cam_r, self.cam_t, joints, self.cam_s[:, None])

    # individual terms ------------------------------------------------------
    def term_joint(self, x, joints, delta=None):
        l3 = (_penalty(joints - self.k3d, delta) * self.m3d).sum()
        k2 = self.project(joints[:, self.kp_joint])
        l2 = (_penalty(k2 - self.k2d, delta) * self.m2d).sum()
        lp = _penalty(x - self.init, delta).sum()
        return l3 + l2 + lp

    def term_smooth(self, x, joints, delta=None):
        if x.shape[0] < 2:
            return x.new_zeros(())
        return _penalty(x[1:] - x[:-1], delta).sum() + _penalty(joints[1:] - joints[:-1], delta).sum()

    def term_pen(self, joints):
        diff = joints[:, self.pair_a] - joints[:, self.pair_b]
        dist = torch.sqrt((diff * diff).sum(-1) + 1e-24)
        return torch.relu(self.pair_r - dist).pow(2).sum()

    def term_phy(self, x):
        rot = self._rotation_channels(x)
        return (torch.relu(rot - self.lim_hi).pow(2) + torch.relu(self.lim_lo - rot).pow(2)).sum()

    def _rotation_channels(self, x):
        # limits are laid out per rotational joint: body rows, jaw, hand rows
        return x[:, ROT_SLICE]

    def terms(self, x, delta=None):
        joints = self.joints(x)
        return {
            "joint": self.term_joint(x, joints, delta),
            "smooth": self.term_smooth(x, joints, delta),
            "pen": self.term_pen(joints),
            "phy": self.term_phy(x),
        }

    def objective(self, x, delta=None):
        w = self.weights
        parts = self.terms(x, delta)
        return w.joint * parts["joint"] + w.smooth * parts["smooth"] + w.pen * parts["pen"] + w.phy * parts["phy"]

    def features(self, x):
        """Per-frame joints and projected keypoints, flattened to (T, 3J + 2K)."""
        joints = self.joints(x)
        k2 = self.project(joints[:, self.kp_joint])
        return torch.cat([joints.reshape(len(x), -1), k2.reshape(len(x), -1)], dim=1)

    def feature_jacobian(self, x):
        """Features and their (T, 3J + 2K, POSE_DIM) per-frame Jacobian in closed form."""
        xn = x.detach().numpy()
        t_len, n = xn.shape
        n_joint = self.skeleton.joint_count
        rot = xn[:, ROT_SLICE].reshape(t_len, self.n_rot, 3)
        pos, d_go, d_rot = fk_jacobian(rot, xn[:, 0:3], xn[:, -3:], self.skeleton, self.scales.numpy())
        jj = np.zeros((t_len, n_joint, 3, n))
        jj[..., 0:3] = d_go
        jj[..., ROT_SLICE] = d_rot.reshape(t_len, n_joint, 3, -1)
        jj[..., n - 3:] = np.eye(3)
        kp = self.kp_joint.numpy()
        r_cam, k_cam = self.cam_r.numpy(), self.cam_k.numpy()
        pc = np.einsum("tab,tjb->tja", r_cam, pos[:, kp]) + (self.cam_s.numpy()[:, None] * self.cam_t.numpy())[:, None]
        if np.any(pc[..., 2] <= DEPTH_EPS):
            raise ProjectionError("point at or behind the camera plane")
        z = pc[..., 2]
        uv = pc[..., :2] / z[..., None]
        k2d = np.einsum("tab,tjb->tja", k_cam[:, :, :2], uv) + k_cam[:, None, :, 2]
        dnorm = np.zeros(pc.shape[:2] + (2, 3))
        dnorm[..., 0, 0] = 1.0 / z
        dnorm[..., 1, 1] = 1.0 / z
        dnorm[..., :, 2] = -uv / z[..., None]
        dproj = k_cam[:, None, :, :2] @ dnorm @ r_cam[:, None]  # (T, K, 2, 3)
        j2 = dproj @ jj[:, kp]
        feats = np.concatenate([pos.reshape(t_len, -1), k2d.reshape(t_len, -1)], axis=1)
        jac = np.concatenate([jj.reshape(t_len, -1, n), j2.reshape(t_len, -1, n)], axis=1)
        return feats, jac

    def vector(self, poses):
        return torch.as_tensor(np.atleast_2d(poses.to_vector()), dtype=DTYPE)


def loss_joint(params, init, targets, skeleton=None, shape=None):
    """Exact L1 joint loss: 3D keypoints + projected 2D keypoints + parameter prior."""
    prob = FittingProblem(init, targets, skeleton=skeleton, shape=shape)
    with torch.no_grad():
        x = prob.vector(params)
        return float(prob.term_joint(x, prob.joints(x)))


def loss_smooth(params, joints):
    """Sum of L1 norms of consecutive-frame parameter and joint differences."""
    x = np.atleast_2d(params.to_vector())
    j = np.asarray(joints, dtype=float)
    if len(x) < 2:
        return 0.0
    return float(np.abs(np.diff(x, axis=0)).sum() + np.abs(np.diff(j, axis=0)).sum())


def loss_penetration(joints, spheres):
    """Sum over non-excluded joint pairs and frames of max(0, r_i + r_j - d_ij)^2."""
    j = np.asarray(joints, dtype=float)
    if j.ndim == 2:
        j = j[None]
    if len(spheres.radii) != j.shape[1]:
        raise ValidationError("one radius per joint is required")
    a, b = spheres.pairs()
    dist = np.linalg.norm(j[:, a] - j[:, b], axis=-1)
    return float((np.maximum(0.0, spheres.radii[a] + spheres.radii[b] - dist) ** 2).sum())


def loss_physical(params, limits):
    """Squared hinge on joint-limit violations of every rotation channel."""
    rot = np.atleast_3d(params.rotations()).reshape(-1, *limits.lower.shape)
    if rot.shape[1:] != limits.lower.shape:
        raise ValidationError("limits must cover every rotation channel")
    return float((np.maximum(0.0, rot - limits.upper) ** 2 + np.maximum(0.0, limits.lower - rot) ** 2).sum())


def total_loss(params, init, targets, weights=None, skeleton=None, shape=None, spheres=None, limits=None):
    """Weighted sum of the four exact loss terms."""
    prob = FittingProblem(init, targets, weights, skeleton, shape, spheres, limits)
    with torch.no_grad():
        return float(prob.objective(prob.vector(params)))


def total_loss_and_grad(params, init, targets, weights=None, skeleton=None, shape=None, spheres=None,
                        limits=None, delta=None):
    """Total loss and its gradient with respect to the flat pose vectors (T, POSE_DIM).

    With ``delta=None`` the exact L1 objective is differentiated (valid away
    from kinks); otherwise the Huber surrogate used by the optimizer.
    """
    prob = FittingProblem(init, targets, weights, skeleton, shape, spheres, limits)
    return surrogate_value_and_grad(prob, prob.vector(params), delta)


def surrogate_value_and_grad(prob, x, delta=1e-4):
    """Objective (Huber-smoothed unless ``delta`` is None) and its autograd gradient at ``x`` (T, POSE_DIM)."""
    x = torch.as_tensor(x, dtype=DTYPE).detach().requires_grad_(True)
    f = prob.objective(x, delta)
    (g,) = torch.autograd.grad(f, x)
    return float(f.detach()), g.numpy()


def _huber_weights(r, delta):
    return 1.0 / np.maximum(np.abs(r), delta)


def _weighted_gram(a, w, b):
    """Per-frame a_t^T diag(w_t) b_t for stacks (T, m, n)."""
    return np.matmul(np.swapaxes(a * w[..., None], 1, 2), b)


def _solve_block_tridiagonal(diag, off, rhs):
    """Solve a symmetric positive-definite block-tridiagonal system.

    ``diag`` (T, n, n), ``off`` (T-1, n, n) holding block (t, t+1), ``rhs`` (T, n).
    """
    t_len = len(diag)
    factors, carry, y = [], [], []
    for t in range(t_len):
        s = diag[t].copy()
        b = rhs[t].copy()
        if t > 0:
            s -= off[t - 1].T @ carry[t - 1]
            b -= off[t - 1].T @ y[t - 1]
        c = cho_factor(s)
        factors.append(c)
        if t < t_len - 1:
            carry.append(cho_solve(c, off[t]))
        y.append(cho_solve(c, b))
    out = np.empty_like(rhs)
    out[-1] = y[-1]
    for t in range(t_len - 2, -1, -1):
        out[t] = y[t] - carry[t] @ out[t + 1]
    return out


def _normal_blocks(prob, x, delta):
    """Gauss-Newton blocks of the Huber-majorized objective at ``x``."""
    w = prob.weights
    feats, jac = prob.feature_jacobian(x)
    xn = x.detach().numpy()
    t_len, n = xn.shape
    n3 = 3 * prob.skeleton.joint_count
    tgt = np.concatenate([prob.k3d.numpy().reshape(t_len, -1), prob.k2d.numpy().reshape(t_len, -1)], axis=1)
    mask = np.concatenate([np.repeat(prob.m3d.numpy()[..., 0], 3, axis=1),
                           np.repeat(prob.m2d.numpy()[..., 0], 2, axis=1)], axis=1)
    cw = w.joint * mask * _huber_weights(feats - tgt, delta)
    diag = _weighted_gram(jac, cw, jac)
    prior = w.joint * _huber_weights(xn - prob.init.numpy(), delta)
    diag[:, np.arange(n), np.arange(n)] += prior
    off = np.zeros((max(t_len - 1, 0), n, n))
    if t_len > 1 and w.smooth > 0:
        pw = w.smooth * _huber_weights(np.diff(xn, axis=0), delta)
        jw = w.smooth * _huber_weights(np.diff(feats[:, :n3], axis=0), delta)
        jj = jac[:, :n3]
        idx = np.arange(n)
        diag[:-1, idx, idx] += pw
        diag[1:, idx, idx] += pw
        off[:, idx, idx] -= pw
        diag[:-1] += _weighted_gram(jj[:-1], jw, jj[:-1])
        diag[1:] += _weighted_gram(jj[1:], jw, jj[1:])
        off -= _weighted_gram(jj[:-1], jw, jj[1:])
    if w.pen > 0 and len(prob.pair_a):
        joints = feats[:, :n3].reshape(t_len, -1, 3)
        jj = jac[:, :n3].reshape(t_len, -1, 3, n)
        a, b = prob.pair_a.numpy(), prob.pair_b.numpy()
        diff = joints[:, a] - joints[:, b]
        dist = np.linalg.norm(diff, axis=-1)
        tk, kk = np.nonzero(dist < prob.pair_r.numpy())
        if len(tk):
            u = diff[tk, kk] / np.maximum(dist[tk, kk], 1e-12)[:, None]
            rows = np.einsum("kc,kcn->kn", u, jj[tk, a[kk]] - jj[tk, b[kk]])
            for t in np.unique(tk):
                r = rows[tk == t]
                diag[t] += 2.0 * w.pen * (r.T @ r)
    if w.phy > 0:
        rot = xn[:, ROT_SLICE]
        hit = (rot > prob.lim_hi.numpy()) | (rot < prob.lim_lo.numpy())
        cols = np.arange(n)[ROT_SLICE]
        diag[:, cols, cols] += 2.0 * w.phy * hit
    return diag, off


def gauss_newton(prob, x0, iterations=500, delta=1e-4, tolerance=1e-6):
    """Damped Gauss-Newton (iteratively reweighted) on the Huber surrogate.

    Steps that do not lower the surrogate are rejected and the damping
    raised, so the returned trace is non-increasing.
    """
    from .optim import OptimResult, value_and_grad

    fun = lambda x: prob.objective(x, delta)  # noqa: E731
    x = x0.detach().clone()
    f, g = value_and_grad(fun, x)
    trace = [float(f)]
    damping = 1e-6
    diag = off = None
    it = 0
    for it in range(1, iterations + 1):
        if diag is None:
            diag, off = _normal_blocks(prob, x, delta)
        gn = g.numpy()
        scale = np.einsum("tii->ti", diag)
        damped = diag.copy()
        idx = np.arange(diag.shape[1])
        damped[:, idx, idx] += damping * scale + 1e-12
        step = _solve_block_tridiagonal(damped, off, -gn)
        candidate = x + torch.as_tensor(step, dtype=DTYPE)
        with torch.no_grad():
            f_new = fun(candidate)
        if torch.isfinite(f_new) and f_new <= f:
            decrease = float(f - f_new)
            x = candidate
            f, g = value_and_grad(fun, x)
            trace.append(float(f))
            diag = None
            damping = max(damping / 3.0, 1e-12)
            if decrease <= tolerance * max(1.0, float(f)):
                return OptimResult(x, trace, it, converged=True)
        else:
            damping *= 4.0
            if damping > 1e12:
                return OptimResult(x, trace, it, converged=True)
    return OptimResult(x, trace, it, converged=False)


def fit_sequence(init, targets, weights=None, config=None, skeleton=None, shape=None, spheres=None, limits=None):
    """Fit pose parameters to targets starting from (and regularized toward) ``init``.

    Returns:
        FitResult with fitted poses and the monotone surrogate-loss trace.
    """
    config = config or FitConfig()
    prob = FittingProblem(init, targets, weights, skeleton, shape, spheres, limits)
    x0 = prob.init.clone()
    with torch.no_grad():
        f0 = float(prob.objective(x0))
    if not np.isfinite(f0):
        raise ValidationError("total loss is not finite at the initialization")
    if config.method == "gauss_newton":
        res = gauss_newton(prob, x0, config.iterations, config.huber_delta, config.tolerance)
    else:
        res = adaptive_descent(lambda x: prob.objective(x, config.huber_delta), x0,
                               lr=config.lr, iterations=config.iterations, monotone=config.monotone)
    with torch.no_grad():
        f1 = float(prob.objective(res.x))
    x = res.x
    if f1 > f0:
        # the surrogate and exact objectives can disagree by O(delta) per residual
        x, f1 = x0, f0
    logger.info("fit: %d frames, loss %.6g -> %.6g in %d iterations", len(x), f0, f1, res.iterations)
    poses = WholeBodyPose.from_vector(x.numpy().reshape(np.atleast_2d(init.to_vector()).shape))
    if init.batch_shape == ():
        poses = poses.frame(0)
    return FitResult(poses, res.trace, f0, f1)


def targets_from_poses(poses, cameras, skeleton=None, shape=None):
    """Exact 3D/2D targets (full confidence on mapped keypoints) generated from poses."""
    skeleton = skeleton or default_skeleton()
    vec = np.atleast_2d(poses.to_vector())
    t_len = len(vec)
    cameras = tuple(cameras) if isinstance(cameras, (list, tuple)) else (cameras,)
    if len(cameras) == 1:
        cameras = cameras * t_len
    scales = skeleton.bone_scales(shape or BodyShape())
    with torch.no_grad():
        x = torch.as_tensor(vec, dtype=DTYPE)
        joints = fk_torch(x[:, ROT_SLICE].reshape(t_len, -1, 3), x[:, 0:3], x[:, -3:], skeleton, scales)
        k, r, t, s = as_torch_cameras(cameras)
        wb = skeleton.wholebody_index
        proj = torch_project(k, r, t, joints[:, wb[wb >= 0]], s[:, None]).numpy()
    joints = joints.numpy()
    k2d = np.zeros((t_len, len(wb), 2))
    c2d = np.zeros((t_len, len(wb)))
    k2d[:, wb >= 0] = proj
    c2d[:, wb >= 0] = 1.0
    return FittingTargets(KeypointFrame2D(k2d, c2d), KeypointFrame3D(joints, np.ones(joints.shape[:2])), cameras)
