"""Global human trajectory: robust reprojection refinement and foot-contact cleanup.

Stage I refines per-frame global orientation and root translation against
2D keypoints with a joint smoothness prior. Stage II drops the smoothness
prior and adds a zero-velocity term for feet in contact and a hinge keeping
contact joints near a jointly optimized ground plane.
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from ..camera import as_torch_cameras, torch_project
from ..errors import ProjectionError, ValidationError
from ..model import BodyShape, WholeBodyPose
from ..skeleton import default_skeleton, fk_torch

logger = logging.getLogger(__name__)

DTYPE = torch.float64
FOOT_JOINT_NAMES = ("left_ankle", "right_ankle", "left_foot", "right_foot", "left_heel", "right_heel")


def foot_joints(skeleton=None):
    skeleton = skeleton or default_skeleton()
    return tuple(skeleton.index(n) for n in FOOT_JOINT_NAMES)


@dataclass(frozen=True)
class GroundPlane:
    """Plane {x : normal . x + offset = 0} with unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if n.shape != (3,) or abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValidationError("ground normal must be a unit 3-vector")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def from_vector(cls, normal, offset):
        n = np.asarray(normal, dtype=float)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise ValidationError("ground normal must be non-zero")
        return cls(n / norm, float(offset) / norm)

    def distance(self, points):
        """Unsigned point-to-plane distance."""
        return np.abs(np.asarray(points, dtype=float) @ self.normal + self.offset)


@dataclass(frozen=True)
class ContactModel:
    """Per-frame contact indicators for the foot joints and the thresholds used around them.

    ``contact[t, k]`` refers to foot joint ``foot_joints[k]`` and, for the
    velocity term, to the step from frame t to t+1.
    """

    contact: np.ndarray
    ground_plane: GroundPlane
    distance_threshold: float = 0.08
    velocity_threshold: float = 0.02
    height_threshold: float = 0.08
    foot_joints: tuple = None

    def __post_init__(self):
        c = np.asarray(self.contact, dtype=float)
        if c.ndim != 2 or np.any(c < 0) or np.any(c > 1):
            raise ValidationError("contact probabilities must form a (T, F) array in [0, 1]")
        joints = tuple(self.foot_joints) if self.foot_joints is not None else foot_joints()
        if c.shape[1] != len(joints):
            raise ValidationError("one contact column per foot joint is required")
        if min(self.distance_threshold, self.velocity_threshold, self.height_threshold) < 0:
            raise ValidationError("thresholds must be non-negative")
        object.__setattr__(self, "contact", c)
        object.__setattr__(self, "foot_joints", joints)


@dataclass(frozen=True)
class GlobalHumanState:
    """Per-frame global orientation and root translation over a fixed pose sequence."""

    global_orient: np.ndarray
    root_translation: np.ndarray
    poses: WholeBodyPose
    shape: BodyShape = field(default_factory=BodyShape)
    camera_scale: float = 1.0

    def __post_init__(self):
        go = np.asarray(self.global_orient, dtype=float)
        tr = np.asarray(self.root_translation, dtype=float)
        t = self.poses.batch_shape
        if len(t) != 1 or go.shape != (t[0], 3) or tr.shape != (t[0], 3):
            raise ValidationError("state needs (T, 3) orientation/translation matching a (T,) pose sequence")
        if not self.camera_scale > 0:
            raise ValidationError("camera scale must be positive")
        object.__setattr__(self, "global_orient", go)
        object.__setattr__(self, "root_translation", tr)

    @classmethod
    def from_poses(cls, poses, shape=None, camera_scale=1.0):
        return cls(poses.global_orient.copy(), poses.root_translation.copy(), poses, shape or BodyShape(),
                   camera_scale)

    def __len__(self):
        return len(self.global_orient)

    def replace(self, **changes):
        return replace(self, **changes)

    def to_poses(self):
        return self.poses.replace(global_orient=self.global_orient, root_translation=self.root_translation)


@dataclass(frozen=True)
class StageWeights:
    data: float = 1.0
    smooth: float = 100.0
    skate: float = 1000.0
    contact: float = 1000.0

    def __post_init__(self):
        if min(self.data, self.smooth, self.skate, self.contact) < 0:
            raise ValidationError("stage weights must be non-negative")


@dataclass(frozen=True)
class StageConfig:
    iterations: int = 300
    sigma: float = 10.0
    tolerance: float = 1e-10


@dataclass
class StageResult:
    state: GlobalHumanState
    joints: np.ndarray
    trace: list = field(default_factory=list)
    ground_plane: GroundPlane = None


# robust kernel ---------------------------------------------------------------

def geman_mcclure(residual, sigma):
    """sigma^2 |r|^2 / (sigma^2 + |r|^2) over the last axis of ``residual``."""
    if not sigma > 0:
        raise ValidationError("Geman-McClure scale must be positive")
    r = np.asarray(residual, dtype=float)
    sq = np.sum(r * r, axis=-1)
    s2 = sigma * sigma
    return s2 * sq / (s2 + sq)


def _gm_torch(residual, sigma):
    sq = (residual * residual).sum(-1)
    s2 = sigma * sigma
    return s2 * sq / (s2 + sq)


def _safe_norm(v):
    """Euclidean norm over the last axis with a zero (not NaN) gradient at the origin."""
    sq = (v * v).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


# tensor model ----------------------------------------------------------------

class _Model:
    def __init__(self, state, skeleton=None):
        self.skeleton = skeleton or default_skeleton()
        rot = np.atleast_2d(state.poses.to_vector())[:, 3:162]
        self.rot = torch.as_tensor(rot.reshape(len(state), -1, 3), dtype=DTYPE)
        self.scales = torch.as_tensor(self.skeleton.bone_scales(state.shape), dtype=DTYPE)
        self.alpha = state.camera_scale

    def joints(self, go, tr):
        return fk_torch(self.rot, go, tr, self.skeleton, bone_scales=self.scales)


def _data_term(model, joints, k2d, cams, sigma):
    wb = model.skeleton.wholebody_index
    sel = np.flatnonzero(wb >= 0)
    k, r, t, _ = cams
    proj = torch_project(k, r, t, joints[:, wb[sel]], model.alpha)
    target = torch.as_tensor(k2d.points[:, sel], dtype=DTYPE)
    conf = torch.as_tensor(k2d.confidence[:, sel], dtype=DTYPE)
    return (conf * _gm_torch(proj - target, sigma)).sum()


def _skate_term(j1, j2, contact, feet):
    c = contact[:-1]
    v2 = _safe_norm(j2[1:, feet] - j2[:-1, feet])
    v1 = _safe_norm(j1[1:, feet] - j1[:-1, feet])
    return (c * v2).sum() + ((1 - c) * v1).sum()


def _as_cameras(cameras, n):
    cameras = list(cameras)
    if len(cameras) == 1:
        cameras = cameras * n
    if len(cameras) != n:
        raise ValidationError(f"{len(cameras)} cameras for {n} frames")
    return as_torch_cameras(cameras)


# public losses -----------------------------------------------------------------

def global_joints(state, skeleton=None):
    """World joints (T, J, 3) of a global state."""
    model = _Model(state, skeleton)
    with torch.no_grad():
        return model.joints(torch.as_tensor(state.global_orient), torch.as_tensor(state.root_translation)).numpy()


def loss_data_global(state, k2d, cameras, sigma=10.0, skeleton=None):
    """Confidence-weighted Geman-McClure reprojection loss of the mapped whole-body keypoints."""
    if not sigma > 0:
        raise ValidationError("Geman-McClure scale must be positive")
    model = _Model(state, skeleton)
    with torch.no_grad():
        joints = model.joints(torch.as_tensor(state.global_orient), torch.as_tensor(state.root_translation))
        return float(_data_term(model, joints, k2d, _as_cameras(cameras, len(state)), sigma))


def loss_smooth_global(joints):
    """Sum of squared consecutive-frame joint differences."""
    j = np.asarray(joints, dtype=float)
    return float(np.sum(np.diff(j, axis=0) ** 2)) if len(j) > 1 else 0.0


def loss_skate(joints_stage1, joints_stage2, contacts, feet=None):
    """Contact-weighted stage-II foot speed plus the stage-I speed on non-contact steps.

    ``contacts`` is (T, F) aligned with ``feet`` (default: ankles, toes, heels).
    """
    feet = list(feet) if feet is not None else list(foot_joints())
    j1 = torch.as_tensor(np.asarray(joints_stage1, dtype=float))
    j2 = torch.as_tensor(np.asarray(joints_stage2, dtype=float))
    if j1.shape != j2.shape:
        raise ValidationError("stage-I and stage-II joints must be aligned")
    c = torch.as_tensor(np.asarray(contacts, dtype=float))
    return float(_skate_term(j1, j2, c, feet))


def loss_contact(joints, contacts, ground_plane, delta, feet=None):
    """Sum over frames and contact foot joints of max(distance to plane - delta, 0)."""
    feet = list(feet) if feet is not None else list(foot_joints())
    j = np.asarray(joints, dtype=float)
    c = np.asarray(contacts, dtype=float)
    return float(np.sum(c * np.maximum(ground_plane.distance(j[:, feet]) - delta, 0.0)))


def detect_foot_contact(joints, ground_plane, feet=None, height_threshold=0.08, velocity_threshold=0.02):
    """Binary contact per frame and foot joint from plane distance and forward speed.

    The speed of frame t is |J_{t+1} - J_t|; the last frame reuses the
    previous step.
    """
    feet = list(feet) if feet is not None else list(foot_joints())
    j = np.asarray(joints, dtype=float)[:, feet]
    if len(j) > 1:
        speed = np.linalg.norm(np.diff(j, axis=0), axis=-1)
        speed = np.concatenate([speed, speed[-1:]], axis=0)
    else:
        speed = np.zeros(j.shape[:2])
    near = ground_plane.distance(j) < height_threshold
    return (near & (speed < velocity_threshold)).astype(float)


def estimate_ground_plane(joints, feet=None, up_hint=(0.0, 1.0, 0.0), quantile=0.3, contacts=None):
    """Least-squares plane through foot-joint samples, normal oriented along ``up_hint``.

    With ``contacts`` (T, F) only in-contact toe and heel samples are used;
    otherwise the lowest ``quantile`` of all foot samples along ``up_hint``.
    """
    feet = list(feet) if feet is not None else list(foot_joints())
    up = np.asarray(up_hint, dtype=float)
    up = up / np.linalg.norm(up)
    j = np.asarray(joints, dtype=float)[:, feet]
    if contacts is not None:
        # ankles sit above the sole; toes and heels touch the ground
        names = default_skeleton().joint_names
        sole = [k for k, f in enumerate(feet) if "ankle" not in names[f]]
        c = np.asarray(contacts)[:, sole] > 0.5
        low = j[:, sole][c]
    else:
        pts = j.reshape(-1, 3)
        h = pts @ up
        low = pts[h <= np.quantile(h, quantile)]
    if len(low) == 0:
        raise ValidationError("no foot samples to fit a ground plane")
    center = low.mean(0)
    if len(low) < 3:
        return GroundPlane(up, -float(up @ center))
    _, s, vt = np.linalg.svd(low - center)
    n = vt[-1]
    if s[1] < 1e-9 * max(s[0], 1e-300):
        n = up  # collinear samples: fall back to the hint
    if n @ up < 0:
        n = -n
    return GroundPlane(n, -float(n @ center))


def camera_to_world(poses, world_to_camera, camera_scale=1.0):
    """Move camera-frame poses (T,) into the world given per-frame world-to-camera transforms (T, 4, 4).

    Joints satisfy x_cam = R x_world + camera_scale * T, so the global
    orientation becomes R^T R_go and the root R^T (root - camera_scale * T).
    """
    from scipy.spatial.transform import Rotation

    g = np.asarray(world_to_camera, dtype=float)
    t = poses.batch_shape[0]
    if g.shape != (t, 4, 4):
        raise ValidationError("one world-to-camera transform per frame is required")
    r = g[:, :3, :3]
    rt = np.swapaxes(r, 1, 2)
    go = Rotation.from_matrix(rt @ Rotation.from_rotvec(poses.global_orient).as_matrix()).as_rotvec()
    root = np.einsum("tab,tb->ta", rt, poses.root_translation - camera_scale * g[:, :3, 3])
    return poses.replace(global_orient=go, root_translation=root)


# optimization ------------------------------------------------------------------
#
# Both stages are solved by iteratively reweighted damped Gauss-Newton: every
# term is written as a weighted sum of squared residual blocks whose weights
# majorize the exact term at the current iterate (Geman-McClure via its
# derivative in |r|^2, norms via 1/(2|v|), the plane hinge via 1/(2|e|) on
# active entries). Steps are accepted only when the exact objective drops.

@dataclass
class _Blocks:
    """Residual blocks of one evaluation: name -> (residual (n, d), base weight (n,))."""

    items: dict

    def exact(self, sigma, delta):
        total = 0.0
        for name, (r, w) in self.items.items():
            if name == "data":
                val = _gm_torch(r, sigma)
            elif name == "smooth":
                val = (r * r).sum(-1)
            elif name == "skate":
                val = _safe_norm(r)
            else:  # plane hinge on signed distance
                val = torch.relu(r[:, 0].abs() - delta)
            total = total + (w * val).sum()
        return total

    def irls(self, sigma, floor):
        out = {}
        for name, (r, w) in self.items.items():
            r = r.detach()
            if name == "data":
                s2 = sigma * sigma
                out[name] = w * s2 * s2 / (s2 + (r * r).sum(-1)) ** 2
            elif name == "smooth":
                out[name] = w
            elif name == "skate":
                out[name] = w / (2 * torch.clamp(torch.linalg.norm(r, dim=-1), min=floor))
            else:
                e = r[:, 0].abs()
                out[name] = torch.where(e > floor, w / (2 * torch.clamp(e, min=floor)), torch.zeros_like(e))
        return out


def _weighted_vector(blocks_fn, weights):
    def fun(x):
        parts = []
        for name, (r, _) in blocks_fn(x).items.items():
            parts.append((torch.sqrt(weights[name])[:, None] * r).reshape(-1))
        return torch.cat(parts)
    return fun


def _irls_solve(blocks_fn, x0, sigma, delta, iterations, tolerance=1e-10, floor=1e-8):
    """Damped IRLS Gauss-Newton on ``blocks_fn``; returns (x, exact-objective trace)."""
    def exact(x):
        try:
            with torch.no_grad():
                return float(blocks_fn(x).exact(sigma, delta))
        except ProjectionError:
            return np.inf

    x = x0.detach().clone()
    f = exact(x)
    if not np.isfinite(f):
        raise ValidationError("objective is not finite at the initial point")
    trace = [f]
    mu = 1e-4
    for _ in range(iterations):
        w = blocks_fn(x).irls(sigma, floor)
        vec = _weighted_vector(blocks_fn, w)
        r = vec(x).detach()
        jac = torch.func.jacfwd(vec)(x).detach()
        h = jac.T @ jac
        g = jac.T @ r
        diag = torch.diagonal(h)
        improved = False
        while mu < 1e12:
            step = torch.linalg.solve(h + torch.diag(mu * diag + 1e-12), -g)
            f_new = exact(x + step)
            if f_new < f:
                improved = True
                break
            mu *= 4.0
        if not improved:
            break
        x = x + step
        decrease = f - f_new
        f = f_new
        trace.append(f)
        mu = max(mu / 3.0, 1e-10)
        if decrease <= tolerance * max(1.0, f):
            break
    return x, trace


def _stage1_blocks(state, k2d, cameras, weights, skeleton):
    model = _Model(state, skeleton)
    cams = _as_cameras(cameras, len(state))
    wb = model.skeleton.wholebody_index
    sel = np.flatnonzero(wb >= 0)
    target = torch.as_tensor(k2d.points[:, sel], dtype=DTYPE)
    conf = torch.as_tensor(k2d.confidence[:, sel], dtype=DTYPE).reshape(-1)
    k, r, t, _ = cams
    n = len(state)
    n_smooth = max(n - 1, 0) * model.skeleton.joint_count

    def joints_of(x):
        v = x[:6 * n].reshape(n, 6)
        return model.joints(v[:, :3], v[:, 3:])

    def data_block(joints):
        proj = torch_project(k, r, t, joints[:, wb[sel]], model.alpha)
        return (proj - target).reshape(-1, 2), weights.data * conf

    def fn(x):
        joints = joints_of(x)
        items = {"data": data_block(joints)}
        if weights.smooth > 0 and n_smooth:
            d = (joints[1:] - joints[:-1]).reshape(-1, 3)
            items["smooth"] = (d, torch.full((n_smooth,), weights.smooth, dtype=DTYPE))
        return _Blocks(items)

    return fn, joints_of, data_block, model


def _pack(state):
    return np.concatenate([state.global_orient, state.root_translation], axis=1).reshape(-1)


def _unpack(state, x):
    v = np.asarray(x[:6 * len(state)]).reshape(len(state), 6)
    return state.replace(global_orient=v[:, :3].copy(), root_translation=v[:, 3:].copy())


def stage1_objective(state, k2d, cameras, weights=None, config=None, skeleton=None):
    """Stage-I objective as a callable of the flat (T*6,) vector [orient, translation]."""
    weights = weights or StageWeights()
    config = config or StageConfig()
    fn, _, _, model = _stage1_blocks(state, k2d, cameras, weights, skeleton)
    return (lambda x: fn(x).exact(config.sigma, 0.0)), torch.as_tensor(_pack(state)), model


def optimize_stage1(state, k2d, cameras, weights=None, config=None, skeleton=None):
    """Refine orientation and translation with robust reprojection plus joint smoothness."""
    weights = weights or StageWeights()
    config = config or StageConfig()
    fn, _, _, model = _stage1_blocks(state, k2d, cameras, weights, skeleton)
    x, trace = _irls_solve(fn, torch.as_tensor(_pack(state)), config.sigma, 0.0, config.iterations,
                           config.tolerance)
    out = _unpack(state, x.numpy())
    logger.info("stage I: objective %.6g -> %.6g", trace[0], trace[-1])
    return StageResult(out, global_joints(out, model.skeleton), trace)


def _stage2_blocks(state, k2d, cameras, contacts, stage1_joints, weights, skeleton):
    zero = replace(weights, smooth=0.0)
    _, joints_of, data_block, model = _stage1_blocks(state, k2d, cameras, zero, skeleton)
    n = len(state)
    feet = list(contacts.foot_joints)
    c = torch.as_tensor(contacts.contact, dtype=DTYPE)
    if c.shape[0] != n:
        raise ValidationError("contacts must cover every frame")
    j1 = torch.as_tensor(np.asarray(stage1_joints, dtype=float))
    if j1.shape != (n, model.skeleton.joint_count, 3):
        raise ValidationError("stage-I joints must be (T, J, 3)")
    c_step = c[:-1].reshape(-1)
    # the non-contact part of the skate term only involves stage-I joints
    fixed = float(((1 - c[:-1]) * _safe_norm(j1[1:, feet] - j1[:-1, feet])).sum())

    def fn(x):
        joints = joints_of(x)
        normal = x[6 * n:6 * n + 3]
        norm = torch.linalg.norm(normal)
        signed = (joints[:, feet] @ (normal / norm) + x[-1] / norm).reshape(-1, 1)
        vel = (joints[1:, feet] - joints[:-1, feet]).reshape(-1, 3)
        return _Blocks({"data": data_block(joints),
                        "skate": (vel, weights.skate * c_step),
                        "contact": (signed, weights.contact * c.reshape(-1))})

    return fn, fixed, model


def stage2_objective(state, k2d, cameras, contacts, stage1_joints, weights=None, config=None, skeleton=None):
    """Stage-II objective as a callable of [orient, translation (T*6), plane normal (3), offset (1)]."""
    weights = weights or StageWeights()
    config = config or StageConfig()
    fn, fixed, model = _stage2_blocks(state, k2d, cameras, contacts, stage1_joints, weights, skeleton)
    delta = contacts.distance_threshold
    g = contacts.ground_plane
    x0 = torch.as_tensor(np.concatenate([_pack(state), g.normal, [g.offset]]))
    return (lambda x: fn(x).exact(config.sigma, delta) + weights.skate * fixed), x0, model


def optimize_stage2(state, k2d, cameras, contacts, stage1_joints, weights=None, config=None, skeleton=None):
    """Jointly refine orientation, translation and ground plane with contact terms."""
    weights = weights or StageWeights()
    config = config or StageConfig()
    fn, fixed, model = _stage2_blocks(state, k2d, cameras, contacts, stage1_joints, weights, skeleton)
    g = contacts.ground_plane
    x0 = torch.as_tensor(np.concatenate([_pack(state), g.normal, [g.offset]]))
    x, trace = _irls_solve(fn, x0, config.sigma, contacts.distance_threshold, config.iterations,
                           config.tolerance)
    trace = [f + weights.skate * fixed for f in trace]
    x = x.numpy()
    out = _unpack(state, x)
    plane = GroundPlane.from_vector(x[-4:-1], x[-1])
    logger.info("stage II: objective %.6g -> %.6g", trace[0], trace[-1])
    return StageResult(out, global_joints(out, model.skeleton), trace, plane)
