"""Value types shared across the pipeline.

Arrays may carry leading batch axes (typically a frame axis), so a
``WholeBodyPose`` with ``theta_body`` of shape (T, 22, 3) is a pose sequence.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError

N_BODY = 22
N_HAND = 30
N_EXPRESSION = 50
N_BETA = 10
N_WHOLEBODY = 133
POSE_DIM = 3 + N_BODY * 3 + 3 + N_HAND * 3 + N_EXPRESSION + 3

# Flat per-frame layout used by optimizers and archives.
POSE_LAYOUT = (
    ("global_orient", (3,)),
    ("theta_body", (N_BODY, 3)),
    ("theta_jaw", (3,)),
    ("theta_hand", (N_HAND, 3)),
    ("expression", (N_EXPRESSION,)),
    ("root_translation", (3,)),
)


def _as_float(a):
    return np.asarray(a, dtype=np.float64)


def _require_finite(name, a):
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class WholeBodyPose:
    """Body, hand, jaw rotations (axis-angle), expression and root placement."""

    theta_body: np.ndarray
    theta_hand: np.ndarray
    theta_jaw: np.ndarray
    expression: np.ndarray
    root_translation: np.ndarray
    global_orient: np.ndarray

    def __post_init__(self):
        for name, tail in POSE_LAYOUT:
            arr = _as_float(getattr(self, name))
            if arr.shape[arr.ndim - len(tail):] != tail:
                raise ValidationError(f"{name} must end with shape {tail}, got {arr.shape}")
            _require_finite(name, arr)
            object.__setattr__(self, name, arr)
        shapes = {getattr(self, n).shape[: getattr(self, n).ndim - len(t)] for n, t in POSE_LAYOUT}
        if len(shapes) != 1:
            raise ValidationError(f"inconsistent batch shapes across pose fields: {shapes}")

    @property
    def batch_shape(self):
        return self.root_translation.shape[:-1]

    @classmethod
    def zeros(cls, *batch):
        batch = tuple(batch)
        return cls(
            theta_body=np.zeros(batch + (N_BODY, 3)),
            theta_hand=np.zeros(batch + (N_HAND, 3)),
            theta_jaw=np.zeros(batch + (3,)),
            expression=np.zeros(batch + (N_EXPRESSION,)),
            root_translation=np.zeros(batch + (3,)),
            global_orient=np.zeros(batch + (3,)),
        )

    def rotations(self):
        """Per-joint rotation rows (..., 53, 3): body joints, jaw, hand joints."""
        return np.concatenate([self.theta_body, self.theta_jaw[..., None, :], self.theta_hand], axis=-2)

    def to_vector(self):
        """Flatten to (..., POSE_DIM) following ``POSE_LAYOUT``."""
        b = self.batch_shape
        return np.concatenate([getattr(self, n).reshape(b + (-1,)) for n, _ in POSE_LAYOUT], axis=-1)

    @classmethod
    def from_vector(cls, vec):
        vec = _as_float(vec)
        if vec.shape[-1] != POSE_DIM:
            raise ValidationError(f"pose vector must have {POSE_DIM} entries, got {vec.shape[-1]}")
        b = vec.shape[:-1]
        parts, k = {}, 0
        for name, tail in POSE_LAYOUT:
            size = int(np.prod(tail))
            parts[name] = vec[..., k:k + size].reshape(b + tail)
            k += size
        return cls(**parts)

    def frame(self, t):
        return WholeBodyPose(**{n: getattr(self, n)[t] for n, _ in POSE_LAYOUT})

    @classmethod
    def stack(cls, poses):
        return cls(**{n: np.stack([getattr(p, n) for p in poses]) for n, _ in POSE_LAYOUT})

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class BodyShape:
    beta: np.ndarray = field(default_factory=lambda: np.zeros(N_BETA))

    def __post_init__(self):
        beta = _as_float(self.beta)
        if beta.shape != (N_BETA,):
            raise ValidationError(f"beta must have shape ({N_BETA},), got {beta.shape}")
        _require_finite("beta", beta)
        object.__setattr__(self, "beta", beta)


@dataclass(frozen=True)
class KeypointFrame2D:
    """133 whole-body keypoints in pixels plus per-keypoint confidence.

    Leading batch axes are allowed: points (..., 133, 2), confidence (..., 133).
    """

    points: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        pts = _as_float(self.points)
        conf = _as_float(self.confidence)
        if pts.shape[-2:] != (N_WHOLEBODY, 2) or conf.shape != pts.shape[:-1]:
            raise ValidationError(f"expected points (...,133,2) and confidence (...,133); got {pts.shape}, {conf.shape}")
        _require_finite("points", pts)
        if np.any(conf < 0) or np.any(conf > 1) or not np.all(np.isfinite(conf)):
            raise ValidationError("confidence must lie in [0, 1]")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "confidence", conf)


@dataclass(frozen=True)
class KeypointFrame3D:
    """Per-joint 3D positions with confidence (0 marks a missing target)."""

    points: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        pts = _as_float(self.points)
        conf = _as_float(self.confidence)
        if pts.shape[-1] != 3 or conf.shape != pts.shape[:-1]:
            raise ValidationError(f"expected points (...,J,3) and confidence (...,J); got {pts.shape}, {conf.shape}")
        _require_finite("points", pts)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "confidence", conf)


@dataclass(frozen=True)
class CameraState:
    """Pinhole camera: x_cam = R @ x_world + scale * T, pixel = K @ [x/z, y/z, 1]."""

    intrinsics: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        k = _as_float(self.intrinsics)
        r = _as_float(self.rotation)
        t = _as_float(self.translation)
        if k.shape != (2, 3) or r.shape != (3, 3) or t.shape != (3,):
            raise ValidationError("camera expects K (2,3), R (3,3), T (3,)")
        for name, a in (("intrinsics", k), ("rotation", r), ("translation", t)):
            _require_finite(name, a)
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValidationError("rotation must be orthonormal with determinant +1")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValidationError("camera scale must be positive")
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def simple(cls, focal, cx=0.0, cy=0.0, rotation=None, translation=None, scale=1.0):
        k = np.array([[focal, 0.0, cx], [0.0, focal, cy]])
        return cls(k, np.eye(3) if rotation is None else rotation,
                   np.zeros(3) if translation is None else translation, scale)

    @property
    def K3(self):
        return np.vstack([self.intrinsics, [0.0, 0.0, 1.0]])

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ (self.scale * self.translation)

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class MotionSequence:
    """Time-ordered poses with optional per-view 2D and 3D keypoints."""

    poses: WholeBodyPose
    fps: float
    subject_id: str = "subject"
    keypoints_2d: tuple = ()
    keypoints_3d: KeypointFrame3D = None
    shape: BodyShape = field(default_factory=BodyShape)

    def __post_init__(self):
        if len(self.poses.batch_shape) != 1 or self.poses.batch_shape[0] < 1:
            raise ValidationError("a motion sequence needs a nonempty frame axis")
        if not self.fps > 0:
            raise ValidationError("fps must be positive")
        object.__setattr__(self, "keypoints_2d", tuple(self.keypoints_2d))

    def __len__(self):
        return self.poses.batch_shape[0]

    def replace(self, **changes):
        return replace(self, **changes)
