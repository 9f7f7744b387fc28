"""Motion augmentation: lower-body replacement from a library and facial-expression infill."""
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .model import N_BODY, N_EXPRESSION, MotionSequence, WholeBodyPose
from .skeleton import default_skeleton


@dataclass(frozen=True)
class LibraryEntry:
    poses: WholeBodyPose
    keyword: str

    def __post_init__(self):
        if len(self.poses.batch_shape) != 1 or self.poses.batch_shape[0] < 1:
            raise ValidationError("library motions need a nonempty frame axis")


@dataclass(frozen=True)
class MotionLibrary:
    """Indexed motions with text keywords such as "sitting" or "walking"."""

    entries: tuple

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries:
            raise ValidationError("motion library is empty")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]


@dataclass(frozen=True)
class FaceClip:
    """Expression coefficients (n, 50) and jaw rotation (n, 3) with an emotion label."""

    expression: np.ndarray
    jaw: np.ndarray
    emotion: str

    def __post_init__(self):
        e = np.asarray(self.expression, dtype=float)
        j = np.asarray(self.jaw, dtype=float)
        if e.ndim != 2 or e.shape[1] != N_EXPRESSION or j.shape != (len(e), 3) or len(e) < 1:
            raise ValidationError("face clip needs expression (n, 50) and jaw (n, 3) with n >= 1")
        object.__setattr__(self, "expression", e)
        object.__setattr__(self, "jaw", j)


@dataclass
class Augmented:
    sequence: MotionSequence
    label: str
    index: int
    distance: float = float("nan")


def resample(values, n_frames):
    """Linear resampling of (n, ...) along the first axis to ``n_frames`` samples.

    The first and last samples are copied exactly; equal lengths return a copy
    and a single-sample target keeps the first sample.
    """
    v = np.asarray(values, dtype=float)
    n = len(v)
    if n_frames < 1:
        raise ValidationError("target length must be positive")
    if n == n_frames:
        return v.copy()
    if n == 1 or n_frames == 1:
        return np.repeat(v[:1], n_frames, axis=0)
    pos = np.linspace(0.0, n - 1, n_frames)
    lo = np.minimum(np.floor(pos).astype(int), n - 2)
    w = (pos - lo).reshape((-1,) + (1,) * (v.ndim - 1))
    out = (1 - w) * v[lo] + w * v[lo + 1]
    out[0], out[-1] = v[0], v[-1]
    return out


def lower_body_rows(skeleton=None):
    skeleton = skeleton or default_skeleton()
    return np.array(sorted(skeleton.group("lower")))


def _upper_channels(poses, rows):
    upper = np.setdiff1d(np.arange(N_BODY), rows)
    t = poses.batch_shape[0]
    return np.concatenate([poses.global_orient, poses.theta_body[:, upper].reshape(t, -1)], axis=1)


def library_distances(seq, library, skeleton=None):
    """Mean per-frame L2 distance over root orientation and upper-body rotations, entries resampled to ``seq``."""
    rows = lower_body_rows(skeleton)
    ref = _upper_channels(seq.poses, rows)
    out = np.empty(len(library))
    for i, entry in enumerate(library.entries):
        cand = resample(_upper_channels(entry.poses, rows), len(seq))
        out[i] = float(np.mean(np.linalg.norm(cand - ref, axis=1)))
    return out


def augment_lower_body(seq, library, skeleton=None):
    """Install the lower body of the closest library motion; ties go to the lowest index."""
    if not isinstance(library, MotionLibrary):
        library = MotionLibrary(tuple(library))
    rows = lower_body_rows(skeleton)
    dist = library_distances(seq, library, skeleton)
    best = int(np.argmin(dist))
    entry = library[best]
    body = seq.poses.theta_body.copy()
    body[:, rows] = resample(entry.poses.theta_body[:, rows], len(seq))
    out = seq.replace(poses=seq.poses.replace(theta_body=body))
    return Augmented(out, entry.keyword, best, float(dist[best]))


def augment_face(seq, face_library, seed=0):
    """Replace expression and jaw with a uniformly drawn clip stretched to the sequence length."""
    clips = list(face_library)
    if not clips:
        raise ValidationError("face library is empty")
    rng = np.random.default_rng(seed)
    idx = int(rng.integers(len(clips)))
    clip = clips[idx]
    n = len(seq)
    poses = seq.poses.replace(expression=resample(clip.expression, n), theta_jaw=resample(clip.jaw, n))
    return Augmented(seq.replace(poses=poses), clip.emotion, idx)
