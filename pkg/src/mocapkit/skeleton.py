"""Rigid-bone kinematic skeleton and forward kinematics.

The skeleton is a rooted tree of joints with rest offsets expressed in the
parent frame. Joints beyond ``rotation_joint_count`` are leaf markers
(fingertips, face landmarks, heels) that carry no rotation of their own.
"""
import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError
from .model import N_BETA, BodyShape, WholeBodyPose
from .rotations import skew, so3_right_jacobian, torch_axis_angle_to_matrix

TEMPLATE_SCHEMA = "mocapkit.skeleton"
TEMPLATE_VERSION = 1
POSE_ROTATION_COUNT = 53


@dataclass(frozen=True, eq=False)
class Skeleton:
    joint_names: tuple
    parents: np.ndarray
    rest_offsets: np.ndarray
    rotation_joint_count: int
    joint_groups: dict = field(default_factory=dict)
    wholebody_index: np.ndarray = None
    beta_scale: np.ndarray = None
    skeleton_id: str = "custom"

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        offsets = np.asarray(self.rest_offsets, dtype=np.float64)
        n = len(self.joint_names)
        if parents.shape != (n,) or offsets.shape != (n, 3):
            raise ValidationError("parents/rest_offsets do not match joint count")
        roots = np.flatnonzero(parents < 0)
        if len(roots) != 1:
            raise ValidationError(f"skeleton needs exactly one root, found {len(roots)}")
        # every joint must reach the root without revisiting a node
        for j in range(n):
            seen, k = set(), j
            while parents[k] >= 0:
                if k in seen or parents[k] >= n:
                    raise ValidationError(f"parent chain of joint {j} is not a tree")
                seen.add(k)
                k = parents[k]
        if not 0 <= self.rotation_joint_count <= n:
            raise ValidationError("rotation_joint_count out of range")
        beta_scale = np.zeros((N_BETA, n)) if self.beta_scale is None else np.asarray(self.beta_scale, float)
        if beta_scale.shape != (N_BETA, n):
            raise ValidationError(f"beta scale matrix must be ({N_BETA}, {n})")
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_offsets", offsets)
        object.__setattr__(self, "beta_scale", beta_scale)
        if self.wholebody_index is not None:
            object.__setattr__(self, "wholebody_index", np.asarray(self.wholebody_index, dtype=np.int64))
        object.__setattr__(self, "joint_groups", {k: tuple(v) for k, v in self.joint_groups.items()})

    @property
    def joint_count(self):
        return len(self.joint_names)

    @property
    def root(self):
        return int(np.flatnonzero(self.parents < 0)[0])

    def index(self, name):
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise KeyError(f"unknown joint '{name}'") from None

    def group(self, name):
        return np.asarray(self.joint_groups[name], dtype=np.int64)

    @cached_property
    def depth(self):
        depth = np.zeros(self.joint_count, dtype=np.int64)
        for j in range(self.joint_count):
            k = j
            while self.parents[k] >= 0:
                depth[j] += 1
                k = self.parents[k]
        return depth

    @cached_property
    def levels(self):
        """Joint indices grouped by tree depth, root level first."""
        return [np.flatnonzero(self.depth == d) for d in range(int(self.depth.max()) + 1)]

    @cached_property
    def descendants(self):
        """(J, J) boolean mask, ``[k, i]`` true when ``i`` is a strict descendant of ``k``."""
        n = self.joint_count
        mask = np.zeros((n, n), dtype=bool)
        for i in range(n):
            k = self.parents[i]
            while k >= 0:
                mask[k, i] = True
                k = self.parents[k]
        return mask

    def tree_distance(self, a, b):
        """Number of edges on the tree path between joints ``a`` and ``b``."""
        def chain(j):
            out = [j]
            while self.parents[j] >= 0:
                j = int(self.parents[j])
                out.append(j)
            return out
        ca, cb = chain(a), chain(b)
        common = set(ca) & set(cb)
        return min(ca.index(c) + cb.index(c) for c in common)

    def bone_scales(self, shape=None):
        """Per-joint multiplicative scale applied to the bone ending at that joint."""
        beta = np.zeros(N_BETA) if shape is None else shape.beta
        scales = 1.0 + beta @ self.beta_scale
        if np.any(scales <= 0):
            raise ValidationError("shape coefficients produce non-positive bone lengths")
        return scales

    def bone_lengths(self, shape=None):
        """Length of the bone from each joint's parent (0 for the root)."""
        lengths = np.linalg.norm(self.rest_offsets, axis=1) * self.bone_scales(shape)
        lengths[self.root] = 0.0
        return lengths

    def to_dict(self):
        return {
            "schema": TEMPLATE_SCHEMA,
            "version": TEMPLATE_VERSION,
            "skeleton_id": self.skeleton_id,
            "joint_names": list(self.joint_names),
            "parents": self.parents.tolist(),
            "rest_offsets": self.rest_offsets.tolist(),
            "rotation_joint_count": self.rotation_joint_count,
            "joint_groups": {k: list(v) for k, v in self.joint_groups.items()},
            "wholebody_index": None if self.wholebody_index is None else self.wholebody_index.tolist(),
            "beta_scale_rows": self.beta_scale.tolist(),
        }


def load_skeleton(path=None):
    """Load a skeleton template; defaults to the shipped 71-joint whole-body template."""
    if path is None:
        text = resources.files("mocapkit.data").joinpath("skeleton_v1.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    if doc.get("schema") != TEMPLATE_SCHEMA:
        raise ValidationError(f"not a skeleton template: schema={doc.get('schema')!r}")
    if doc.get("version") != TEMPLATE_VERSION:
        raise ValidationError(f"unsupported skeleton template version {doc.get('version')}")
    return Skeleton(
        joint_names=doc["joint_names"],
        parents=doc["parents"],
        rest_offsets=doc["rest_offsets"],
        rotation_joint_count=doc["rotation_joint_count"],
        joint_groups=doc.get("joint_groups", {}),
        wholebody_index=doc.get("wholebody_index"),
        beta_scale=doc.get("beta_scale_rows"),
        skeleton_id=doc.get("skeleton_id", "custom"),
    )


_DEFAULT = None


def default_skeleton():
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_skeleton()
    return _DEFAULT


def fk_torch(rotations, global_orient, root_translation, skeleton, bone_scales=None, return_rotations=False):
    """Batched differentiable forward kinematics.

    Args:
        rotations: (..., R, 3) axis-angle per rotational joint, R = skeleton.rotation_joint_count.
        global_orient: (..., 3) axis-angle applied on top of the root rotation.
        root_translation: (..., 3).
        skeleton: Skeleton.
        bone_scales: optional (J,) tensor/array of per-bone scales.

    Returns:
        (..., J, 3) joint positions, plus (..., J, 3, 3) global rotations if
        ``return_rotations``.
    """
    dtype = rotations.dtype
    n_rot = skeleton.rotation_joint_count
    if rotations.shape[-2] != n_rot:
        raise ValidationError(f"expected {n_rot} joint rotations, got {rotations.shape[-2]}")
    batch = rotations.shape[:-2]
    offsets = torch.as_tensor(skeleton.rest_offsets, dtype=dtype)
    if bone_scales is not None:
        offsets = offsets * torch.as_tensor(bone_scales, dtype=dtype)[:, None]

    local = torch_axis_angle_to_matrix(rotations)
    root = skeleton.root
    go = torch_axis_angle_to_matrix(global_orient)

    level_rot, level_pos, slot = [], [], {}
    for d, joints in enumerate(skeleton.levels):
        if d == 0:
            r_root = go @ local[..., root, :, :] if root < n_rot else go
            rot = r_root[..., None, :, :]
            pos = (root_translation + (go @ offsets[root][:, None])[..., 0])[..., None, :]
        else:
            par = skeleton.parents[joints]
            prev = [slot[p][1] for p in par]
            prev_rot = level_rot[d - 1][..., prev, :, :]
            prev_pos = level_pos[d - 1][..., prev, :]
            pos = prev_pos + (prev_rot @ offsets[joints][..., None])[..., 0]
            rot_joints = [j for j in joints if j < n_rot]
            if len(rot_joints) == len(joints):
                rot = prev_rot @ local[..., joints, :, :]
            else:
                eye = torch.eye(3, dtype=dtype).expand(batch + (len(joints), 3, 3))
                mask = torch.as_tensor(joints < n_rot)
                idx = torch.as_tensor(np.minimum(joints, max(n_rot - 1, 0)))
                loc = torch.where(mask[:, None, None], local[..., idx, :, :], eye) if n_rot else eye
                rot = prev_rot @ loc
        for k, j in enumerate(joints):
            slot[j] = (d, k)
        level_rot.append(rot)
        level_pos.append(pos)

    order = np.concatenate(skeleton.levels)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))
    inverse = torch.as_tensor(inverse)
    positions = torch.cat(level_pos, dim=-2).index_select(-2, inverse)
    if not return_rotations:
        return positions
    rots = torch.cat(level_rot, dim=-3).index_select(-3, inverse)
    return positions, rots


def forward_kinematics(pose, shape=None, skeleton=None):
    """Joint positions (..., J, 3) for a :class:`WholeBodyPose`."""
    skeleton = skeleton or default_skeleton()
    if skeleton.rotation_joint_count != POSE_ROTATION_COUNT:
        raise ValidationError(
            f"pose carries {POSE_ROTATION_COUNT} rotations but skeleton expects {skeleton.rotation_joint_count}")
    if not isinstance(pose, WholeBodyPose):
        raise ValidationError("forward_kinematics expects a WholeBodyPose")
    scales = skeleton.bone_scales(shape if shape is not None else BodyShape())
    with torch.no_grad():
        out = fk_torch(
            torch.from_numpy(pose.rotations()),
            torch.from_numpy(pose.global_orient),
            torch.from_numpy(pose.root_translation),
            skeleton,
            bone_scales=scales,
        )
    return out.numpy()


def forward_kinematics_raw(rotations, global_orient, root_translation, skeleton, bone_scales=None):
    """Numpy forward kinematics for arbitrary skeletons (no pose-layout check)."""
    with torch.no_grad():
        out = fk_torch(
            torch.as_tensor(np.asarray(rotations, dtype=np.float64)),
            torch.as_tensor(np.asarray(global_orient, dtype=np.float64)),
            torch.as_tensor(np.asarray(root_translation, dtype=np.float64)),
            skeleton,
            bone_scales=bone_scales,
        )
    return out.numpy()


def fk_jacobian(rotations, global_orient, root_translation, skeleton, bone_scales=None):
    """Joint positions and their closed-form derivatives.

    A joint ``i`` moves with the local rotation of every ancestor ``k`` as
    dp_i = [p_k - p_i]_x G_k J_r(w_k) dw_k, where G_k is the global rotation
    of ``k`` and J_r the right Jacobian of the exponential map.

    Args:
        rotations: (T, R, 3) axis-angle rows.
        global_orient: (T, 3).
        root_translation: (T, 3).

    Returns:
        positions (T, J, 3), d_orient (T, J, 3, 3), d_rot (T, J, 3, R, 3).
        The derivative with respect to the root translation is the identity.
    """
    rot = np.asarray(rotations, dtype=np.float64)
    go = np.asarray(global_orient, dtype=np.float64)
    trans = np.asarray(root_translation, dtype=np.float64)
    with torch.no_grad():
        pos, glob = fk_torch(torch.from_numpy(rot), torch.from_numpy(go), torch.from_numpy(trans), skeleton,
                             bone_scales=bone_scales, return_rotations=True)
    pos, glob = pos.numpy(), glob.numpy()
    n_rot = skeleton.rotation_joint_count
    # pivot of each local rotation is the joint itself; frame is its global rotation
    lever = pos[:, :n_rot, None, :] - pos[:, None, :, :]  # (T, R, J, 3): p_k - p_i
    m_rot = glob[:, :n_rot] @ so3_right_jacobian(rot)  # (T, R, 3, 3)
    mask = skeleton.descendants[:n_rot].astype(float)  # (R, J)
    d_rot = np.einsum("trjab,trbc,rj->tjarc", skew(lever), m_rot, mask)
    # global orientation pivots about the root translation and moves every joint
    r_go = torch_axis_angle_to_matrix(torch.from_numpy(go)).numpy()
    m_go = r_go @ so3_right_jacobian(go)
    d_go = skew(trans[:, None, :] - pos) @ m_go[:, None]
    return pos, d_go, d_rot
