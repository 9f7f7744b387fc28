"""Axis-angle / rotation-matrix helpers in numpy and torch."""
import numpy as np
import torch
from scipy.spatial.transform import Rotation

_SMALL = 1e-6  # squared angle below which the Taylor branch is used


def skew(v):
    """Cross-product matrix of ``v`` (..., 3) -> (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def axis_angle_to_matrix(aa):
    aa = np.asarray(aa, dtype=float)
    flat = aa.reshape(-1, 3)
    mats = Rotation.from_rotvec(flat).as_matrix()
    return mats.reshape(aa.shape[:-1] + (3, 3))


def matrix_to_axis_angle(mat):
    mat = np.asarray(mat, dtype=float)
    flat = mat.reshape(-1, 3, 3)
    aa = Rotation.from_matrix(flat).as_rotvec()
    return aa.reshape(mat.shape[:-2] + (3,))


def so3_exp(omega):
    """Alias of :func:`axis_angle_to_matrix` for tangent-space updates."""
    return axis_angle_to_matrix(omega)


def rotation_angle_between(r1, r2):
    """Geodesic angle (radians) between two rotation matrices."""
    rel = np.asarray(r1).T @ np.asarray(r2)
    c = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(c))


def torch_axis_angle_to_matrix(aa):
    """Differentiable Rodrigues formula, (..., 3) -> (..., 3, 3).

    Uses a Taylor expansion near zero so gradients stay finite at the
    identity.
    """
    theta2 = (aa * aa).sum(-1, keepdim=True)
    small = theta2 < _SMALL
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    a_exact = torch.sin(theta) / theta
    b_exact = (1.0 - torch.cos(theta)) / safe2
    a_taylor = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
    b_taylor = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    a = torch.where(small, a_taylor, a_exact)[..., None]
    b = torch.where(small, b_taylor, b_exact)[..., None]

    x, y, z = aa[..., 0], aa[..., 1], aa[..., 2]
    zero = torch.zeros_like(x)
    k = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1).reshape(aa.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand(k.shape)
    return eye + a * k + b * (k @ k)


def so3_right_jacobian(omega):
    """Right Jacobian of the SO(3) exponential, (..., 3) -> (..., 3, 3).

    exp(omega + d) ~= exp(omega) exp((J_r(omega) d)^) for small d.
    """
    omega = np.asarray(omega, dtype=float)
    theta2 = (omega * omega).sum(-1)[..., None, None]
    small = theta2 < _SMALL
    safe2 = np.where(small, 1.0, theta2)
    theta = np.sqrt(safe2)
    a = np.where(small, 0.5 - theta2 / 24.0 + theta2 ** 2 / 720.0, (1.0 - np.cos(theta)) / safe2)
    b = np.where(small, 1.0 / 6.0 - theta2 / 120.0 + theta2 ** 2 / 5040.0, (theta - np.sin(theta)) / (safe2 * theta))
    k = skew(omega)
    return np.eye(3) - a * k + b * (k @ k)
