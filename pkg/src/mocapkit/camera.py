"""Perspective projection and back-projection."""
import numpy as np
import torch

from .errors import ProjectionError, ValidationError

DEPTH_EPS = 1e-6


def to_camera(camera, points):
    """World points (..., 3) to camera coordinates."""
    points = np.asarray(points, dtype=float)
    return points @ camera.rotation.T + camera.scale * camera.translation


def project_perspective(camera, points):
    """Project world points (..., 3) to pixels (..., 2).

    Raises ProjectionError if any point is within DEPTH_EPS of the camera
    plane or behind it.
    """
    pc = to_camera(camera, points)
    z = pc[..., 2:3]
    if np.any(z <= DEPTH_EPS):
        raise ProjectionError("point at or behind the camera plane")
    return (pc[..., :2] / z) @ camera.intrinsics[:, :2].T + camera.intrinsics[:, 2]


def pixel_to_ray(camera, pixels):
    """Normalized camera ray (x/z, y/z, 1) for pixels (..., 2)."""
    pixels = np.asarray(pixels, dtype=float)
    k = camera.intrinsics
    a = k[:, :2]
    uv = np.linalg.solve(a, (pixels - k[:, 2]).reshape(-1, 2).T).T.reshape(pixels.shape)
    return np.concatenate([uv, np.ones(pixels.shape[:-1] + (1,))], axis=-1)


def backproject(camera, pixels, inverse_depth):
    """World point at depth 1/inverse_depth along the ray through ``pixels``."""
    d = np.asarray(inverse_depth, dtype=float)
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise ValidationError("inverse depth must be positive")
    pc = pixel_to_ray(camera, pixels) / d[..., None]
    return (pc - camera.scale * camera.translation) @ camera.rotation


def torch_project(intrinsics, rotation, translation, points, scale=1.0):
    """Differentiable projection. Shapes broadcast: K (...,2,3), R (...,3,3), T (...,3), points (...,N,3)."""
    pc = points @ rotation.transpose(-1, -2) + (scale * translation)[..., None, :]
    z = pc[..., 2:3]
    if bool((z <= DEPTH_EPS).any()):
        raise ProjectionError("point at or behind the camera plane")
    return (pc[..., :2] / z) @ intrinsics[..., :, :2].transpose(-1, -2) + intrinsics[..., None, :, 2]


def as_torch_cameras(cameras, dtype=torch.float64):
    """Stack a list of CameraState into (K, R, T, scale) tensors with a leading axis."""
    k = torch.as_tensor(np.stack([c.intrinsics for c in cameras]), dtype=dtype)
    r = torch.as_tensor(np.stack([c.rotation for c in cameras]), dtype=dtype)
    t = torch.as_tensor(np.stack([c.translation for c in cameras]), dtype=dtype)
    s = torch.as_tensor(np.array([c.scale for c in cameras]), dtype=dtype)
    return k, r, t, s


def project_camera_points(intrinsics, pc):
    """Pixels and d(pixel)/d(camera point) for camera-frame points ``pc`` (..., 3).

    ``intrinsics`` is a (2, 3) matrix or a stack broadcastable against ``pc``.
    """
    k = np.asarray(intrinsics, dtype=float)
    pc = np.asarray(pc, dtype=float)
    z = pc[..., 2]
    if np.any(z <= DEPTH_EPS):
        raise ProjectionError("point at or behind the camera plane")
    uv = pc[..., :2] / z[..., None]
    a = k[..., :, :2]
    pix = np.einsum("...ab,...b->...a", a, uv) + k[..., :, 2]
    dnorm = np.zeros(pc.shape[:-1] + (2, 3))
    dnorm[..., 0, 0] = 1.0 / z
    dnorm[..., 1, 1] = 1.0 / z
    dnorm[..., :, 2] = -uv / z[..., None]
    return pix, a @ dnorm
