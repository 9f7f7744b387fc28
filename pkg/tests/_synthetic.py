"""Small builders shared by several test modules."""
import numpy as np

from mocapkit.model import CameraState, WholeBodyPose


def front_camera(focal=1000.0, distance=3.0):
    """Camera looking down -z at the origin from ``distance`` metres, y up in the world."""
    return CameraState.simple(focal, 512.0, 512.0, rotation=np.diag([1.0, -1.0, -1.0]),
                              translation=np.array([0.0, 0.3, distance]))


def random_pose(rng, frames=1, spread=0.15):
    """Pose sequence with Gaussian joint rotations and identity root."""
    vec = WholeBodyPose.zeros(frames).to_vector()
    vec[:, 3:162] = rng.normal(0.0, spread, (frames, 159))
    return WholeBodyPose.from_vector(vec)


def perturb_rotations(pose, rng, sigma):
    vec = np.atleast_2d(pose.to_vector()).copy()
    vec[:, 3:162] += rng.normal(0.0, sigma, vec[:, 3:162].shape)
    return WholeBodyPose.from_vector(vec)
