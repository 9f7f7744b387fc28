"""Diversity and trajectory-accuracy metrics."""
import numpy as np

from .errors import UndefinedStatisticError, ValidationError
from .skeleton import default_skeleton, forward_kinematics

PARTS = ("body", "hand", "face")


def _part_parameters(poses, part):
    t = poses.batch_shape[0]
    if part == "body":
        return poses.theta_body.reshape(t, -1)
    if part == "hand":
        return poses.theta_hand.reshape(t, -1)
    # facial expression coefficients only; the jaw is a joint-level quantity
    return poses.expression.reshape(t, -1)


def _part_joints(joints, part, skeleton):
    if part == "body":
        ref = skeleton.root
        idx = [j for j in skeleton.group("body") if j != ref]
        rel = joints[:, idx] - joints[:, ref:ref + 1]
    elif part == "hand":
        rels = []
        for side in ("left", "right"):
            wrist = skeleton.index(f"{side}_wrist")
            idx = [j for j in skeleton.group(f"{side}_hand") if j != wrist]
            rels.append(joints[:, idx] - joints[:, wrist:wrist + 1])
        rel = np.concatenate(rels, axis=1)
    else:
        neck = skeleton.index("neck")
        idx = skeleton.group("face")
        rel = joints[:, idx] - joints[:, neck:neck + 1]
    return rel.reshape(len(joints), -1)


def compute_temporal_std(sequence, part="body", representation="parameters", skeleton=None):
    """Mean over channels of the per-channel (population) standard deviation across time.

    Joint channels are expressed root-relative (body), wrist-relative (hand)
    or neck-relative (face); the reference joint itself is excluded.
    """
    if part not in PARTS:
        raise ValidationError(f"part must be one of {PARTS}")
    if len(sequence) < 2:
        raise UndefinedStatisticError("temporal std needs at least two frames")
    skeleton = skeleton or default_skeleton()
    if representation == "parameters":
        x = _part_parameters(sequence.poses, part)
    elif representation == "joints":
        joints = forward_kinematics(sequence.poses, sequence.shape, skeleton)
        x = _part_joints(joints, part, skeleton)
    else:
        raise ValidationError("representation must be 'parameters' or 'joints'")
    return float(np.mean(np.std(x, axis=0)))


def umeyama(source, target, with_scale=True):
    """Similarity (s, R, t) minimizing ||target - (s R source + t)||^2 over (N, 3) point sets."""
    source = np.asarray(source, float)
    target = np.asarray(target, float)
    mu_s, mu_t = source.mean(0), target.mean(0)
    xs, xt = source - mu_s, target - mu_t
    cov = xt.T @ xs / len(source)
    u, d, vt = np.linalg.svd(cov)
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    rot = u @ sign @ vt
    var_s = (xs ** 2).sum() / len(source)
    scale = float(np.trace(np.diag(d) @ sign) / var_s) if (with_scale and var_s > 0) else 1.0
    trans = mu_t - scale * rot @ mu_s
    return scale, rot, trans


def aligned_rmse(estimate, truth, with_scale=True):
    """RMS position error after similarity alignment of ``estimate`` onto ``truth``."""
    estimate = np.asarray(estimate, float)
    truth = np.asarray(truth, float)
    if estimate.shape != truth.shape:
        raise ValidationError(f"trajectory length mismatch: {estimate.shape} vs {truth.shape}")
    if len(estimate) < 3:
        # alignment absorbs everything for fewer than three poses
        s, r, t = 1.0, np.eye(3), truth.mean(0) - estimate.mean(0)
    else:
        s, r, t = umeyama(estimate, truth, with_scale)
    aligned = s * estimate @ r.T + t
    return float(np.sqrt(np.mean(np.sum((aligned - truth) ** 2, axis=1))))


def trajectory_errors(est_camera_centers, true_camera_centers, est_roots, true_roots):
    """(ATE, RTE): aligned RMS camera-center error and aligned RMS root error."""
    ate = aligned_rmse(est_camera_centers, true_camera_centers)
    rte = aligned_rmse(est_roots, true_roots)
    return ate, rte
