"""Analytically consistent synthetic scenes stored as archives (test and demo input)."""
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..camera import project_perspective
from ..fitting import targets_from_poses
from ..model import CameraState, WholeBodyPose
from ..multiview import rig_camera
from ..skeleton import default_skeleton, forward_kinematics
from ..synth import synthetic_dba_problem, synthetic_walk
from .archive import SequenceArchive


class SceneSpec(BaseModel):
    """What to synthesize. ``kind`` picks the motion: a standing pose, a rigid glide or a scripted gait."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["static", "linear", "gait"] = "gait"
    n_frames: int = Field(30, ge=2)
    views: int = Field(1, ge=1)
    fps: float = Field(30.0, gt=0)
    image_size: tuple[int, int] = (640, 480)
    focal: float = Field(1000.0, gt=0)
    distance: float = Field(5.0, gt=0)
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.02)
    camera_velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation_noise: float = Field(0.05, ge=0)
    camera_noise: float = Field(0.01, ge=0)
    keyframe_stride: int = Field(5, ge=1)
    n_background: int = Field(120, ge=0)
    n_foreground: int = Field(40, ge=0)
    flow_stride: int = Field(16, ge=1)
    histogram_bins: int = Field(16, ge=2)
    content_cuts: tuple[int, ...] = ()
    emotion: str = "neutral"


def _truth_motion(spec, rng):
    contact, plane = None, None
    if spec.kind == "gait":
        poses, contact, plane = synthetic_walk(spec.n_frames)
        return poses, contact, plane
    vec = np.zeros((spec.n_frames, 215))
    vec[:, 3:162] = rng.normal(0.0, 0.1, 159)  # one fixed posture
    if spec.kind == "linear":
        vec[:, 212:215] = np.arange(spec.n_frames)[:, None] * np.asarray(spec.velocity)
    return WholeBodyPose.from_vector(vec), contact, plane


def _world_cameras(spec, centre):
    """Per-view lists of per-frame world cameras."""
    size = spec.image_size
    out = []
    for v in range(spec.views):
        ang = 2 * np.pi * v / spec.views
        base = centre + spec.distance * np.array([np.cos(ang), 0.0, np.sin(ang)])
        cams = []
        for t in range(spec.n_frames):
            c = base + t * np.asarray(spec.camera_velocity)
            cam = rig_camera(c, centre + t * np.asarray(spec.camera_velocity), spec.focal, size)
            cams.append(cam)
        out.append(cams)
    return out


def _to_camera_frame(poses, camera):
    """Express world poses in one camera's frame (global orientation and root only)."""
    from scipy.spatial.transform import Rotation

    r, t = camera.rotation, camera.scale * camera.translation
    go = Rotation.from_matrix(r @ Rotation.from_rotvec(poses.global_orient).as_matrix()).as_rotvec()
    return poses.replace(global_orient=go, root_translation=poses.root_translation @ r.T + t)


def _flows(spec, pixels, boxes, cameras):
    """Grid flow between consecutive frames: background plane motion plus mean subject motion in its box."""
    w, h = spec.image_size
    s = spec.flow_stride
    xs = np.arange(0, w, s, dtype=float)
    ys = np.arange(0, h, s, dtype=float)
    gx, gy = np.meshgrid(xs, ys)
    grid = np.stack([gx, gy], -1).reshape(-1, 2)
    out = []
    depth = 2.0 * spec.distance
    for t in range(spec.n_frames - 1):
        a, b = cameras[t], cameras[t + 1]
        k = a.intrinsics
        uv = np.linalg.solve(k[:, :2], (grid - k[:, 2]).T).T
        pc = np.concatenate([uv, np.ones((len(uv), 1))], 1) * depth
        world = (pc - a.scale * a.translation) @ a.rotation
        flow = (project_perspective(b, world) - project_perspective(a, world)).reshape(len(ys), len(xs), 2)
        cx, cy, bw, bh = boxes[t]
        inside = (gx >= cx - bw / 2) & (gx <= cx + bw / 2) & (gy >= cy - bh / 2) & (gy <= cy + bh / 2)
        flow[inside] = (pixels[t + 1] - pixels[t]).mean(0)
        out.append(flow)
    return np.stack(out) if out else np.zeros((0, len(ys), len(xs), 2))


def _histograms(spec, rng):
    shots = np.searchsorted(np.asarray(sorted(spec.content_cuts)), np.arange(spec.n_frames), side="right")
    palette = rng.dirichlet(np.ones(spec.histogram_bins), size=len(spec.content_cuts) + 1)
    return palette[shots]


def generate_synthetic_scene(spec=None, seed=0):
    """Ground-truth scene plus perturbed inputs, all in one archive.

    Inputs for the pipeline live at the usual keys (``poses``, ``cameras/v``,
    ``keypoints_2d/v``, ``keypoints_3d``, ``detections``, ``signatures``,
    ``flows``, ``dba/*``); ground truth sits under ``truth/``. With one view
    the inputs are expressed in the camera frame (identity extrinsics), as a
    monocular local fit would see them; with several views they are in world
    coordinates and the cameras carry a small rotation perturbation.
    """
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    skeleton = default_skeleton()
    poses, contact, plane = _truth_motion(spec, rng)
    joints = forward_kinematics(poses, skeleton=skeleton)
    centre = joints[:, 0].mean(0)
    cams = _world_cameras(spec, centre)

    arc = SequenceArchive(spec.fps, spec.n_frames, view_count=spec.views,
                          records={"scene": spec.model_dump(mode="json"), "seed": seed,
                                   "labels": {"emotion": spec.emotion}})
    arc.set_poses(poses, "truth/poses")
    arc["truth/joints"] = joints
    for v, c in enumerate(cams):
        arc.set_cameras(c, v, prefix="truth/cameras")
    if contact is not None:
        arc["truth/contacts"] = contact
        arc["truth/ground_plane"] = np.concatenate([plane.normal, [plane.offset]])

    noisy = poses.to_vector().copy()
    noisy[:, 3:162] += rng.normal(0.0, spec.rotation_noise, noisy[:, 3:162].shape)
    noisy = WholeBodyPose.from_vector(noisy)
    if spec.views == 1:
        k = cams[0][0].intrinsics
        local = [CameraState(k) for _ in range(spec.n_frames)]
        init = WholeBodyPose.stack([_to_camera_frame(noisy.frame(t), cams[0][t]) for t in range(spec.n_frames)])
        arc.set_poses(init)
        arc.set_cameras(local, 0)
        truth_local = WholeBodyPose.stack([_to_camera_frame(poses.frame(t), cams[0][t])
                                           for t in range(spec.n_frames)])
        targets = targets_from_poses(truth_local, local, skeleton)
        arc.set_keypoints_2d(targets.k2d, 0)
        arc.set_keypoints_3d(targets.k3d)
    else:
        from ..rotations import axis_angle_to_matrix

        arc.set_poses(noisy)
        for v, c in enumerate(cams):
            targets = targets_from_poses(poses, c, skeleton)
            arc.set_keypoints_2d(targets.k2d, v)
            dr = axis_angle_to_matrix(rng.normal(0.0, spec.camera_noise, 3)) if v else np.eye(3)
            arc.set_cameras([cam.replace(rotation=dr @ cam.rotation, translation=dr @ cam.translation)
                             for cam in c], v)
        arc.set_keypoints_3d(targets_from_poses(poses, cams[0], skeleton).k3d)

    # detections and flows of view 0
    kp = arc.keypoints_2d(0)
    pix = kp.points[:, kp.confidence[0] > 0]
    lo, hi = pix.min(1), pix.max(1)
    boxes = np.concatenate([(lo + hi) / 2, (hi - lo) * 1.1], 1)
    arc["detections"] = boxes[:, None, :]
    arc["signatures"] = _histograms(spec, rng)
    arc["flows"] = _flows(spec, pix, boxes, cams[0])

    # sparse correspondences for the camera trajectory, in the frame of camera 0 at t = 0
    kf = np.arange(0, spec.n_frames, spec.keyframe_stride)
    if len(kf) < 2:  # no pairs to relate
        return arc
    g = np.tile(np.eye(4), (len(kf), 1, 1))
    for i, t in enumerate(kf):
        g[i, :3, :3] = cams[0][t].rotation
        g[i, :3, 3] = cams[0][t].scale * cams[0][t].translation
    g = g @ np.linalg.inv(g[0])
    step = joints[kf[-1], 0] - joints[kf[0], 0]
    vel = cams[0][0].rotation @ step / max(len(kf) - 1, 1)
    fg_centre = cams[0][0].rotation @ centre + cams[0][0].translation
    prob, masks, _ = synthetic_dba_problem(rng, g, cams[0][0].intrinsics, spec.image_size, spec.n_background,
                                           spec.n_foreground, vel, fg_centre, kf)
    for name in ("keyframes", "inverse_depths", "point_ids", "source", "target", "pixels", "flow", "revision",
                 "weights"):
        arc[f"dba/{name}"] = getattr(prob, name)
    arc["dba/mask_boxes"] = np.stack([m.boxes[0] if len(m.boxes) else np.full(4, np.nan) for m in masks])
    arc["truth/keyframe_poses"] = g
    return arc
