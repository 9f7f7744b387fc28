"""Synthetic scenes and problem generators used by tests, demos and the pipeline."""
import numpy as np

from .camera import project_camera_points
from .trajectory.dba import BAProblem, FrameMask


def look_at_pose(center, target, up=(0.0, 1.0, 0.0)):
    """4x4 world-to-camera pose for a camera at ``center`` looking at ``target`` (image y down)."""
    center = np.asarray(center, dtype=float)
    fwd = np.asarray(target, dtype=float) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    g = np.eye(4)
    g[:3, :3] = np.stack([right, down, fwd])
    g[:3, 3] = -g[:3, :3] @ center
    return g


def _project(g, k, x):
    return project_camera_points(k, x @ g[:3, :3].T + g[:3, 3])[0]


def synthetic_dba_problem(rng, poses, intrinsics, image_size=(640, 480), n_background=120, n_foreground=0,
                          foreground_velocity=(0.0, 0.0, 0.0), foreground_center=(0.0, 0.0, 4.0),
                          keyframes=None, mask_margin=4.0):
    """Correspondences between keyframes of a static background and an optional moving foreground.

    Background points are spread over depths 3-8 in front of the first camera.
    Foreground points form a 0.5 x 1.7 box around ``foreground_center`` that
    translates by ``foreground_velocity`` per keyframe. Each point is tracked
    from one source keyframe into every other keyframe.

    Returns:
        (BAProblem with exact inverse depths, per-keyframe FrameMask boxes around
        the foreground, boolean (M,) foreground flags).
    """
    poses = np.asarray(poses, dtype=float)
    k = len(poses)
    keyframes = np.arange(k) if keyframes is None else np.asarray(keyframes)
    intrinsics = np.asarray(intrinsics, dtype=float)
    w, h = image_size
    g0_inv = np.linalg.inv(poses[0])

    def sample_background(n):
        pix = rng.uniform([0.05 * w, 0.05 * h], [0.95 * w, 0.95 * h], (n, 2))
        depth = rng.uniform(3.0, 8.0, n)
        uv = np.linalg.solve(intrinsics[:, :2], (pix - intrinsics[:, 2]).T).T
        xc = np.concatenate([uv, np.ones((n, 1))], axis=1) * depth[:, None]
        return xc @ g0_inv[:3, :3].T + g0_inv[:3, 3]

    bg = sample_background(n_background)
    fg = np.asarray(foreground_center) + rng.uniform([-0.25, -0.85, -0.1], [0.25, 0.85, 0.1], (n_foreground, 3))
    vel = np.asarray(foreground_velocity, dtype=float)

    rows = {"point_ids": [], "source": [], "target": [], "pixels": [], "observed": [], "fg": []}
    inv_depths = []
    points = [(x, False) for x in bg] + [(x, True) for x in fg]
    for pid, (x, is_fg) in enumerate(points):
        src = pid % k
        xs = x + vel * src if is_fg else x
        pc = poses[src, :3, :3] @ xs + poses[src, :3, 3]
        inv_depths.append(1.0 / pc[2])
        p_src = _project(poses[src], intrinsics, xs[None])[0]
        for dst in range(k):
            if dst == src:
                continue
            xd = x + vel * dst if is_fg else x
            rows["point_ids"].append(pid)
            rows["source"].append(src)
            rows["target"].append(dst)
            rows["pixels"].append(p_src)
            rows["observed"].append(_project(poses[dst], intrinsics, xd[None])[0])
            rows["fg"].append(is_fg)
    pixels = np.array(rows["pixels"])
    observed = np.array(rows["observed"])
    m = len(pixels)
    problem = BAProblem(
        keyframes=keyframes, intrinsics=intrinsics, poses=np.tile(np.eye(4), (k, 1, 1)),
        inverse_depths=np.array(inv_depths), point_ids=np.array(rows["point_ids"]),
        source=np.array(rows["source"]), target=np.array(rows["target"]), pixels=pixels,
        flow=observed - pixels, revision=np.zeros((m, 2)), weights=np.ones((m, 2)), image_size=(w, h))
    fg_flag = np.array(rows["fg"], dtype=bool)
    masks = []
    for s in range(k):
        sel = fg_flag & (problem.source == s)
        if sel.any():
            lo = pixels[sel].min(0) - mask_margin
            hi = pixels[sel].max(0) + mask_margin
            masks.append(FrameMask(int(keyframes[s]), boxes=np.array([[lo[0], lo[1], hi[0], hi[1]]])))
        else:
            masks.append(None)
    return problem, masks, fg_flag


def synthetic_walk(n_frames=40, period=20, swing=0.35, knee_lift=0.5, skeleton=None):
    """Planar walk whose stance ankle is pinned in world space.

    Legs swing about the x axis: the stance hip sweeps from +swing to -swing
    while the other leg swings forward with a raised knee. The ankle cancels
    hip plus knee so each foot stays flat. The root translation is chosen
    per frame so the stance ankle does not move, which makes the whole
    stance foot static.

    Returns:
        poses (WholeBodyPose, (T,)), contact (T, 6) over the foot joints
        (left/right ankle, toe, heel), and the ground plane through the
        stance sole.
    """
    from .model import WholeBodyPose
    from .skeleton import default_skeleton, forward_kinematics
    from .trajectory.human import GroundPlane, foot_joints

    skeleton = skeleton or default_skeleton()
    idx = {n: skeleton.index(n) for n in ("left_hip", "right_hip", "left_knee", "right_knee",
                                          "left_ankle", "right_ankle")}
    half = period // 2
    t = np.arange(n_frames)
    phase = (t % half) / half
    left_stance = (t // half) % 2 == 0
    stance_hip = swing * (1 - 2 * phase)
    swing_hip = -stance_hip
    swing_knee = knee_lift * np.sin(np.pi * phase)

    rest = forward_kinematics(WholeBodyPose.zeros(), skeleton=skeleton)
    rot = np.zeros((n_frames, 53, 3))
    for side, stance in (("left", left_stance), ("right", ~left_stance)):
        # centre the sweep on the leg's rest tilt so both soles touch at a switch
        leg = rest[idx[f"{side}_ankle"]] - rest[idx[f"{side}_hip"]]
        tilt = np.arctan2(-leg[2], -leg[1])
        hip = np.where(stance, stance_hip, swing_hip) - tilt
        knee = np.where(stance, 0.0, swing_knee)
        rot[:, idx[f"{side}_hip"], 0] = hip
        rot[:, idx[f"{side}_knee"], 0] = knee
        rot[:, idx[f"{side}_ankle"], 0] = -(hip + knee)
    vec = np.zeros((n_frames, 215))
    vec[:, 3:162] = rot.reshape(n_frames, -1)
    poses = WholeBodyPose.from_vector(vec)
    local = forward_kinematics(poses, skeleton=skeleton)

    trans = np.zeros((n_frames, 3))
    pin = None
    for i in range(n_frames):
        ankle = idx["left_ankle"] if left_stance[i] else idx["right_ankle"]
        if i == 0:
            pin = local[0, ankle]
        elif left_stance[i] != left_stance[i - 1]:
            # at a switch both soles touch; keep the old stance ankle fixed for this frame
            old = idx["left_ankle"] if left_stance[i - 1] else idx["right_ankle"]
            trans[i] = pin - local[i, old]
            pin = local[i, ankle] + trans[i]
        trans[i] = pin - local[i, ankle]
    vec[:, 212:215] = trans
    poses = WholeBodyPose.from_vector(vec)

    feet = foot_joints(skeleton)
    left = np.array([skeleton.joint_names[j].startswith("left") for j in feet])
    # the stance foot at t stays put over the step t -> t+1 (a switch frame keeps the old pin)
    contact = np.where(left[None, :], left_stance[:, None], ~left_stance[:, None]).astype(float)

    world = forward_kinematics(poses, skeleton=skeleton)
    sole = world[0, skeleton.index("left_heel"), 1]
    plane = GroundPlane(np.array([0.0, 1.0, 0.0]), -sole)
    return poses, contact, plane


def side_camera(target, distance=5.0, focal=1000.0, size=(640, 480)):
    """Static camera on the +x side of ``target`` looking toward -x, image y pointing down."""
    from .model import CameraState

    target = np.asarray(target, dtype=float)
    g = look_at_pose(target + np.array([distance, 0.0, 0.0]), target)
    return CameraState.simple(focal, size[0] / 2, size[1] / 2, rotation=g[:3, :3], translation=g[:3, 3])


def synthetic_walk_scene(n_frames=40, distance=5.0, **walk):
    """Walk from :func:`synthetic_walk` seen by one static side camera.

    Returns:
        dict with ``poses``, ``contact``, ``plane``, ``camera``, ``keypoints``
        (exact 2D whole-body keypoints) and ``joints`` (T, J, 3).
    """
    from .fitting import targets_from_poses

    poses, contact, plane = synthetic_walk(n_frames, **walk)
    centre = poses.root_translation.mean(0)
    camera = side_camera(centre, distance)
    targets = targets_from_poses(poses, camera)
    return {"poses": poses, "contact": contact, "plane": plane, "camera": camera,
            "keypoints": targets.k2d, "joints": targets.k3d.points}
