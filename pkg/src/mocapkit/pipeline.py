"""Stage orchestration over sequence archives.

Every stage maps an archive to a new archive plus a report entry, so running
the stages one by one through files gives the same result as a single run.
Timings live only in the report, never in the archive.
"""
import logging
import time

import numpy as np

from .captioning import describe_frame
from .errors import DivergenceError, MocapError, StageError, ValidationError
from .fitting import FitConfig, FittingTargets, LossWeights, fit_sequence
from .io.archive import SequenceArchive, read_archive, write_archive
from .io.config import STAGES, PipelineConfig
from .metrics import trajectory_errors
from .model import CameraState, KeypointFrame2D, KeypointFrame3D, WholeBodyPose
from .multiview import BAConfig, BAWeights, BoneGraph, MultiViewObservation, bundle_adjust, triangulate_frame
from .shots import BBox, FlowField, FrameSignature, detect_content_shots, detect_flow_shots, segment_sequence, \
    track_subjects
from .skeleton import default_skeleton, forward_kinematics
from .smoothing import FilterSpec, smooth_keypoints
from .trajectory.dba import BAProblem, DBAConfig, FrameMask, apply_masks, interpolate_poses, solve_masked_ba
from .trajectory.human import (ContactModel, GlobalHumanState, StageConfig, StageWeights, camera_to_world,
                               detect_foot_contact, estimate_ground_plane, optimize_stage1, optimize_stage2)

logger = logging.getLogger(__name__)


def segments(arc):
    """Frame ranges (start, end inclusive) to process: the recorded tracklets, else the whole sequence."""
    tracks = arc.records.get("tracklets")
    if tracks is None:  # shot detection never ran
        return [(0, arc.n_frames - 1)]
    spans = sorted({(t["start"], t["end"]) for t in tracks})
    return spans


# stages ----------------------------------------------------------------------------

def stage_shots(arc, cfg, seed=0):
    t_len = arc.n_frames
    content = []
    if "signatures" in arc:
        sigs = [FrameSignature(h / h.sum(), t) for t, h in enumerate(arc["signatures"])]
        content = detect_content_shots(sigs, cfg.content_threshold)
    dets = arc["detections"] if "detections" in arc else np.zeros((t_len, 0, 4))
    boxes = [[BBox(b[:2], b[2:], t) for b in frame if np.all(np.isfinite(b))] for t, frame in enumerate(dets)]
    tracked = track_subjects(boxes, cfg.process_noise, cfg.measurement_noise, gate_scale=cfg.gate_scale)
    flow_cuts = {}
    if "flows" in arc:
        stride = int(arc.records.get("scene", {}).get("flow_stride", 1))
        flows = [FlowField(t, f, stride) for t, f in enumerate(arc["flows"])]
        flow_cuts = detect_flow_shots(flows, tracked, cfg.flow_threshold)
    tracklets = segment_sequence(content, tracked, flow_cuts, cfg.min_length, t_len)
    ids = -np.ones(dets.shape[:2], dtype=np.int64)
    for t, frame in enumerate(tracked):
        for d, box in enumerate(frame):
            ids[t, d] = box.track_id
    out = arc.copy()
    out["shots/track_ids"] = ids
    out.records["tracklets"] = [{"start": k.start_frame, "end": k.end_frame, "track_id": k.track_id,
                                 "reason": k.cut_reason} for k in tracklets]
    out.records["content_cuts"] = [int(c) for c in content]
    return out, {"counts": {"tracklets": len(tracklets), "content_cuts": len(content)}}


def stage_smooth(arc, cfg, seed=0):
    spec = FilterSpec(cfg.poly_order, cfg.w_min, cfg.w_max, boundary=cfg.boundary)
    out = arc.copy()
    done = 0
    keys = [(f"keypoints_2d/{v}", KeypointFrame2D) for v in range(arc.view_count)] + [("keypoints_3d", KeypointFrame3D)]
    for base, kind in keys:
        if f"{base}/points" not in arc:
            continue
        pts = arc[f"{base}/points"].copy()
        conf = arc[f"{base}/confidence"]
        for a, b in segments(arc):
            if b - a + 1 < 2 * spec.w_min + 1:
                continue
            pts[a:b + 1] = smooth_keypoints(kind(pts[a:b + 1], conf[a:b + 1]), spec).points
            done += 1
        out[f"{base}/points"] = pts
    return out, {"counts": {"smoothed_segments": done}}


def _targets(arc, view, a, b):
    k2 = arc.keypoints_2d(view)
    if "keypoints_3d/points" in arc:
        k3 = arc.keypoints_3d()
        k3 = KeypointFrame3D(k3.points[a:b + 1], k3.confidence[a:b + 1])
    else:
        j = default_skeleton().joint_count
        k3 = KeypointFrame3D(np.zeros((b - a + 1, j, 3)), np.zeros((b - a + 1, j)))
    cams = arc.cameras(view)[a:b + 1]
    return FittingTargets(KeypointFrame2D(k2.points[a:b + 1], k2.confidence[a:b + 1]), k3, cams)


def stage_fit(arc, cfg, seed=0):
    weights = LossWeights(cfg.joint, cfg.smooth, cfg.pen, cfg.phy)
    config = FitConfig(method=cfg.method, lr=cfg.lr, iterations=cfg.iterations, tolerance=cfg.tolerance)
    vec = np.atleast_2d(arc["poses"]).copy()
    traces = []
    for a, b in segments(arc):
        init = WholeBodyPose.from_vector(vec[a:b + 1])
        res = fit_sequence(init, _targets(arc, cfg.view, a, b), weights, config, shape=arc.shape())
        vec[a:b + 1] = res.poses.to_vector()
        traces.append({"start": a, "end": b, "initial": res.initial_loss, "final": res.final_loss,
                       "trace": [float(f) for f in res.trace]})
    out = arc.copy()
    out["poses"] = vec
    out.records["fit"] = [{k: v for k, v in t.items() if k != "trace"} for t in traces]
    return out, {"counts": {"segments": len(traces)}, "trace": traces}


def stage_multiview(arc, cfg, seed=0):
    if arc.view_count < 2:
        return arc.copy(), {"skipped": "single view"}
    views = range(arc.view_count)
    kps = [arc.keypoints_2d(v) for v in views]
    cams = tuple(arc.cameras(v)[0] for v in views)  # static rig
    obs = [MultiViewObservation(tuple(KeypointFrame2D(k.points[t], k.confidence[t]) for k in kps), cams, t)
           for t in range(arc.n_frames)]
    init = np.stack([triangulate_frame(o, cfg.confidence_cutoff)[0] for o in obs])
    res = bundle_adjust(obs, init, BoneGraph.from_skeleton(shape=arc.shape()),
                        BAWeights(cfg.temporal, cfg.bone, cfg.gauge),
                        BAConfig(cfg.iterations, confidence_cutoff=cfg.confidence_cutoff,
                                 optimize_cameras=cfg.optimize_cameras))
    out = arc.copy()
    for v, cam in enumerate(res.cameras):
        out.set_cameras([cam] * arc.n_frames, v)
    out["multiview/points"] = res.points
    out.records["multiview"] = {"initial": res.trace[0], "final": res.trace[-1], "iterations": res.iterations}
    return out, {"counts": {"iterations": res.iterations}, "trace": [float(f) for f in res.trace]}


def _camera_trajectory(arc, cfg):
    """World-to-camera transforms per frame from the masked correspondence problem (world = first keyframe)."""
    k = arc.cameras(0)[0].intrinsics
    kf = arc["dba/keyframes"]
    scene = arc.records.get("scene", {})
    size = tuple(scene.get("image_size", (0, 0)))
    prob = BAProblem(kf, k, np.tile(np.eye(4), (len(kf), 1, 1)), arc["dba/inverse_depths"], arc["dba/point_ids"],
                     arc["dba/source"], arc["dba/target"], arc["dba/pixels"], arc["dba/flow"], arc["dba/revision"],
                     arc["dba/weights"], size)
    masks = []
    for f, box in zip(kf, arc["dba/mask_boxes"]):
        masks.append(FrameMask(int(f), boxes=box[None] if np.all(np.isfinite(box)) else np.zeros((0, 4))))
    res = solve_masked_ba(apply_masks(prob, masks), DBAConfig(cfg.dba_iterations))
    return interpolate_poses(kf, res.poses, arc.n_frames), res


def stage_trajectory(arc, cfg, seed=0):
    if arc.view_count != 1:
        return arc.copy(), {"skipped": "multi-view input"}
    alpha = cfg.camera_scale
    k = arc.cameras(0)[0].intrinsics
    if "dba/keyframes" in arc:
        g, dba = _camera_trajectory(arc, cfg)
        dba_trace = [float(f) for f in dba.trace]
    else:
        g, dba_trace = np.tile(np.eye(4), (arc.n_frames, 1, 1)), []
    world_cams = [CameraState(k, gt[:3, :3], gt[:3, 3] / alpha, alpha) for gt in g]
    poses = camera_to_world(arc.poses(), g, alpha)
    weights = StageWeights(cfg.data, cfg.smooth, cfg.skate, cfg.contact)
    config = StageConfig(cfg.iterations, cfg.sigma)
    up = g[0, :3, :3].T @ np.array([0.0, -1.0, 0.0])
    vec = poses.to_vector()
    contacts = np.zeros((arc.n_frames, 6))
    planes, traces = [], []
    k2d = arc.keypoints_2d(0)
    for a, b in segments(arc):
        if b - a < 1:
            continue
        part = WholeBodyPose.from_vector(vec[a:b + 1])
        kp = KeypointFrame2D(k2d.points[a:b + 1], k2d.confidence[a:b + 1])
        cams = world_cams[a:b + 1]
        state = GlobalHumanState.from_poses(part, arc.shape(), alpha)
        s1 = optimize_stage1(state, kp, cams, weights, config)
        plane = estimate_ground_plane(s1.joints, up_hint=up)
        c = detect_foot_contact(s1.joints, plane, height_threshold=cfg.contact_height,
                                velocity_threshold=cfg.contact_speed)
        model = ContactModel(c, plane, cfg.contact_distance, cfg.contact_speed, cfg.contact_height)
        s2 = optimize_stage2(s1.state, kp, cams, model, s1.joints, weights, config)
        vec[a:b + 1] = s2.state.to_poses().to_vector()
        contacts[a:b + 1] = c
        planes.append(np.concatenate([s2.ground_plane.normal, [s2.ground_plane.offset]]))
        traces.append({"start": a, "end": b, "stage1": s1.trace, "stage2": s2.trace})
    out = arc.copy()
    out["poses"] = vec
    out.set_cameras(world_cams, 0)
    out["contacts"] = contacts
    out["ground_planes"] = np.stack(planes) if planes else np.zeros((0, 4))
    out.records["trajectory"] = [{"start": t["start"], "end": t["end"], "stage1": t["stage1"][-1],
                                  "stage2": t["stage2"][-1]} for t in traces]
    return out, {"counts": {"segments": len(traces), "contact_frames": int(contacts.any(1).sum())},
                 "trace": {"dba": dba_trace, "segments": traces}}


def stage_caption(arc, cfg, seed=0):
    emotion = cfg.emotion or arc.records.get("labels", {}).get("emotion")
    joints = forward_kinematics(arc.poses(), arc.shape())
    descriptions = []
    for t in range(0, arc.n_frames, cfg.stride):
        d = describe_frame(joints[t], emotion, seed=seed + t)
        descriptions.append({"frame": t, "sentences": d.sentences})
    out = arc.copy()
    out.records["descriptions"] = descriptions
    return out, {"counts": {"frames": len(descriptions)}}


def stage_augment(arc, cfg, seed=0):
    from .augmentation import FaceClip, LibraryEntry, MotionLibrary, augment_face, augment_lower_body

    out = arc.copy()
    seq = arc.sequence()
    info = {}
    if cfg.lower_body_library:
        entries = []
        for path in cfg.lower_body_library:
            lib = read_archive(path)
            entries.append(LibraryEntry(lib.poses(), lib.records.get("keyword", "")))
        res = augment_lower_body(seq, MotionLibrary(tuple(entries)))
        out.set_poses(res.sequence.poses, "augmented/lower_body")
        info["lower_body"] = {"keyword": res.label, "index": res.index, "distance": res.distance}
    if cfg.face_library:
        clips = []
        for path in cfg.face_library:
            lib = read_archive(path)
            p = lib.poses()
            clips.append(FaceClip(p.expression, p.theta_jaw, lib.records.get("emotion", "")))
        res = augment_face(seq, clips, seed)
        out.set_poses(res.sequence.poses, "augmented/face")
        info["face"] = {"emotion": res.label, "index": res.index}
    out.records["augmentation"] = info
    return out, {"counts": {k: 1 for k in info}}


STAGE_FUNCTIONS = {"shots": stage_shots, "smooth": stage_smooth, "fit": stage_fit, "multiview": stage_multiview,
                   "trajectory": stage_trajectory, "caption": stage_caption, "augment": stage_augment}


def run_stage(name, arc, config):
    """Run one stage; failures become StageError naming the stage and the record."""
    cfg = getattr(config, name)
    start = time.perf_counter()
    try:
        out, info = STAGE_FUNCTIONS[name](arc, cfg, config.seed)
    except MocapError as exc:
        if isinstance(exc, StageError):
            raise
        raise StageError(name, arc.records.get("subject_id", "sequence"), exc) from exc
    info = {"stage": name, "seconds": time.perf_counter() - start, **info}
    logger.info("stage %s done in %.2fs", name, info["seconds"])
    return out, info


def run_pipeline(config, archive=None):
    """Run the enabled stages in order.

    Args:
        config: PipelineConfig.
        archive: input archive; read from ``config.input`` when None.

    Returns:
        (archive, report) where report is a list with one entry per stage:
        timings, counts and loss traces. The archive is also written to
        ``config.output`` when set.
    """
    if archive is None:
        if not config.input:
            raise ValidationError("no input archive given")
        archive = read_archive(config.input)
    arc = archive.copy()
    report = []
    for name in STAGES:
        if getattr(config, name).enabled:
            arc, info = run_stage(name, arc, config)
            report.append(info)
    if config.output:
        write_archive(arc, config.output)
    if config.report:
        import json
        with open(config.report, "w") as fh:
            json.dump(report, fh, indent=1, default=float)
    return arc, report


def _pelvis(arc, key):
    return forward_kinematics(arc.poses(key), arc.shape())[:, 0]


def evaluate_trajectories(estimate, truth):
    """(ATE, RTE) between two archives after similarity alignment.

    Camera centres come from ``cameras/0`` and roots from the pelvis joint of
    ``poses``; the truth archive's ``truth/`` entries are used when present.
    """
    t_prefix = "truth/cameras" if "truth/cameras/0/rotation" in truth else "cameras"
    t_poses = "truth/poses" if "truth/poses" in truth else "poses"
    est_c = np.stack([c.center for c in estimate.cameras(0)])
    true_c = np.stack([c.center for c in truth.cameras(0, prefix=t_prefix)])
    if len(est_c) != len(true_c):
        raise ValidationError(f"trajectory length mismatch: {len(est_c)} vs {len(true_c)}")
    return trajectory_errors(est_c, true_c, _pelvis(estimate, "poses"), _pelvis(truth, t_poses))


def divergence_in(exc):
    """True when a StageError was caused by an optimizer divergence."""
    return isinstance(getattr(exc, "cause", exc), DivergenceError)
