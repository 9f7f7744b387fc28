import numpy as np
import pytest
from _synthetic import random_pose
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from mocapkit import forward_kinematics, project_perspective
from mocapkit.errors import DegenerateGeometryError, UnderconstrainedError, ValidationError
from mocapkit.model import CameraState, KeypointFrame2D
from mocapkit.multiview import (BAConfig, BAWeights, BoneGraph, MultiViewObservation, ba_objective,
                                bundle_adjust, observations_from_points, rig_camera, triangulate,
                                triangulate_frame)
from mocapkit.rotations import axis_angle_to_matrix


def rot_error(a, b):
    return float(np.linalg.norm(Rotation.from_matrix(a.T @ b).as_rotvec()))


def ring_rig(n=4, radius=3.0, height=0.5):
    angles = np.linspace(0, 2 * np.pi, n + 1)[:n]
    return [rig_camera([radius * np.sin(a), height, radius * np.cos(a)], [0, 0, 0]) for a in angles]


def keypoint_sequence(skeleton, rng, frames=4, spread=0.2):
    joints = forward_kinematics(random_pose(rng, frames, spread), skeleton=skeleton)
    wb = skeleton.wholebody_index
    pts = np.full((frames, len(wb), 3), np.nan)
    pts[:, wb >= 0] = joints[:, wb[wb >= 0]]
    return pts


def perturbed(cams, rng, angle=0.01):
    out = [cams[0]]
    for c in cams[1:]:
        axis = rng.normal(size=3)
        out.append(c.replace(rotation=axis_angle_to_matrix(angle * axis / np.linalg.norm(axis)) @ c.rotation))
    return out


def with_cameras(observations, cams):
    return [MultiViewObservation(o.keypoints, tuple(cams), o.frame_index) for o in observations]


def with_noise(observations, rng, sigma):
    out = []
    for o in observations:
        kps = tuple(KeypointFrame2D(k.points + rng.normal(0, sigma, k.points.shape), k.confidence)
                    for k in o.keypoints)
        out.append(MultiViewObservation(kps, o.cameras, o.frame_index))
    return out


# triangulation --------------------------------------------------------------

def test_two_orthogonal_cameras():
    a = CameraState.simple(1.0)
    b = rig_camera([-1.0, 0.0, 1.0], [0.0, 0.0, 1.0], focal=1.0, size=(0, 0))
    target = np.array([0.0, 0.0, 1.0])
    pix = np.stack([project_perspective(c, target) for c in (a, b)])
    point, residual = triangulate(pix, [a, b])
    np.testing.assert_allclose(point, target, atol=1e-10)
    assert residual < 1e-10


def test_duplicate_views_are_degenerate():
    cam = ring_rig()[0]
    pix = project_perspective(cam, np.array([0.1, 0.2, 0.3]))
    with pytest.raises(DegenerateGeometryError):
        triangulate(np.stack([pix, pix]), [cam, cam])


def test_single_view_underconstrained():
    cams = ring_rig()
    pix = np.stack([project_perspective(c, np.zeros(3)) for c in cams])
    with pytest.raises(UnderconstrainedError):
        triangulate(pix, cams, confidence=[0.9, 0.1, 0.0, 0.2], cutoff=0.3)


def test_low_confidence_view_ignored():
    cams = ring_rig()
    target = np.array([0.2, -0.1, 0.3])
    pix = np.stack([project_perspective(c, target) for c in cams])
    pix[3] += 50.0
    point, _ = triangulate(pix, cams, confidence=[1.0, 1.0, 1.0, 0.1], cutoff=0.5)
    np.testing.assert_allclose(point, target, atol=1e-9)


def test_random_rig_matches_reprojection_oracle(rng):
    cams = ring_rig()
    for _ in range(25):
        target = rng.uniform(-0.8, 0.8, 3)
        pix = np.stack([project_perspective(c, target) for c in cams])
        point, _ = triangulate(pix, cams)
        assert np.linalg.norm(point - target) < 1e-8
        oracle = least_squares(lambda p: np.concatenate([project_perspective(c, p) - q for c, q in zip(cams, pix)]),
                               target + rng.normal(0, 0.05, 3), xtol=1e-15, ftol=1e-15, gtol=1e-15).x
        assert np.linalg.norm(point - oracle) < 1e-8


def test_triangulate_frame_marks_unobserved(skeleton, rng):
    pts = keypoint_sequence(skeleton, rng, frames=1)
    obs = observations_from_points(pts, ring_rig())[0]
    got, residual = triangulate_frame(obs)
    seen = np.isfinite(pts[0, :, 0])
    np.testing.assert_allclose(got[seen], pts[0, seen], atol=1e-8)
    assert np.all(np.isnan(got[~seen])) and np.all(np.isnan(residual[~seen]))


def test_observation_needs_two_views():
    k = KeypointFrame2D(np.zeros((133, 2)), np.ones(133))
    with pytest.raises(ValidationError):
        MultiViewObservation((k,), (ring_rig()[0],))


# bone graph -----------------------------------------------------------------

def test_bone_graph_validation():
    with pytest.raises(ValidationError):
        BoneGraph(np.array([[0, 1]]), np.array([0.0]))
    with pytest.raises(ValidationError):
        BoneGraph(np.array([[0, 1], [1, 2]]), np.array([1.0]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_skeleton_bone_graph_is_rigid(seed):
    from mocapkit.skeleton import default_skeleton
    skeleton = default_skeleton()
    bones = BoneGraph.from_skeleton(skeleton)
    pts = keypoint_sequence(skeleton, np.random.default_rng(seed), frames=2, spread=0.6)
    np.testing.assert_allclose(bones.measure(pts), np.broadcast_to(bones.lengths, (2, len(bones.lengths))),
                               atol=1e-12)


# bundle adjustment ----------------------------------------------------------

def test_fixed_point(skeleton, rng):
    pts = keypoint_sequence(skeleton, rng)
    cams = ring_rig()
    obs = observations_from_points(pts, cams)
    bones = BoneGraph.from_skeleton(skeleton)
    res = bundle_adjust(obs, pts, bones, BAWeights(temporal=0.0))
    assert res.trace[-1] < 1e-12
    seen = np.isfinite(pts)
    assert np.abs(res.points[seen] - pts[seen]).max() < 1e-12
    assert max(rot_error(a.rotation, b.rotation) for a, b in zip(res.cameras, cams)) < 1e-12


def test_perturbed_rig_recovered(skeleton, rng):
    pts = keypoint_sequence(skeleton, rng)
    cams = ring_rig()
    obs = with_cameras(observations_from_points(pts, cams), perturbed(cams, rng))
    init = np.stack([triangulate_frame(o)[0] for o in obs])
    bones = BoneGraph.from_skeleton(skeleton)
    res = bundle_adjust(obs, init, bones, BAWeights(temporal=0.0))
    assert max(rot_error(a.rotation, b.rotation) for a, b in zip(res.cameras, cams)) < 1e-4
    seen = np.isfinite(pts)
    assert np.abs(res.points[seen] - pts[seen]).max() < 1e-6
    assert np.nanmax(np.abs(bones.measure(res.points) - bones.lengths)) < 1e-6
    assert np.all(np.diff(res.trace) <= 0)


def test_gauge_invariance(skeleton, rng):
    pts = keypoint_sequence(skeleton, rng)
    cams = ring_rig()
    obs = with_noise(with_cameras(observations_from_points(pts, cams), perturbed(cams, rng)), rng, 0.5)
    init = np.stack([triangulate_frame(o)[0] for o in obs])
    bones = BoneGraph.from_skeleton(skeleton)
    weights = BAWeights(temporal=0.1, bone=1.0)
    base = bundle_adjust(obs, init, bones, weights, BAConfig(iterations=200))

    g_rot = axis_angle_to_matrix(np.array([0.3, -0.7, 0.2]))
    g_t = np.array([1.5, -0.4, 2.0])
    moved_cams = [c.replace(rotation=c.rotation @ g_rot.T,
                            translation=c.translation - c.rotation @ g_rot.T @ g_t / c.scale) for c in obs[0].cameras]
    moved = bundle_adjust(with_cameras(obs, moved_cams), init @ g_rot.T + g_t, bones, weights,
                          BAConfig(iterations=200))
    assert moved.trace[0] == pytest.approx(base.trace[0], rel=1e-12)
    assert abs(moved.trace[-1] - base.trace[-1]) < 1e-9
    seen = np.isfinite(pts)
    np.testing.assert_allclose(moved.points[seen], (base.points @ g_rot.T + g_t)[seen], atol=1e-6)


def test_fixed_cameras_match_per_point_refinement(skeleton, rng):
    pts = keypoint_sequence(skeleton, rng, frames=2)
    cams = ring_rig()
    obs = with_noise(observations_from_points(pts, cams), rng, 1.0)
    init = np.stack([triangulate_frame(o)[0] for o in obs])
    res = bundle_adjust(obs, init, None, BAWeights(temporal=0.0, bone=0.0),
                        BAConfig(optimize_cameras=False, iterations=200))
    for t in range(2):
        for k in np.flatnonzero(np.isfinite(pts[t, :, 0]))[:15]:
            pix = obs[t].pixels[:, k]
            oracle = least_squares(
                lambda p: np.concatenate([project_perspective(c, p) - q for c, q in zip(cams, pix)]),
                init[t, k], xtol=1e-15, ftol=1e-15, gtol=1e-15).x
            np.testing.assert_allclose(res.points[t, k], oracle, atol=1e-7)


def test_objective_never_above_initial(skeleton, rng):
    pts = keypoint_sequence(skeleton, rng, frames=3)
    cams = ring_rig()
    obs = with_noise(with_cameras(observations_from_points(pts, cams), perturbed(cams, rng, 0.03)), rng, 2.0)
    init = np.stack([triangulate_frame(o)[0] for o in obs])
    bones = BoneGraph.from_skeleton(skeleton)
    res = bundle_adjust(obs, init, bones)
    assert res.trace[-1] <= ba_objective(obs, obs[0].cameras, init, bones)
    assert res.trace[-1] == pytest.approx(ba_objective(obs, res.cameras, res.points, bones), rel=1e-9)
    assert np.all(np.diff(res.trace) <= 0)


def test_camera_refinement_needs_scale_gauge(skeleton, rng):
    pts = keypoint_sequence(skeleton, rng, frames=1)
    obs = observations_from_points(pts, ring_rig())
    with pytest.raises(UnderconstrainedError):
        bundle_adjust(obs, pts, None)


def test_weakly_observed_points_rejected_without_priors(skeleton, rng):
    pts = keypoint_sequence(skeleton, rng, frames=1)
    conf = np.ones((1, pts.shape[1]))
    obs = observations_from_points(pts, ring_rig())
    one_view = [MultiViewObservation(
        (obs[0].keypoints[0],) + tuple(KeypointFrame2D(k.points, np.zeros_like(conf[0])) for k in obs[0].keypoints[1:]),
        obs[0].cameras)]
    with pytest.raises(UnderconstrainedError):
        bundle_adjust(one_view, pts, None, BAWeights(temporal=0.0, bone=0.0), BAConfig(optimize_cameras=False))
