import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

import diffcore as dc
from body import (BONE_CHILDREN, BONE_PARENTS, DENSE_FRACTIONS, NUM_DENSE_POINTS, NUM_JOINTS, REST_OFFSETS,
                  SKELETON, CameraModel, bbox_feature, bone_lengths, dense_body_points, forward_kinematics,
                  from_normalized, matrix_to_rot6d, perspective_to_weak, project, rot6d_to_matrix, to_normalized,
                  unproject, weak_to_perspective)
from errors import ProjectionError, RotationError

IDENTITY_6D = np.tile([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], NUM_JOINTS)
IMAGE = np.array([1280.0, 960.0])


def _rest_joints():
    joints = np.zeros((NUM_JOINTS, 3))
    for i in range(1, NUM_JOINTS):
        joints[i] = joints[SKELETON.parents[i]] + REST_OFFSETS[i]
    return joints


def test_parents_are_topologically_ordered():
    assert SKELETON.parents[0] == -1
    assert all(SKELETON.parents[i] < i for i in range(1, NUM_JOINTS))
    assert int(SKELETON.highly_articulated.sum()) == 8


def test_rot6d_identity_and_scale_invariance():
    np.testing.assert_allclose(rot6d_to_matrix(np.array([1.0, 0, 0, 0, 1, 0])), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(rot6d_to_matrix(np.array([2.0, 0, 0, 0, 3, 0])), np.eye(3), atol=1e-15)


def test_rot6d_random_seeds_are_rotations():
    seeds = np.random.default_rng(0).normal(size=(10_000, 6))
    r = rot6d_to_matrix(seeds)
    eye = np.einsum("nji,njk->nik", r, r)
    assert np.max(np.abs(eye - np.eye(3))) < 1e-12
    assert np.max(np.abs(np.linalg.det(r) - 1.0)) < 1e-12


@given(arrays(np.float64, 6, elements=st.floats(-5, 5)))
def test_rot6d_round_trip_on_decodable_seeds(seeds):
    a1, a2 = seeds[:3], seeds[3:]
    n1, n2 = np.linalg.norm(a1), np.linalg.norm(a2)
    if n1 < 1e-3 or n2 < 1e-3 or abs(a1 @ a2) / (n1 * n2) > 0.999:
        return
    r = rot6d_to_matrix(seeds)
    np.testing.assert_allclose(rot6d_to_matrix(matrix_to_rot6d(r)), r, atol=1e-12)


@pytest.mark.parametrize("seeds", [[0, 0, 0, 0, 1, 0], [1, 0, 0, 2, 0, 0], [1e-12, 0, 0, 0, 1, 0]])
def test_degenerate_seeds_raise(seeds):
    with pytest.raises(RotationError):
        rot6d_to_matrix(np.array(seeds, dtype=np.float64))


def test_rest_pose_kinematics():
    joints = forward_kinematics(IDENTITY_6D, np.zeros(4))
    np.testing.assert_allclose(joints, _rest_joints(), atol=1e-15)


def test_root_rotation_is_rigid():
    rot = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    theta = IDENTITY_6D.copy()
    theta[:6] = matrix_to_rot6d(rot)
    np.testing.assert_allclose(forward_kinematics(theta, np.zeros(4)), _rest_joints() @ rot.T, atol=1e-12)


def test_bone_lengths_are_pose_invariant():
    rng = np.random.default_rng(1)
    beta = rng.normal(scale=0.1, size=4)
    rest = np.linalg.norm(REST_OFFSETS[1:], axis=-1) * np.exp(beta[SKELETON.groups[1:]])
    theta = rng.normal(size=(50, NUM_JOINTS * 6))
    lengths = bone_lengths(forward_kinematics(theta, beta))
    assert np.max(np.abs(lengths - rest)) < 1e-12


def test_dense_points_interpolate_bones():
    theta = np.random.default_rng(2).normal(size=(3, NUM_JOINTS * 6))
    joints = forward_kinematics(theta, np.zeros(4))
    dense = dense_body_points(joints)
    assert dense.shape == (3, NUM_DENSE_POINTS, 3) and NUM_DENSE_POINTS == 76
    np.testing.assert_array_equal(dense[:, :NUM_JOINTS], joints)
    interp = dense[:, NUM_JOINTS:].reshape(3, len(BONE_CHILDREN), len(DENSE_FRACTIONS), 3)
    for j, t in enumerate(DENSE_FRACTIONS):
        expected = (1 - t) * joints[:, BONE_PARENTS] + t * joints[:, BONE_CHILDREN]
        assert np.max(np.abs(interp[:, :, j] - expected)) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_kinematics_gradient(seed):
    rng = np.random.default_rng(seed)
    beta = rng.normal(scale=0.1, size=4)
    weights = rng.normal(size=(NUM_DENSE_POINTS, 3))

    def f(theta):
        return dc.sum_reduce(dense_body_points(forward_kinematics(theta, beta)) * weights)

    assert dc.grad_check(f, rng.normal(size=NUM_JOINTS * 6)) < 1e-4


def test_bbox_feature_is_division_by_focal():
    np.testing.assert_array_equal(bbox_feature(np.array([128.0, 128.0, 256.0]), 1000.0), [0.128, 0.128, 0.256])


def test_weak_to_perspective_closed_form():
    bbox = np.array([640.0, 480.0, 256.0])
    t = weak_to_perspective(np.array([1.0, 0.1, -0.2]), bbox, 1000.0, IMAGE)
    np.testing.assert_allclose(t, [0.1, -0.2, 7.8125], atol=1e-12)
    t2 = weak_to_perspective(np.array([1.0, 0.1, -0.2]), bbox, 2000.0, IMAGE)
    assert t2[2] == pytest.approx(2 * t[2])


def test_weak_perspective_round_trip_and_degenerate_scale():
    bbox = np.array([500.0, 300.0, 180.0])
    pi_w = np.array([0.9, 0.05, 0.02])
    t = weak_to_perspective(pi_w, bbox, 1100.0, IMAGE)
    np.testing.assert_allclose(perspective_to_weak(t, bbox, 1100.0, IMAGE), pi_w, atol=1e-12)
    with pytest.raises(ProjectionError):
        weak_to_perspective(np.array([1e-9, 0.0, 0.0]), bbox, 1100.0, IMAGE)


def test_optical_axis_point_lands_at_crop_center():
    bbox = np.array([640.0, 480.0, 256.0])
    uv = project(np.zeros((1, 3)), np.array([0.0, 0.0, 5.0]), 1000.0, bbox, IMAGE)
    np.testing.assert_allclose(uv, [[128.0, 128.0]], atol=1e-12)


def test_pelvis_matches_weak_perspective_at_crop_center():
    bbox = np.array([640.0, 480.0, 256.0])
    camera = CameraModel(pi_w=np.array([1.0, 0.0, 0.0]), bbox=bbox, focal=1000.0, image_size=IMAGE)
    assert np.max(np.abs(camera.project(np.zeros((1, 3))) - 128.0)) < 0.5


def test_doubling_depth_halves_offsets():
    bbox = np.array([640.0, 480.0, 256.0])
    point = np.array([[0.3, -0.2, 0.0]])
    near = project(point, np.array([0.0, 0.0, 4.0]), 1000.0, bbox, IMAGE) - 128.0
    far = project(point, np.array([0.0, 0.0, 8.0]), 1000.0, bbox, IMAGE) - 128.0
    np.testing.assert_allclose(far, near / 2, atol=1e-12)


def test_projection_matches_homogeneous_matrix():
    rng = np.random.default_rng(4)
    for _ in range(20):
        focal = rng.uniform(800, 1500)
        bbox = np.array([rng.uniform(300, 900), rng.uniform(200, 700), rng.uniform(100, 400)])
        t = np.array([rng.normal(scale=0.3), rng.normal(scale=0.3), rng.uniform(3, 8)])
        points = rng.normal(scale=0.5, size=(10, 3))
        k = np.array([[focal, 0, IMAGE[0] / 2], [0, focal, IMAGE[1] / 2], [0, 0, 1]])
        crop = np.array([[256 / bbox[2], 0, 128 - bbox[0] * 256 / bbox[2]],
                         [0, 256 / bbox[2], 128 - bbox[1] * 256 / bbox[2]], [0, 0, 1]])
        h = (crop @ k @ (points + t).T).T
        np.testing.assert_allclose(project(points, t, focal, bbox, IMAGE), h[:, :2] / h[:, 2:], atol=1e-9)


def test_project_then_unproject_recovers_points():
    rng = np.random.default_rng(5)
    bbox = np.array([700.0, 400.0, 300.0])
    t = np.array([0.1, 0.2, 6.0])
    points = rng.normal(scale=0.5, size=(30, 3))
    uv = project(points, t, 1200.0, bbox, IMAGE)
    np.testing.assert_allclose(unproject(uv, points[:, 2] + t[2], t, 1200.0, bbox, IMAGE), points, atol=1e-9)


def test_point_behind_camera_lists_indices():
    bbox = np.array([640.0, 480.0, 256.0])
    points = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -6.0], [0.0, 0.0, 1.0]])
    with pytest.raises(ProjectionError) as info:
        project(points, np.array([0.0, 0.0, 5.0]), 1000.0, bbox, IMAGE)
    assert info.value.indices == [[1]]


def test_normalization_round_trip():
    px = np.array([[0.0, 256.0], [128.0, 64.0]])
    np.testing.assert_allclose(to_normalized(px), [[-1.0, 1.0], [0.0, -0.5]])
    np.testing.assert_allclose(from_normalized(to_normalized(px)), px)
