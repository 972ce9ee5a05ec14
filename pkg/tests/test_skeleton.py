import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from fusioncap.errors import DegenerateRotation, NotARotation, ShapeMismatch, ValidationError
from fusioncap.skeleton import (SMPL_PARENTS, MotionSequence, SkeletonModel, axis_angle_to_matrix,
                                forward_kinematics, forward_kinematics_full, global_rotations, matrix_to_rot6d,
                                rot6d_to_matrix)


def random_rotations(rng, shape):
    n = int(np.prod(shape))
    R = Rotation.random(n, random_state=int(rng.integers(0, 2**31))).as_matrix()
    return R.reshape(tuple(shape) + (3, 3))


def test_rot6d_round_trip(rng):
    R = random_rotations(rng, (50, 24))
    back = rot6d_to_matrix(matrix_to_rot6d(R))
    np.testing.assert_allclose(back, R, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-10, 10)))
def test_rot6d_output_is_proper_rotation(v):
    a1, a2 = v[:3], v[3:]
    if np.linalg.norm(a1) < 1e-3 or np.linalg.norm(a2) < 1e-3:
        return
    cos = abs(a1 @ a2) / (np.linalg.norm(a1) * np.linalg.norm(a2))
    if cos > 1 - 1e-6:
        return
    R = rot6d_to_matrix(v)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-10)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-10)
    # the first column keeps the direction of the first input vector
    np.testing.assert_allclose(R[:, 0], a1 / np.linalg.norm(a1), atol=1e-12)


def test_rot6d_gram_schmidt_matches_qr_oracle(rng):
    v = rng.normal(size=(100, 6))
    R = rot6d_to_matrix(v)
    for i in range(len(v)):
        q, r = np.linalg.qr(np.stack([v[i, :3], v[i, 3:]], axis=1))
        q = q * np.sign(np.diag(r))  # make the QR factor agree with a positive diagonal
        np.testing.assert_allclose(R[i, :, :2], q, atol=1e-12)


@pytest.mark.parametrize("bad", [
    np.zeros(6),
    np.array([1.0, 0, 0, 2.0, 0, 0]),
    np.array([0, 0, 0, 0, 1.0, 0]),
    np.array([np.nan, 0, 0, 0, 1.0, 0]),
])
def test_rot6d_degenerate_single(bad):
    with pytest.raises(DegenerateRotation):
        rot6d_to_matrix(bad)


def test_rot6d_degenerate_reports_location():
    r = np.tile(np.array([1.0, 0, 0, 0, 1.0, 0]), (4, 24, 1))
    r[2, 7] = 0.0
    with pytest.raises(DegenerateRotation) as info:
        rot6d_to_matrix(r)
    assert (info.value.frame, info.value.joint) == (2, 7)


def test_matrix_to_rot6d_rejects_reflection_and_shear():
    with pytest.raises(NotARotation):
        matrix_to_rot6d(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(NotARotation):
        matrix_to_rot6d(np.array([[1.0, 0.1, 0], [0, 1, 0], [0, 0, 1]]))
    with pytest.raises(ShapeMismatch):
        matrix_to_rot6d(np.eye(4))


def test_axis_angle_matches_scipy(rng):
    aa = rng.normal(size=(200, 3))
    aa[0] = 0.0
    np.testing.assert_allclose(axis_angle_to_matrix(aa), Rotation.from_rotvec(aa).as_matrix(), atol=1e-12)


def test_rest_pose_fk_equals_offset_sums(skeleton):
    ident = np.tile(np.array([1.0, 0, 0, 0, 1.0, 0]), (24, 1))
    np.testing.assert_allclose(forward_kinematics(skeleton, ident), skeleton.rest_positions(), atol=1e-15)


def test_fk_preserves_bone_lengths(skeleton, rng):
    rot6d = matrix_to_rot6d(random_rotations(rng, (10, 24)))
    pos = forward_kinematics(skeleton, rot6d)
    parents = np.array(SMPL_PARENTS)
    bones = np.linalg.norm(pos[:, 1:] - pos[:, parents[1:]], axis=-1)
    expected = np.linalg.norm(skeleton.bone_offset[1:], axis=-1)
    np.testing.assert_allclose(bones, np.broadcast_to(expected, bones.shape), atol=1e-12)


def test_fk_against_naive_recursion(skeleton, rng):
    rot6d = matrix_to_rot6d(random_rotations(rng, (3, 24)))
    local = rot6d_to_matrix(rot6d)
    pos, glob = forward_kinematics_full(skeleton, rot6d)

    def world(f, j):
        if j == 0:
            return local[f, 0], np.zeros(3)
        Rp, pp = world(f, SMPL_PARENTS[j])
        return Rp @ local[f, j], pp + Rp @ skeleton.bone_offset[j]

    for f in range(3):
        for j in range(24):
            R, p = world(f, j)
            np.testing.assert_allclose(glob[f, j], R, atol=1e-12)
            np.testing.assert_allclose(pos[f, j], p, atol=1e-12)


def test_fk_global_rotation_equivariance(skeleton, rng):
    rot6d = matrix_to_rot6d(random_rotations(rng, (20, 24)))
    G = random_rotations(rng, ())
    rotated = rot6d.copy()
    rotated[:, 0] = matrix_to_rot6d(G @ rot6d_to_matrix(rot6d[:, 0]))
    np.testing.assert_allclose(forward_kinematics(skeleton, rotated), forward_kinematics(skeleton, rot6d) @ G.T,
                               atol=1e-12)


def test_global_rotations_root_is_local(skeleton, rng):
    rot6d = matrix_to_rot6d(random_rotations(rng, (5, 24)))
    np.testing.assert_allclose(global_rotations(skeleton, rot6d)[:, 0], rot6d_to_matrix(rot6d[:, 0]))


def test_fk_single_frame_shape(skeleton):
    ident = np.tile(np.array([1.0, 0, 0, 0, 1.0, 0]), (24, 1))
    assert forward_kinematics(skeleton, ident).shape == (24, 3)
    with pytest.raises(ShapeMismatch):
        forward_kinematics(skeleton, np.zeros((2, 23, 6)))


def test_skeleton_validation():
    parents = np.array(SMPL_PARENTS)
    with pytest.raises(ValidationError):
        SkeletonModel(parents[::-1].copy(), np.zeros((24, 3)))
    with pytest.raises(ShapeMismatch):
        SkeletonModel(parents, np.zeros((23, 3)))
    with pytest.raises(ValidationError):
        SkeletonModel(parents, np.zeros((24, 3)), imu_site_joints=(0, 1, 2))


def test_motion_sequence_consistency(skeleton, rng):
    rot6d = matrix_to_rot6d(random_rotations(rng, (6, 24)))
    motion = MotionSequence.from_rotations(skeleton, rot6d)
    assert motion.frames == 6 and motion.check_consistent(skeleton)
    motion.positions[0, 3] += 0.01
    assert not motion.check_consistent(skeleton)
    with pytest.raises(ValidationError):
        MotionSequence(rot6d, fps=0.0)
