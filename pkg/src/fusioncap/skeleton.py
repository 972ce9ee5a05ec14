"""Articulated body model, 6D rotations and forward kinematics.

Joint order follows the 24-joint SMPL layout. All arrays are float64 and
positions are in meters, y-up, root-relative.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRotation, NotARotation, ShapeMismatch, ValidationError

JOINT_NAMES = (
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist", "l_hand", "r_hand",
)

SMPL_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)

# Mean-body rest offsets (m) of each joint from its parent, parent frame.
# +x is the body's left, +y up, +z forward.
MEAN_BONE_OFFSETS = (
    (0.0, 0.0, 0.0),
    (0.065, -0.090, -0.005),
    (-0.065, -0.090, -0.005),
    (0.0, 0.110, -0.025),
    (0.040, -0.380, 0.005),
    (-0.040, -0.380, 0.005),
    (0.0, 0.135, 0.005),
    (-0.010, -0.400, -0.040),
    (0.010, -0.400, -0.040),
    (0.0, 0.055, 0.025),
    (0.030, -0.060, 0.120),
    (-0.030, -0.060, 0.120),
    (0.0, 0.215, -0.035),
    (0.075, 0.120, -0.010),
    (-0.075, 0.120, -0.010),
    (0.0, 0.090, 0.050),
    (0.120, 0.045, -0.010),
    (-0.120, 0.045, -0.010),
    (0.260, -0.012, -0.025),
    (-0.260, -0.012, -0.025),
    (0.250, 0.010, -0.005),
    (-0.250, 0.010, -0.005),
    (0.085, -0.010, -0.015),
    (-0.085, -0.010, -0.015),
)

# Sensor order: left forearm, right forearm, left lower leg, right lower leg, head, pelvis.
IMU_SITE_JOINTS = (18, 19, 4, 5, 15, 0)
IMU_SITE_NAMES = ("l_forearm", "r_forearm", "l_lower_leg", "r_lower_leg", "head", "pelvis")

_EPS = 1e-8


@dataclass(frozen=True)
class SkeletonModel:
    parent_index: np.ndarray
    bone_offset: np.ndarray
    root_index: int = 0
    imu_site_joints: tuple = IMU_SITE_JOINTS

    def __post_init__(self):
        parents = np.asarray(self.parent_index, dtype=np.int64)
        offsets = np.asarray(self.bone_offset, dtype=np.float64)
        object.__setattr__(self, "parent_index", parents)
        object.__setattr__(self, "bone_offset", offsets)
        object.__setattr__(self, "imu_site_joints", tuple(int(j) for j in self.imu_site_joints))
        J = parents.shape[0]
        if offsets.shape != (J, 3):
            raise ShapeMismatch(f"bone_offset must be ({J}, 3), got {offsets.shape}")
        if not 0 <= self.root_index < J or parents[self.root_index] != -1:
            raise ValidationError("root joint must carry parent -1")
        for j in range(J):
            if j == self.root_index:
                continue
            if not 0 <= parents[j] < j:
                raise ValidationError(f"joint {j} has parent {parents[j]}; parents must precede children")
        if len(self.imu_site_joints) != 6 or not all(0 <= j < J for j in self.imu_site_joints):
            raise ValidationError("imu_site_joints must hold 6 valid joint indices")

    @property
    def joint_count(self) -> int:
        return int(self.parent_index.shape[0])

    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((self.joint_count, 3))
        for j in range(self.joint_count):
            p = self.parent_index[j]
            if p >= 0:
                pos[j] = pos[p] + self.bone_offset[j]
        return pos


def default_skeleton() -> SkeletonModel:
    return SkeletonModel(np.array(SMPL_PARENTS), np.array(MEAN_BONE_OFFSETS))


def rot6d_to_matrix(r: np.ndarray) -> np.ndarray:
    """Map (..., 6) 6D rotations to (..., 3, 3) rotation matrices.

    The six numbers are the first two matrix columns. The first column is
    normalized, the second is Gram-Schmidt orthogonalized against it and the
    third is their cross product. Raises DegenerateRotation when either column
    is (near) zero or the two columns are parallel.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise ShapeMismatch(f"expected trailing dimension 6, got {r.shape}")
    if not np.all(np.isfinite(r)):
        raise DegenerateRotation("non-finite 6D rotation", *_first_bad(~np.isfinite(r).all(axis=-1)))
    a1 = r[..., 0:3]
    a2 = r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1)
    n2 = np.linalg.norm(a2, axis=-1)
    small = (n1 < _EPS) | (n2 < _EPS)
    if np.any(small):
        raise DegenerateRotation("6D column norm below 1e-8", *_first_bad(small))
    b1 = a1 / n1[..., None]
    u2 = a2 / n2[..., None]
    u2 = u2 - np.sum(b1 * u2, axis=-1, keepdims=True) * b1
    m2 = np.linalg.norm(u2, axis=-1)
    parallel = m2 < _EPS
    if np.any(parallel):
        raise DegenerateRotation("6D columns are parallel", *_first_bad(parallel))
    b2 = u2 / m2[..., None]
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def _first_bad(mask: np.ndarray):
    """(frame, joint) of the first True entry for (N, J)-shaped masks."""
    idx = np.argwhere(np.atleast_1d(mask))
    if idx.size == 0:
        return None, None
    first = idx[0]
    if mask.ndim >= 2:
        return int(first[-2]), int(first[-1])
    if mask.ndim == 1:
        return None, int(first[0])
    return None, None


def matrix_to_rot6d(R: np.ndarray, atol: float = 1e-5) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise ShapeMismatch(f"expected (..., 3, 3), got {R.shape}")
    eye = np.eye(3)
    err = np.abs(np.swapaxes(R, -1, -2) @ R - eye).max(axis=(-2, -1))
    if np.any(err > atol) or np.any(np.linalg.det(R) < 0):
        raise NotARotation(f"matrix is not a proper rotation (orthonormality error {np.max(err):.2e})")
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def axis_angle_to_matrix(aa: np.ndarray) -> np.ndarray:
    """Rodrigues formula for (..., 3) rotation vectors."""
    aa = np.asarray(aa, dtype=np.float64)
    angle = np.linalg.norm(aa, axis=-1, keepdims=True)
    axis = np.where(angle > 1e-12, aa / np.maximum(angle, 1e-12), 0.0)
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    K = np.stack([
        np.stack([zero, -z, y], -1),
        np.stack([z, zero, -x], -1),
        np.stack([-y, x, zero], -1),
    ], -2)
    s = np.sin(angle)[..., None]
    c = np.cos(angle)[..., None]
    return np.eye(3) + s * K + (1 - c) * (K @ K)


def global_rotations(skeleton: SkeletonModel, rotations: np.ndarray) -> np.ndarray:
    """(N, J, 3, 3) world orientation of every joint."""
    return forward_kinematics_full(skeleton, rotations)[1]


def forward_kinematics(skeleton: SkeletonModel, rotations: np.ndarray) -> np.ndarray:
    """Root-relative joint positions (N, J, 3) for local 6D rotations (N, J, 6).

    A single frame of shape (J, 6) is accepted and returns (J, 3).
    """
    return forward_kinematics_full(skeleton, rotations)[0]


def forward_kinematics_full(skeleton: SkeletonModel, rotations: np.ndarray):
    rotations = np.asarray(rotations, dtype=np.float64)
    single = rotations.ndim == 2
    if single:
        rotations = rotations[None]
    J = skeleton.joint_count
    if rotations.ndim != 3 or rotations.shape[1:] != (J, 6):
        raise ShapeMismatch(f"rotations must be (N, {J}, 6), got {rotations.shape}")
    local = rot6d_to_matrix(rotations)
    N = rotations.shape[0]
    glob = np.empty((N, J, 3, 3))
    pos = np.empty((N, J, 3))
    for j in range(J):
        p = skeleton.parent_index[j]
        if p < 0:
            glob[:, j] = local[:, j]
            pos[:, j] = 0.0
        else:
            glob[:, j] = glob[:, p] @ local[:, j]
            pos[:, j] = pos[:, p] + glob[:, p] @ skeleton.bone_offset[j]
    if single:
        return pos[0], glob[0]
    return pos, glob


@dataclass
class MotionSequence:
    """An N-frame clip: local 6D joint rotations plus root-relative positions."""

    rotations: np.ndarray
    positions: np.ndarray | None = None
    fps: float = 60.0
    root_translation: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        if self.rotations.ndim != 3 or self.rotations.shape[-1] != 6 or self.rotations.shape[0] < 1:
            raise ShapeMismatch(f"rotations must be (N>=1, J, 6), got {self.rotations.shape}")
        if not np.all(np.isfinite(self.rotations)):
            raise ValidationError("rotations contain non-finite values")
        if self.fps <= 0:
            raise ValidationError("fps must be positive")
        if self.positions is not None:
            self.positions = np.asarray(self.positions, dtype=np.float64)
            if self.positions.shape != self.rotations.shape[:2] + (3,):
                raise ShapeMismatch("positions shape does not match rotations")

    @property
    def frames(self) -> int:
        return self.rotations.shape[0]

    @classmethod
    def from_rotations(cls, skeleton: SkeletonModel, rotations, fps=60.0, root_translation=None):
        return cls(rotations, forward_kinematics(skeleton, rotations), fps, root_translation)

    def check_consistent(self, skeleton: SkeletonModel, atol: float = 1e-6) -> bool:
        if self.positions is None:
            return True
        return bool(np.allclose(forward_kinematics(skeleton, self.rotations), self.positions, rtol=0, atol=atol))
