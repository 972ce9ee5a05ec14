"""Synthetic IMU and 2D keypoint observations plus keypoint degradation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch, TooShortSequence, ValidationError
from .skeleton import MotionSequence, SkeletonModel, forward_kinematics_full

N_IMUS = 6
IMU_DIM = 72
DEFAULT_KEYPOINTS = 33

# Keypoint -> (joint, offset in the joint's world-oriented frame, meters).
# Slot 0 is the root keypoint, slots 1..23 sit on the remaining SMPL joints,
# the last nine are face, fingertip and toe landmarks.
KEYPOINT_TABLE = (
    tuple((j, (0.0, 0.0, 0.0)) for j in range(24))
    + (
        (15, (0.0, 0.020, 0.110)),     # nose
        (15, (0.035, 0.050, 0.090)),   # left eye
        (15, (-0.035, 0.050, 0.090)),  # right eye
        (15, (0.075, 0.030, 0.0)),     # left ear
        (15, (-0.075, 0.030, 0.0)),    # right ear
        (22, (0.070, -0.010, 0.0)),    # left index tip
        (23, (-0.070, -0.010, 0.0)),   # right index tip
        (10, (0.0, -0.020, 0.080)),    # left toe
        (11, (0.0, -0.020, 0.080)),    # right toe
    )
)
ROOT_KEYPOINT = 0


@dataclass
class ImuSequence:
    """Per-frame readings of 6 sensors flattened to 72 floats.

    Each sensor contributes its row-major 3x3 orientation followed by its
    acceleration (m/s^2, gravity excluded).
    """

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != IMU_DIM:
            raise ShapeMismatch(f"IMU data must be (N, {IMU_DIM}), got {self.data.shape}")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def orientations(self) -> np.ndarray:
        return self.data.reshape(-1, N_IMUS, 12)[:, :, :9].reshape(-1, N_IMUS, 3, 3)

    @property
    def accelerations(self) -> np.ndarray:
        return self.data.reshape(-1, N_IMUS, 12)[:, :, 9:]

    @classmethod
    def from_parts(cls, orientations: np.ndarray, accelerations: np.ndarray) -> "ImuSequence":
        N = orientations.shape[0]
        block = np.concatenate([orientations.reshape(N, N_IMUS, 9), accelerations.reshape(N, N_IMUS, 3)], axis=-1)
        return cls(block.reshape(N, IMU_DIM))


@dataclass
class KeypointSequence:
    """Preprocessed keypoints (N, K, 3): plane x, y and confidence.

    The root keypoint holds its absolute Z=1 plane position, all others are
    root-relative. Invisible keypoints are (0, 0, 0).
    """

    data: np.ndarray
    root_index: int = ROOT_KEYPOINT

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ShapeMismatch(f"keypoint data must be (N, K, 3), got {self.data.shape}")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def keypoint_count(self) -> int:
        return self.data.shape[1]

    @property
    def confidence(self) -> np.ndarray:
        return self.data[..., 2]

    def flat(self) -> np.ndarray:
        return self.data.reshape(self.frames, -1)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 600.0
    fy: float = 600.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")


@dataclass(frozen=True)
class CameraPose:
    """Rigid world-to-camera transform: X_cam = R @ X_world + t."""

    R: np.ndarray = field(default_factory=lambda: np.diag([1.0, -1.0, -1.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValidationError("camera rotation must be a proper rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.R.T + self.t


@dataclass
class DegradationSpec:
    occluded_frame_intervals: list = field(default_factory=list)
    per_keypoint_dropout_prob: float = 0.0
    gaussian_sigma: float = 0.0
    out_of_view_intervals: list = field(default_factory=list)
    rng_seed: int = 0

    def validate(self, frames: int):
        if not 0.0 <= self.per_keypoint_dropout_prob <= 1.0:
            raise ValidationError("dropout probability must lie in [0, 1]")
        if self.gaussian_sigma < 0:
            raise ValidationError("gaussian_sigma must be non-negative")
        for start, end in list(self.occluded_frame_intervals) + list(self.out_of_view_intervals):
            if not 0 <= start <= end <= frames:
                raise ValidationError(f"interval [{start}, {end}) outside [0, {frames})")


def site_acceleration(positions: np.ndarray, fps: float) -> np.ndarray:
    """Second central difference along axis 0, boundary frames copy their neighbour."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[0] < 3:
        raise TooShortSequence(f"need at least 3 frames for central differences, got {positions.shape[0]}")
    if fps <= 0:
        raise ValidationError("fps must be positive")
    acc = np.empty_like(positions)
    acc[1:-1] = (positions[2:] - 2.0 * positions[1:-1] + positions[:-2]) * (fps * fps)
    acc[0] = acc[1]
    acc[-1] = acc[-2]
    return acc


def _moving_average(x: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return x
    pad = width // 2
    padded = np.concatenate([np.repeat(x[:1], pad, 0), x, np.repeat(x[-1:], width - 1 - pad, 0)], axis=0)
    kernel = np.ones(width) / width
    return np.apply_along_axis(lambda v: np.convolve(v, kernel, mode="valid"), 0, padded)


def synthesize_imu(skeleton: SkeletonModel, motion: MotionSequence, smooth: int = 0) -> ImuSequence:
    """Orientation = FK world rotation of each sensor joint; acceleration from
    finite differences of its root-relative position (no gravity term).

    ``smooth`` > 1 applies a centered moving average of that width to the
    accelerations.
    """
    if motion.frames < 3:
        raise TooShortSequence(f"IMU synthesis needs N >= 3, got {motion.frames}")
    pos, glob = forward_kinematics_full(skeleton, motion.rotations)
    sites = list(skeleton.imu_site_joints)
    acc = site_acceleration(pos[:, sites], motion.fps)
    acc = _moving_average(acc, smooth)
    return ImuSequence.from_parts(glob[:, sites], acc)


def keypoints_world(skeleton: SkeletonModel, motion: MotionSequence, root_translation=None,
                    table=KEYPOINT_TABLE) -> np.ndarray:
    """3D world positions (N, K, 3) of the keypoint landmarks."""
    pos, glob = forward_kinematics_full(skeleton, motion.rotations)
    joints = np.array([j for j, _ in table])
    offsets = np.array([o for _, o in table], dtype=np.float64)
    pts = pos[:, joints] + np.einsum("nkab,kb->nka", glob[:, joints], offsets)
    if root_translation is not None:
        pts = pts + np.asarray(root_translation, dtype=np.float64).reshape(-1, 1, 3)
    return pts


def project_points(points_cam: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame points (..., 3) to (..., 3) = [u, v, conf]."""
    X, Y, Z = points_cam[..., 0], points_cam[..., 1], points_cam[..., 2]
    front = Z > 1e-6
    safe_z = np.where(front, Z, 1.0)
    u = intrinsics.fx * X / safe_z + intrinsics.cx
    v = intrinsics.fy * Y / safe_z + intrinsics.cy
    inside = front & (u >= 0) & (u < intrinsics.width) & (v >= 0) & (v < intrinsics.height)
    out = np.zeros(points_cam.shape[:-1] + (3,))
    out[..., 0] = np.where(inside, u, 0.0)
    out[..., 1] = np.where(inside, v, 0.0)
    out[..., 2] = inside.astype(np.float64)
    return out


def project_keypoints(skeleton: SkeletonModel, motion: MotionSequence, intrinsics: CameraIntrinsics,
                      camera_pose: CameraPose, root_translation) -> np.ndarray:
    """Raw detector-like keypoints (N, K, 3): pixel u, v and confidence."""
    pts = keypoints_world(skeleton, motion, root_translation)
    return project_points(camera_pose.apply(pts), intrinsics)


def preprocess_keypoints(raw: np.ndarray, intrinsics: CameraIntrinsics,
                         root_index: int = ROOT_KEYPOINT) -> KeypointSequence:
    """Back-project pixels onto the Z=1 plane and root-normalize.

    Frames whose root keypoint is invisible have no defined root-relative
    coordinates and are marked fully invisible.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ShapeMismatch(f"raw keypoints must be (N, K, 3), got {raw.shape}")
    conf = raw[..., 2].copy()
    visible = conf > 0
    xy = np.empty(raw.shape[:2] + (2,))
    xy[..., 0] = (raw[..., 0] - intrinsics.cx) / intrinsics.fx
    xy[..., 1] = (raw[..., 1] - intrinsics.cy) / intrinsics.fy
    root_vis = visible[:, root_index]
    root_xy = xy[:, root_index].copy()
    rel = xy - root_xy[:, None, :]
    rel[:, root_index] = root_xy
    keep = visible & root_vis[:, None]
    out = np.zeros(raw.shape)
    out[..., :2] = np.where(keep[..., None], rel, 0.0)
    out[..., 2] = np.where(keep, conf, 0.0)
    return KeypointSequence(out, root_index)


def degrade_keypoints(k: KeypointSequence, spec: DegradationSpec) -> KeypointSequence:
    """Occlusion/out-of-view blanking, per-keypoint dropout and Gaussian jitter.

    Noise perturbs plane coordinates of surviving keypoints only; confidences
    are never changed by it.
    """
    spec.validate(k.frames)
    data = k.data.copy()
    for start, end in list(spec.occluded_frame_intervals) + list(spec.out_of_view_intervals):
        data[start:end] = 0.0
    rng = np.random.default_rng(spec.rng_seed)
    if spec.per_keypoint_dropout_prob > 0:
        drop = rng.random(data.shape[:2]) < spec.per_keypoint_dropout_prob
        data[drop] = 0.0
    if spec.gaussian_sigma > 0:
        alive = data[..., 2] > 0
        noise = rng.normal(0.0, spec.gaussian_sigma, size=data.shape[:2] + (2,))
        data[..., :2] += np.where(alive[..., None], noise, 0.0)
    return KeypointSequence(data, k.root_index)
