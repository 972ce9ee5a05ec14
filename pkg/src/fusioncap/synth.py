"""Procedural motion clips and the window datasets built from them.

Four motion regimes stand in for recorded mocap: fast periodic "dance",
slowly drifting motion, held static poses and smooth random keyframe
motion. Each clip is turned into IMU readings and preprocessed keypoints
seen by a fixed pinhole camera.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ShapeMismatch, TooShortSequence, ValidationError
from .sensors import (CameraIntrinsics, CameraPose, DegradationSpec, KeypointSequence, degrade_keypoints,
                      preprocess_keypoints, project_keypoints, synthesize_imu)
from .skeleton import MotionSequence, SkeletonModel, axis_angle_to_matrix, default_skeleton, matrix_to_rot6d

MOTION_KINDS = ("dance", "drift", "static", "spline")

# Per-joint (mean, amplitude) of local axis-angle components, radians.
_RANGES = {
    1: ((-0.2, 0.0, 0.1), (0.7, 0.25, 0.3)),
    2: ((-0.2, 0.0, -0.1), (0.7, 0.25, 0.3)),
    3: ((0.05, 0.0, 0.0), (0.2, 0.2, 0.12)),
    4: ((0.6, 0.0, 0.0), (0.6, 0.0, 0.0)),
    5: ((0.6, 0.0, 0.0), (0.6, 0.0, 0.0)),
    6: ((0.0, 0.0, 0.0), (0.15, 0.15, 0.1)),
    7: ((0.0, 0.0, 0.0), (0.3, 0.1, 0.15)),
    8: ((0.0, 0.0, 0.0), (0.3, 0.1, 0.15)),
    9: ((0.0, 0.0, 0.0), (0.12, 0.12, 0.08)),
    10: ((0.0, 0.0, 0.0), (0.15, 0.0, 0.0)),
    11: ((0.0, 0.0, 0.0), (0.15, 0.0, 0.0)),
    12: ((0.0, 0.0, 0.0), (0.2, 0.2, 0.1)),
    13: ((0.0, 0.0, 0.0), (0.08, 0.1, 0.12)),
    14: ((0.0, 0.0, 0.0), (0.08, 0.1, 0.12)),
    15: ((0.0, 0.0, 0.0), (0.3, 0.45, 0.2)),
    16: ((0.0, 0.1, -0.8), (0.5, 0.5, 0.8)),
    17: ((0.0, -0.1, 0.8), (0.5, 0.5, 0.8)),
    18: ((0.0, -0.7, 0.0), (0.0, 0.7, 0.0)),
    19: ((0.0, 0.7, 0.0), (0.0, 0.7, 0.0)),
    20: ((0.0, 0.0, 0.0), (0.3, 0.3, 0.3)),
    21: ((0.0, 0.0, 0.0), (0.3, 0.3, 0.3)),
    22: ((0.0, 0.0, 0.0), (0.1, 0.1, 0.1)),
    23: ((0.0, 0.0, 0.0), (0.1, 0.1, 0.1)),
}


def _joint_tables(J: int):
    mean = np.zeros((J, 3))
    amp = np.zeros((J, 3))
    for j, (m, a) in _RANGES.items():
        if j < J:
            mean[j], amp[j] = m, a
    return mean, amp


def _signals(kind: str, frames: int, fps: float, rng: np.random.Generator, shape) -> np.ndarray:
    """Unit-range signals of shape (frames,) + shape."""
    t = np.arange(frames) / fps
    if kind == "static":
        return np.broadcast_to(rng.uniform(-1, 1, size=shape), (frames,) + shape).copy()
    if kind in ("dance", "drift"):
        lo, hi = (0.8, 2.2) if kind == "dance" else (0.05, 0.3)
        out = np.zeros((frames,) + shape)
        for _ in range(2):
            f = rng.uniform(lo, hi, size=shape)
            phase = rng.uniform(0, 2 * np.pi, size=shape)
            out += 0.5 * np.sin(2 * np.pi * f * t.reshape((-1,) + (1,) * len(shape)) + phase)
        return out
    if kind == "spline":
        duration = max(t[-1], 1.0 / fps)
        knots = max(int(np.ceil(duration / 0.5)) + 1, 3)
        kt = np.linspace(0, duration, knots)
        kv = rng.uniform(-1, 1, size=(knots,) + shape)
        return np.clip(CubicSpline(kt, kv, axis=0, bc_type="clamped")(t), -1, 1)
    raise ValidationError(f"unknown motion kind {kind!r}")


def generate_motion(kind: str, frames: int, rng: np.random.Generator, skeleton: SkeletonModel | None = None,
                    fps: float = 60.0, travel: float = 0.4) -> MotionSequence:
    """One procedural clip with a root translation for camera projection.

    The subject stands about 3.5 m in front of the default camera and faces it.
    """
    skeleton = skeleton or default_skeleton()
    J = skeleton.joint_count
    mean, amp = _joint_tables(J)
    scale = 0.4 if kind == "drift" else 1.0
    sig = _signals(kind, frames, fps, rng, (J, 3))
    aa = mean + scale * amp * sig
    t = np.arange(frames) / fps
    yaw0 = rng.uniform(-0.6, 0.6)
    yaw_rate = 0.0 if kind == "static" else rng.uniform(-0.3, 0.3)
    root_sig = _signals(kind, frames, fps, rng, (2,))
    aa[:, 0, 0] = 0.1 * root_sig[:, 0]
    aa[:, 0, 1] = yaw0 + yaw_rate * t
    aa[:, 0, 2] = 0.08 * root_sig[:, 1]
    R = axis_angle_to_matrix(aa)
    rot6d = matrix_to_rot6d(R)
    trans_sig = _signals("drift" if kind != "static" else "static", frames, fps, rng, (2,))
    trans = np.zeros((frames, 3))
    trans[:, 0] = travel * trans_sig[:, 0]
    trans[:, 2] = -3.5 + travel * trans_sig[:, 1]
    return MotionSequence.from_rotations(skeleton, rot6d, fps=fps, root_translation=trans)


@dataclass
class WindowDataset:
    """Aligned fixed-length windows.

    rotations (W, N, J, 6), positions (W, N, J, 3), imu (W, N, 72) and
    keypoints (W, N, K, 3).
    """

    rotations: np.ndarray
    positions: np.ndarray
    imu: np.ndarray
    keypoints: np.ndarray
    kinds: list = field(default_factory=list)

    def __post_init__(self):
        W, N = self.rotations.shape[:2]
        for name in ("positions", "imu", "keypoints"):
            arr = getattr(self, name)
            if arr.shape[:2] != (W, N):
                raise ShapeMismatch(f"{name} leading shape {arr.shape[:2]} != {(W, N)}")

    def __len__(self):
        return self.rotations.shape[0]

    @property
    def window(self) -> int:
        return self.rotations.shape[1]

    def subset(self, idx) -> "WindowDataset":
        idx = np.asarray(idx)
        kinds = [self.kinds[i] for i in idx] if self.kinds else []
        return WindowDataset(self.rotations[idx], self.positions[idx], self.imu[idx], self.keypoints[idx], kinds)

    def with_keypoints(self, keypoints: np.ndarray) -> "WindowDataset":
        return WindowDataset(self.rotations, self.positions, self.imu, keypoints, list(self.kinds))

    def degraded(self, spec_for_window) -> "WindowDataset":
        """Apply ``spec_for_window(i) -> DegradationSpec`` to every window's keypoints."""
        kps = np.stack([degrade_keypoints(KeypointSequence(self.keypoints[i]), spec_for_window(i)).data
                        for i in range(len(self))])
        return self.with_keypoints(kps)

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for arr in (self.rotations, self.imu, self.keypoints):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def observe(motion: MotionSequence, skeleton: SkeletonModel | None = None,
            intrinsics: CameraIntrinsics | None = None, camera: CameraPose | None = None):
    """IMU array (N, 72) and preprocessed keypoints (N, K, 3) for a clip."""
    skeleton = skeleton or default_skeleton()
    intrinsics = intrinsics or CameraIntrinsics()
    camera = camera or CameraPose()
    if motion.frames < 3:
        raise TooShortSequence("clips need at least 3 frames")
    imu = synthesize_imu(skeleton, motion)
    raw = project_keypoints(skeleton, motion, intrinsics, camera, motion.root_translation)
    return imu.data, preprocess_keypoints(raw, intrinsics).data


def random_degradation(rng: np.random.Generator, frames: int, occlusion_prob=0.5, dropout_prob=0.1,
                       max_sigma=0.0) -> DegradationSpec:
    """Training-time augmentation: an occluded stretch, sparse dropout, optional jitter."""
    intervals = []
    if rng.random() < occlusion_prob:
        length = int(rng.integers(frames // 6, frames + 1))
        start = int(rng.integers(0, frames - length + 1))
        intervals.append([start, start + length])
    return DegradationSpec(occluded_frame_intervals=intervals,
                           per_keypoint_dropout_prob=float(rng.uniform(0, dropout_prob)),
                           gaussian_sigma=float(rng.uniform(0, max_sigma)) if max_sigma > 0 else 0.0,
                           rng_seed=int(rng.integers(0, 2**31)))


def make_windows(n_windows: int, window: int = 60, seed: int = 0, kinds=MOTION_KINDS, fps: float = 60.0,
                 skeleton: SkeletonModel | None = None, augment: dict | None = None) -> WindowDataset:
    """Independent clips of ``window`` frames, cycling through ``kinds``.

    ``augment`` holds keyword arguments for :func:`random_degradation`; when
    None the keypoints stay clean.
    """
    if window < 3:
        raise TooShortSequence("windows need at least 3 frames for IMU synthesis")
    skeleton = skeleton or default_skeleton()
    rng = np.random.default_rng(seed)
    rots, poss, imus, kps, names = [], [], [], [], []
    for i in range(n_windows):
        kind = kinds[i % len(kinds)]
        motion = generate_motion(kind, window, rng, skeleton, fps)
        imu, kp = observe(motion, skeleton)
        if augment is not None:
            spec = random_degradation(rng, window, **augment)
            kp = degrade_keypoints(KeypointSequence(kp), spec).data
        rots.append(motion.rotations)
        poss.append(motion.positions)
        imus.append(imu)
        kps.append(kp)
        names.append(kind)
    return WindowDataset(np.stack(rots), np.stack(poss), np.stack(imus), np.stack(kps), names)


def make_sequence(frames: int, kind: str = "spline", seed: int = 0, fps: float = 60.0,
                  skeleton: SkeletonModel | None = None):
    """A long clip plus its observations, for sliding-window and streaming runs."""
    skeleton = skeleton or default_skeleton()
    motion = generate_motion(kind, frames, np.random.default_rng(seed), skeleton, fps)
    imu, kp = observe(motion, skeleton)
    return motion, imu, kp
