"""scikit-learn style wrappers around the training and inference pipeline.

``X`` holds windows of per-frame observations: the 72 IMU channels followed
by the flattened keypoints, shape (windows, frames, 72 + 3K). Targets are
6D joint rotations (windows, frames, J, 6).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .denoiser import ConditioningMode, DenoiserConfig
from .errors import ShapeMismatch, ValidationError, WrongWindow
from .evaluation import train_mocap_model
from .metrics import mpjpe
from .pipeline import TrainConfig
from .sensors import IMU_DIM, CameraIntrinsics, preprocess_keypoints
from .skeleton import default_skeleton, forward_kinematics
from .synth import WindowDataset


def check_windows(X, imu_dim: int = IMU_DIM, window: int | None = None) -> np.ndarray:
    """Validate an observation array and return it as float64 (W, N, C)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ShapeMismatch(f"X must be (windows, frames, channels), got shape {X.shape}")
    if X.shape[2] <= imu_dim or (X.shape[2] - imu_dim) % 3:
        raise ShapeMismatch(f"X needs {imu_dim} IMU channels followed by 3 per keypoint, got {X.shape[2]}")
    if window is not None and X.shape[1] != window:
        raise WrongWindow(f"windows must have {window} frames, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("X contains NaN or infinite values")
    return X


def check_rotations(y, like: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 4 or y.shape[-1] != 6 or y.shape[:2] != like.shape[:2]:
        raise ShapeMismatch(f"y must be (windows, frames, J, 6) aligned with X, got {y.shape}")
    return y


def split_observations(X: np.ndarray, imu_dim: int = IMU_DIM):
    """(W, N, 72 + 3K) -> imu (W, N, 72), keypoints (W, N, K, 3)."""
    return X[..., :imu_dim], X[..., imu_dim:].reshape(X.shape[0], X.shape[1], -1, 3)


def _windowed_fk(skeleton, rotations: np.ndarray) -> np.ndarray:
    """Forward kinematics over (W, N, J, 6) -> (W, N, J, 3)."""
    W, N, J, _ = rotations.shape
    return forward_kinematics(skeleton, rotations.reshape(W * N, J, 6)).reshape(W, N, J, 3)


class DiffusionMocapRegressor(RegressorMixin, BaseEstimator):
    """Two-stage diffusion estimator of joint rotations from IMU and keypoints.

    ``predict`` returns 6D rotations; ``predict_positions`` returns joint
    positions; ``score`` is the negative MPJPE in millimeters.
    """

    def __init__(self, layers=2, model_dim=64, heads=4, dropout=0.1, mode="diffcap", one_stage=False,
                 regressor=None, total_steps=1000, batch_size=16, learning_rate=1e-4, weight_decay=0.01,
                 sampling_steps=5, random_state=0):
        self.layers = layers
        self.model_dim = model_dim
        self.heads = heads
        self.dropout = dropout
        self.mode = mode
        self.one_stage = one_stage
        self.regressor = regressor
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.sampling_steps = sampling_steps
        self.random_state = random_state

    def fit(self, X, y):
        X = check_windows(X)
        y = check_rotations(y, X)
        skeleton = default_skeleton()
        if y.shape[2] != skeleton.joint_count:
            raise ShapeMismatch(f"y has {y.shape[2]} joints, the skeleton has {skeleton.joint_count}")
        imu, kp = split_observations(X)
        positions = _windowed_fk(skeleton, y)
        dataset = WindowDataset(y, positions, imu, kp)
        model_config = DenoiserConfig(layers=self.layers, model_dim=self.model_dim, heads=self.heads,
                                      dropout=self.dropout, window=X.shape[1],
                                      conditioning_mode=ConditioningMode.parse(self.mode))
        train_config = TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                                   weight_decay=self.weight_decay, total_steps=self.total_steps,
                                   seed=self.random_state, sampling_steps=self.sampling_steps)
        self.model_ = train_mocap_model(dataset, model_config, train_config, one_stage=self.one_stage,
                                        regressor=self.regressor)
        self.window_ = X.shape[1]
        self.n_features_in_ = X.shape[2]
        return self

    def _infer(self, X):
        check_is_fitted(self, "model_")
        X = check_windows(X, window=self.window_)
        if X.shape[2] != self.n_features_in_:
            raise ShapeMismatch(f"X has {X.shape[2]} channels, the model was fit on {self.n_features_in_}")
        imu, kp = split_observations(X)
        return self.model_.infer_window(imu, kp, self.sampling_steps, self.random_state)

    def predict(self, X) -> np.ndarray:
        p, theta = self._infer(X)
        if theta is None:
            raise ValidationError("a joint-only model has no rotation output; use predict_positions")
        return theta

    def predict_positions(self, X) -> np.ndarray:
        p, theta = self._infer(X)
        if theta is None or self.model_.one_stage:
            return p
        return _windowed_fk(self.model_.skeleton, theta)

    def score(self, X, y, sample_weight=None) -> float:
        X = check_windows(X)
        gt = _windowed_fk(default_skeleton(), check_rotations(y, X))
        return -mpjpe(self.predict_positions(X), gt)


class KeypointPreprocessor(TransformerMixin, BaseEstimator):
    """Pixel keypoints (N, K, 3) -> Z=1 plane, root-relative keypoints.

    Stateless: ``fit`` only records the input width.
    """

    def __init__(self, fx=600.0, fy=600.0, cx=320.0, cy=240.0, root_index=0):
        self.fx = fx
        self.fy = fy
        self.cx = cx
        self.cy = cy
        self.root_index = root_index

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[2] != 3:
            raise ShapeMismatch(f"keypoints must be (N, K, 3), got {X.shape}")
        self.n_keypoints_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "n_keypoints_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[1:] != (self.n_keypoints_, 3):
            raise ShapeMismatch(f"keypoints must be (N, {self.n_keypoints_}, 3), got {X.shape}")
        intr = CameraIntrinsics(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy)
        return preprocess_keypoints(X, intr, self.root_index).data
