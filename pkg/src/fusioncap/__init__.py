"""Diffusion-based motion capture from six IMUs and 2D keypoints."""
from .denoiser import ConditioningMode, DenoiserConfig, JointDenoiser, PoseDenoiser, build_denoiser
from .diffusion import NoiseSchedule, cosine_schedule, ddim_step, forward_diffuse, posterior_mean, sample, training_loss
from .errors import FusionCapError, NonFiniteLoss, ValidationError
from .evaluation import (MetricReport, ablation_conditioning, baseline_regressor, evaluate, robustness_sweep,
                         sliding_sweep, steps_sweep, train_mocap_model)
from .metrics import mpjpe, pa_mpjpe
from .pipeline import (MocapModel, StreamState, TrainConfig, infer_window, latency_report, sliding_window_inference,
                       stream_push, train_joint_model, train_pose_model)
from .skeleton import MotionSequence, SkeletonModel, default_skeleton, forward_kinematics
from .synth import WindowDataset, make_sequence, make_windows

__version__ = "0.1.0"

__all__ = [
    "ConditioningMode", "DenoiserConfig", "JointDenoiser", "PoseDenoiser", "build_denoiser",
    "NoiseSchedule", "cosine_schedule", "ddim_step", "forward_diffuse", "posterior_mean", "sample", "training_loss",
    "FusionCapError", "NonFiniteLoss", "ValidationError",
    "MetricReport", "ablation_conditioning", "baseline_regressor", "evaluate", "robustness_sweep", "sliding_sweep",
    "steps_sweep", "train_mocap_model", "mpjpe", "pa_mpjpe",
    "MocapModel", "StreamState", "TrainConfig", "infer_window", "latency_report", "sliding_window_inference",
    "stream_push", "train_joint_model", "train_pose_model",
    "MotionSequence", "SkeletonModel", "default_skeleton", "forward_kinematics",
    "WindowDataset", "make_sequence", "make_windows",
]
