"""Evaluation protocol and ablation harnesses.

Every harness evaluates with the same protocol: batch inference over the
windows of a dataset with a fixed sampling seed, MPJPE/PA-MPJPE of the
final positions against ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser import ConditioningMode, DenoiserConfig
from .diffusion import cosine_schedule
from .errors import MissingModel, ValidationError
from .metrics import mpjpe, pa_mpjpe, per_joint_error
from .pipeline import (DiffusionStage, MocapModel, RegressionStage, TrainConfig, latency_report,
                       sliding_window_inference, train_joint_model, train_pose_model)
from .sensors import DegradationSpec
from .skeleton import forward_kinematics
from .synth import WindowDataset


@dataclass
class MetricReport:
    mpjpe_mm: float
    pa_mpjpe_mm: float
    per_sequence: list = field(default_factory=list)
    fingerprint: dict = field(default_factory=dict)
    seed: int = 0
    extras: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {"mpjpe": self.mpjpe_mm, "pa_mpjpe": self.pa_mpjpe_mm}
        out.update(self.extras)
        return out


def _report(pred: np.ndarray, gt: np.ndarray, fingerprint: dict, seed: int, extras=None) -> MetricReport:
    """pred/gt: (S, F, J, 3), one entry per sequence or window."""
    per_seq = [float(per_joint_error(p, g).mean() * 1000.0) for p, g in zip(pred, gt)]
    flat_p = pred.reshape(-1, pred.shape[-2], 3)
    flat_g = gt.reshape(-1, gt.shape[-2], 3)
    return MetricReport(mpjpe(flat_p, flat_g), pa_mpjpe(flat_p, flat_g), per_seq, dict(fingerprint), seed,
                        dict(extras or {}))


def predict_windows(model: MocapModel, dataset: WindowDataset, steps: int = 5, seed: int = 0,
                    batch_size: int = 64):
    """Stage-one positions and final positions, both (W, N, J, 3)."""
    first, final = [], []
    J = model.skeleton.joint_count
    for b, i in enumerate(range(0, len(dataset), batch_size)):
        sl = slice(i, i + batch_size)
        p, theta = model.infer_window(dataset.imu[sl], dataset.keypoints[sl], steps, seed + b)
        first.append(p)
        if theta is None:
            final.append(p)
        else:
            final.append(forward_kinematics(model.skeleton, theta.reshape(-1, J, 6)).reshape(p.shape))
    return np.concatenate(first), np.concatenate(final)


def evaluate(model: MocapModel, dataset: WindowDataset, steps: int = 5, seed: int = 0, **fingerprint) -> MetricReport:
    p, final = predict_windows(model, dataset, steps, seed)
    fp = {"dataset": dataset.fingerprint(), "steps": steps}
    fp.update(fingerprint)
    extras = {"joint_mpjpe": mpjpe(p, dataset.positions)}
    return _report(final, dataset.positions, fp, seed, extras)


def train_stages(dataset: WindowDataset, model_config: DenoiserConfig, config: TrainConfig,
                 one_stage: bool = False, joint_only: bool = False, regressor: str | None = None,
                 on_checkpoint=None):
    """Train a complete estimator and keep the per-stage training results.

    ``regressor`` replaces diffusion with direct regression: "full" for both
    stages, "pose" for the second stage only. ``on_checkpoint(name, model,
    step, losses)`` is called at every checkpoint interval. Returns
    ``(model, joint_result, pose_result)``; pose_result is None for a single stage.
    """
    if regressor not in (None, "full", "pose"):
        raise ValidationError(f"regressor must be None, 'full' or 'pose', got {regressor!r}")
    schedule = cosine_schedule(config.T, variance=config.variance)

    def hook(name):
        if on_checkpoint is None:
            return None
        return lambda model, step, losses: on_checkpoint(name, model, step, losses)

    reg_joint = regressor == "full"
    joint = train_joint_model(dataset, model_config, config, one_stage=one_stage, regression=reg_joint,
                              on_checkpoint=hook("joint"))
    joint_stage = RegressionStage(joint.model) if reg_joint else DiffusionStage(joint.model, schedule)
    if one_stage or joint_only:
        return MocapModel(joint_stage, None, one_stage=one_stage), joint, None
    reg_pose = regressor in ("full", "pose")
    pose = train_pose_model(dataset, joint_stage, model_config, config, regression=reg_pose,
                            on_checkpoint=hook("pose"))
    pose_stage = RegressionStage(pose.model) if reg_pose else DiffusionStage(pose.model, schedule)
    return MocapModel(joint_stage, pose_stage), joint, pose


def train_mocap_model(dataset: WindowDataset, model_config: DenoiserConfig, config: TrainConfig,
                      one_stage: bool = False, joint_only: bool = False, regressor: str | None = None) -> MocapModel:
    """Train a complete estimator; see :func:`train_stages`."""
    return train_stages(dataset, model_config, config, one_stage, joint_only, regressor)[0]


def stage_ablation(models: dict, dataset: WindowDataset, steps: int = 5, seed: int = 0) -> dict:
    """Reports for {"one-stage": model, "two-stage": model}."""
    return {name: evaluate(m, dataset, steps, seed, variant=name) for name, m in models.items()}


MODES = (ConditioningMode.DIFFCAP, ConditioningMode.BOTH_AS_CONDITION, ConditioningMode.BOTH_AS_SEQUENTIAL)


def train_conditioning_models(dataset: WindowDataset, model_config: DenoiserConfig, config: TrainConfig,
                              joint_only: bool = True) -> dict:
    models = {}
    for mode in MODES:
        cfg = DenoiserConfig.from_dict({**model_config.to_dict(), "conditioning_mode": mode})
        models[mode] = train_mocap_model(dataset, cfg, config, joint_only=joint_only)
    return models


def ablation_conditioning(models: dict, datasets: dict, steps: int = 5, seed: int = 0) -> dict:
    """{mode: {dataset_name: MetricReport}} under an identical protocol."""
    for mode in MODES:
        if mode not in models:
            raise MissingModel(f"no model trained for conditioning mode {mode.value}")
    return {mode: {name: evaluate(models[mode], ds, steps, seed, mode=mode.value, split=name)
                   for name, ds in datasets.items()}
            for mode in MODES}


def noisy_keypoints(dataset: WindowDataset, sigma: float, seed: int = 0) -> WindowDataset:
    if sigma == 0:
        return dataset
    return dataset.degraded(lambda i: DegradationSpec(gaussian_sigma=sigma, rng_seed=seed * 100_003 + i))


def robustness_sweep(model: MocapModel, dataset: WindowDataset, sigmas=(0.0, 0.01, 0.05, 0.1, 0.2),
                     steps: int = 5, seed: int = 0) -> dict:
    """Gaussian keypoint jitter at each sigma, confidences untouched."""
    return {s: evaluate(model, noisy_keypoints(dataset, s, seed), steps, seed, sigma=s) for s in sigmas}


def steps_sweep(model: MocapModel, dataset: WindowDataset, steps=(1, 5, 10), seed: int = 0) -> dict:
    return {S: evaluate(model, dataset, S, seed) for S in steps}


def baseline_regressor(dataset: WindowDataset, model_config: DenoiserConfig, config: TrainConfig,
                       pose_only: bool = False) -> MocapModel:
    """Deterministic transformer regressors on the same backbone."""
    return train_mocap_model(dataset, model_config, config, regressor="pose" if pose_only else "full")


def sliding_sweep(model: MocapModel, sequences: list, slides=(10, 20, 30), steps: int = 5, seed: int = 0,
                  fps: float = 60.0) -> dict:
    """``sequences`` holds (positions (F, J, 3), imu (F, 72), keypoints (F, K, 3)) triples."""
    out = {}
    J = model.skeleton.joint_count
    for s in slides:
        preds, gts, counts = [], [], []
        for gt, imu, kp in sequences:
            p, theta = sliding_window_inference(imu, kp, model, s, steps, seed)
            if not model.one_stage and model.pose is not None:
                p = forward_kinematics(model.skeleton, theta.reshape(-1, J, 6))
            preds.append(p)
            gts.append(gt)
            counts.append(len(p))
        per_seq = [float(per_joint_error(p, g).mean() * 1000.0) for p, g in zip(preds, gts)]
        allp = np.concatenate(preds)
        allg = np.concatenate(gts)
        out[s] = MetricReport(mpjpe(allp, allg), pa_mpjpe(allp, allg), per_seq, {"slide": s, "steps": steps}, seed,
                              {"latency_s": latency_report(s, fps), "frames_out": int(sum(counts)),
                               "frames_in": int(sum(len(g) for g in gts))})
    return out
