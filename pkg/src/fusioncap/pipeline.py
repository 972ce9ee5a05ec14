"""Two-stage training and inference plus sliding-window streaming."""
from __future__ import annotations

import copy
import logging
from collections import deque
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .denoiser import DenoiserConfig, build_denoiser
from .diffusion import NoiseSchedule, cosine_schedule, sample, training_loss
from .errors import NonFiniteLoss, OutOfOrderFrame, ShapeMismatch, ValidationError, WrongWindow
from .skeleton import SkeletonModel, default_skeleton, forward_kinematics
from .synth import WindowDataset

log = logging.getLogger(__name__)

ALLOWED_SLIDES = (10, 20, 30)


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    total_steps: int = 1000
    seed: int = 0
    T: int = 1000
    checkpoint_every: int = 0
    sampling_steps: int = 5
    variance: str = "posterior"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.total_steps < 0:
            raise ValidationError("total_steps must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def channel_stats(arr: np.ndarray):
    """Per-channel mean and std over all leading axes."""
    flat = np.asarray(arr, dtype=np.float64).reshape(-1, arr.shape[-1])
    return flat.mean(axis=0), flat.std(axis=0)


def _flat(arr: np.ndarray) -> np.ndarray:
    """(W, N, a, b) -> (W, N, a*b)."""
    return arr.reshape(arr.shape[0], arr.shape[1], -1)


def _tensor(arr) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(arr), dtype=torch.float32)


@dataclass
class TrainResult:
    model: torch.nn.Module
    losses: list
    step: int
    checkpoints: list = field(default_factory=list)
    p0: np.ndarray | None = None


def fit_denoiser(model, target: np.ndarray, conditions: dict, config: TrainConfig,
                 schedule: NoiseSchedule | None = None, on_checkpoint=None, start_step: int = 0,
                 regression: bool = False) -> TrainResult:
    """Minimize the diffusion MSE objective with AdamW over shuffled minibatches.

    ``target`` is (W, N, data_dim) in raw units; ``conditions`` maps the
    model's keyword inputs to (W, N, dim) arrays. With ``regression`` the
    model is trained as a plain regressor: zero x_t input and t = 0.
    """
    schedule = schedule or cosine_schedule(config.T, variance=config.variance)
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 7919 * start_step)
    x0_all = model.encode_target(_tensor(target)).detach()
    cond_all = {k: _tensor(v) for k, v in conditions.items()}
    W = x0_all.shape[0]
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    losses, checkpoints = [], []
    good_state = copy.deepcopy(model.state_dict())
    order = torch.randperm(W, generator=gen)
    cursor = 0
    model.train()
    step = start_step
    for step in range(start_step + 1, start_step + config.total_steps + 1):
        if cursor + min(config.batch_size, W) > W:
            order = torch.randperm(W, generator=gen)
            cursor = 0
        idx = order[cursor:cursor + config.batch_size]
        cursor += len(idx)
        cond = {k: v[idx] for k, v in cond_all.items()}
        try:
            if regression:
                loss = regression_loss(model, x0_all[idx], cond)
            else:
                loss = training_loss(model, x0_all[idx], schedule, gen, cond)
        except NonFiniteLoss:
            model.load_state_dict(good_state)
            raise
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            good_state = copy.deepcopy(model.state_dict())
            checkpoints.append(step)
            if on_checkpoint is not None:
                on_checkpoint(model, step, losses)
    model.eval()
    return TrainResult(model, losses, step, checkpoints)


def regression_loss(model, x0: torch.Tensor, conditions: dict) -> torch.Tensor:
    pred = model(torch.zeros_like(x0), torch.zeros(x0.shape[0], dtype=torch.long), **conditions)
    loss = torch.mean((pred - x0) ** 2)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"training loss is {loss.item()}")
    return loss


def joint_config_for(dataset: WindowDataset, base: DenoiserConfig | None = None, one_stage: bool = False,
                     **overrides) -> DenoiserConfig:
    base = base or DenoiserConfig()
    J = dataset.positions.shape[2]
    K = dataset.keypoints.shape[2]
    d = base.to_dict()
    d.update(kind="joint", data_dim=(6 if one_stage else 3) * J, imu_dim=dataset.imu.shape[-1],
             keypoint_dim=3 * K, aux_dim=3 * J, window=dataset.window)
    d.update(overrides)
    return DenoiserConfig.from_dict(d)


def pose_config_for(dataset: WindowDataset, base: DenoiserConfig | None = None, **overrides) -> DenoiserConfig:
    base = base or DenoiserConfig()
    J = dataset.positions.shape[2]
    d = base.to_dict()
    d.update(kind="pose", data_dim=6 * J, imu_dim=dataset.imu.shape[-1], keypoint_dim=3 * dataset.keypoints.shape[2],
             aux_dim=3 * J, window=dataset.window, conditioning_mode="diffcap")
    d.update(overrides)
    return DenoiserConfig.from_dict(d)


def _seeded_model(config: DenoiserConfig, seed: int):
    torch.manual_seed(seed)
    return build_denoiser(config)


def train_joint_model(dataset: WindowDataset, model_config: DenoiserConfig | None, config: TrainConfig,
                      one_stage: bool = False, regression: bool = False, **kw) -> TrainResult:
    """First stage: (imu, keypoints) -> joint positions, or rotations when ``one_stage``."""
    cfg = joint_config_for(dataset, model_config, one_stage)
    model = _seeded_model(cfg, config.seed)
    target, conds = joint_training_data(dataset, one_stage)
    model.set_normalization(imu=channel_stats(dataset.imu), kp=channel_stats(conds["k"]), x=channel_stats(target))
    return fit_denoiser(model, target, conds, config, regression=regression, **kw)


def joint_training_data(dataset: WindowDataset, one_stage: bool = False):
    """(target, conditions) arrays for the first stage."""
    target = _flat(dataset.rotations if one_stage else dataset.positions)
    return target, {"m": dataset.imu, "k": _flat(dataset.keypoints)}


def pose_training_data(dataset: WindowDataset, p0: np.ndarray):
    """(target, conditions) arrays for the second stage."""
    p0 = np.asarray(p0).reshape(len(dataset), dataset.window, -1)
    return _flat(dataset.rotations), {"m": dataset.imu, "p0": p0}


def train_pose_model(dataset: WindowDataset, joint_stage, model_config: DenoiserConfig | None,
                     config: TrainConfig, p0: np.ndarray | None = None, regression: bool = False,
                     **kw) -> TrainResult:
    """Second stage: (imu, first-stage joint positions) -> rotations.

    The first-stage estimates are sampled once per window and reused for every
    step. Pass ``p0`` directly (e.g. ground truth) to bypass the first stage.
    """
    if p0 is None:
        p0 = estimate_positions(joint_stage, dataset, config.sampling_steps, config.seed)
    target, conds = pose_training_data(dataset, p0)
    cfg = pose_config_for(dataset, model_config)
    model = _seeded_model(cfg, config.seed + 1)
    model.set_normalization(imu=channel_stats(dataset.imu), aux=channel_stats(conds["p0"]), x=channel_stats(target))
    result = fit_denoiser(model, target, conds, config, regression=regression, **kw)
    result.p0 = conds["p0"]
    return result


class DiffusionStage:
    """Wraps a trained denoiser as a sampler returning raw-unit estimates."""

    regression = False

    def __init__(self, model, schedule: NoiseSchedule):
        self.model = model
        self.schedule = schedule

    def __call__(self, conditions: dict, steps: int, generator: torch.Generator) -> torch.Tensor:
        self.model.eval()
        cfg = self.model.config
        batch = next(iter(conditions.values())).shape[0]
        with torch.no_grad():
            x = sample(self.model, (batch, cfg.window, cfg.data_dim), self.schedule, steps, generator, conditions)
            return self.model.decode_target(x)


class RegressionStage:
    """Same backbone used as a deterministic regressor (no noise input, t = 0)."""

    regression = True

    def __init__(self, model):
        self.model = model

    def __call__(self, conditions: dict, steps: int, generator: torch.Generator) -> torch.Tensor:
        self.model.eval()
        cfg = self.model.config
        batch = next(iter(conditions.values())).shape[0]
        with torch.no_grad():
            zeros = torch.zeros(batch, cfg.window, cfg.data_dim)
            out = self.model(zeros, torch.zeros(batch, dtype=torch.long), **conditions)
            return self.model.decode_target(out)


def estimate_positions(joint_stage, dataset: WindowDataset, steps: int = 5, seed: int = 0,
                       batch_size: int = 64) -> np.ndarray:
    """First-stage estimates for every window, (W, N, 3J)."""
    out = []
    gen = torch.Generator().manual_seed(seed)
    for i in range(0, len(dataset), batch_size):
        sl = slice(i, i + batch_size)
        cond = {"m": _tensor(dataset.imu[sl]), "k": _tensor(_flat(dataset.keypoints[sl]))}
        out.append(joint_stage(cond, steps, gen).numpy().astype(np.float64))
    return np.concatenate(out, axis=0)


@dataclass
class MocapModel:
    """Joint stage followed by pose stage, or one stage predicting rotations."""

    joint: object
    pose: object | None = None
    skeleton: SkeletonModel = field(default_factory=default_skeleton)
    one_stage: bool = False

    @property
    def window(self) -> int:
        return self.joint.model.config.window

    def infer_window(self, m: np.ndarray, k: np.ndarray, steps: int = 5, seed: int = 0):
        """Positions (..., N, J, 3) and 6D rotations (..., N, J, 6) for one window or a batch.

        ``k`` may be (..., N, K, 3) or already flattened to (..., N, 3K).
        Rotations are None for a joint-only model.
        """
        m = np.asarray(m, dtype=np.float64)
        k = np.asarray(k, dtype=np.float64)
        single = m.ndim == 2
        if single:
            m, k = m[None], k[None]
        k = k.reshape(k.shape[0], k.shape[1], -1)
        N = self.window
        if m.shape[1] != N or k.shape[1] != N:
            raise WrongWindow(f"inputs must cover exactly {N} frames")
        if m.shape[0] != k.shape[0]:
            raise ShapeMismatch("imu and keypoint batch sizes differ")
        gen = torch.Generator().manual_seed(int(seed))
        mt, kt = _tensor(m), _tensor(k)
        J = self.skeleton.joint_count
        first = self.joint({"m": mt, "k": kt}, steps, gen)
        if self.one_stage:
            theta = first.numpy().astype(np.float64).reshape(m.shape[0], N, J, 6)
            p = forward_kinematics(self.skeleton, theta.reshape(-1, J, 6)).reshape(m.shape[0], N, J, 3)
        else:
            p = first.numpy().astype(np.float64).reshape(m.shape[0], N, J, 3)
            theta = None
            if self.pose is not None:
                theta = self.pose({"m": mt, "p0": first}, steps, gen).numpy().astype(np.float64)
                theta = theta.reshape(m.shape[0], N, J, 6)
        if single:
            return p[0], None if theta is None else theta[0]
        return p, theta


def infer_window(m, k, model: MocapModel, steps: int = 5, seed: int = 0):
    return model.infer_window(m, k, steps, seed)


# -- sliding windows ---------------------------------------------------------

def window_weights(window: int) -> np.ndarray:
    """Triangular per-frame weights; overlapping halves of two windows offset
    by window/2 form complementary linear ramps."""
    i = np.arange(window, dtype=np.float64)
    return np.minimum(i + 0.5, window - i - 0.5)


def window_starts(frames: int, window: int, slide: int) -> list:
    """Regular starts every ``slide`` frames.

    When the grid leaves a tail uncovered, one more window starts at the next
    grid position and is padded with the last frame. Keeping the tail window
    on the grid means no window ever reaches back before a frame a streaming
    consumer has already emitted.
    """
    if slide < 1:
        raise ValidationError("slide must be >= 1")
    if frames <= window:
        return [0]
    starts = list(range(0, frames - window + 1, slide))
    if starts[-1] + window < frames:
        starts.append(starts[-1] + slide)
    return starts


def window_seed(seed: int, start: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(start)]).generate_state(1)[0])


def blend_weight_matrix(frames: int, window: int, slide: int) -> np.ndarray:
    """Normalized contribution (windows, frames) of each window to each frame."""
    starts = window_starts(frames, window, slide)
    w = window_weights(window)
    mat = np.zeros((len(starts), frames))
    for r, a in enumerate(starts):
        n = min(window, frames - a)
        mat[r, a:a + n] = w[:n]
    return mat / mat.sum(axis=0, keepdims=True)


def _pad_window(arr: np.ndarray, window: int) -> np.ndarray:
    if arr.shape[0] >= window:
        return arr
    return np.concatenate([arr, np.repeat(arr[-1:], window - arr.shape[0], axis=0)], axis=0)


def sliding_window_inference(m: np.ndarray, k: np.ndarray, model: MocapModel, slide: int = 30,
                             steps: int = 5, seed: int = 0):
    """Offline blended estimates (F, J, 3) and (F, J, 6) for a whole sequence.

    Each window is inferred independently (no autoregression) and frames
    are averaged with triangular weights normalized per frame.
    """
    m = np.asarray(m, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    F = m.shape[0]
    N = model.window
    J = model.skeleton.joint_count
    if not 1 <= slide <= N:
        raise ValidationError(f"slide must lie in [1, {N}]")
    if F == 0 or k.shape[0] != F:
        raise ShapeMismatch(f"imu has {F} frames, keypoints {k.shape[0]}")
    w = window_weights(N)
    acc_p = np.zeros((F, J, 3))
    acc_r = np.zeros((F, J, 6))
    acc_w = np.zeros(F)
    for a in window_starts(F, N, slide):
        n = min(N, F - a)
        p, r = model.infer_window(_pad_window(m[a:a + N], N), _pad_window(k[a:a + N], N), steps, window_seed(seed, a))
        r = _rotations_or_zeros(r, p)
        for i in range(n):
            acc_p[a + i] += w[i] * p[i]
            acc_r[a + i] += w[i] * r[i]
            acc_w[a + i] += w[i]
    return acc_p / acc_w[:, None, None], acc_r / acc_w[:, None, None]


def _rotations_or_zeros(r, p):
    """Joint-only models have no rotation output; blend zeros in their place."""
    if r is None:
        return np.zeros(p.shape[:-1] + (6,))
    return r


class StreamState:
    """Frame-by-frame sliding-window inference.

    Frames are pushed in order. Once a full window is buffered it is inferred
    and accumulated; frames no later window can reach are emitted. ``flush``
    finishes a finite stream.
    """

    def __init__(self, model: MocapModel, slide: int = 30, steps: int = 5, seed: int = 0):
        self.model = model
        self.window = model.window
        if not 1 <= slide <= self.window:
            raise ValidationError(f"slide must lie in [1, {self.window}]")
        self.slide = slide
        self.steps = steps
        self.seed = seed
        self.buffer = deque(maxlen=self.window)
        self.frames_seen = 0
        self.next_start = 0
        self.last_start = None
        self.cursor = 0
        self.weights = window_weights(self.window)
        self.pending = {}

    def _accumulate(self, start: int, m: np.ndarray, k: np.ndarray, count: int):
        p, r = self.model.infer_window(m, k, self.steps, window_seed(self.seed, start))
        r = _rotations_or_zeros(r, p)
        for i in range(count):
            f = start + i
            entry = self.pending.get(f)
            if entry is None:
                entry = self.pending[f] = [np.zeros_like(p[0]), np.zeros_like(r[0]), 0.0]
            entry[0] += self.weights[i] * p[i]
            entry[1] += self.weights[i] * r[i]
            entry[2] += self.weights[i]

    def _emit_until(self, stop: int) -> list:
        out = []
        while self.cursor < stop:
            acc_p, acc_r, acc_w = self.pending.pop(self.cursor)
            out.append((self.cursor, acc_p / acc_w, acc_r / acc_w))
            self.cursor += 1
        return out

    def _buffer_arrays(self):
        m = np.stack([b[0] for b in self.buffer])
        k = np.stack([b[1] for b in self.buffer])
        return m, k

    def push(self, m_frame, k_frame, index: int | None = None) -> list:
        """Add one frame; returns a list of emitted (frame_index, positions, rotations)."""
        if index is not None and index != self.frames_seen:
            raise OutOfOrderFrame(f"expected frame {self.frames_seen}, got {index}")
        self.buffer.append((np.asarray(m_frame, dtype=np.float64), np.asarray(k_frame, dtype=np.float64)))
        self.frames_seen += 1
        if self.frames_seen == self.next_start + self.window:
            m, k = self._buffer_arrays()
            self._accumulate(self.next_start, m, k, self.window)
            self.last_start = self.next_start
            self.next_start += self.slide
            return self._emit_until(self.next_start)
        return []

    def flush(self) -> list:
        F = self.frames_seen
        if F == 0:
            return []
        if self.last_start is None:
            m, k = self._buffer_arrays()
            self._accumulate(0, _pad_window(m, self.window), _pad_window(k, self.window), F)
            self.last_start = 0
        elif self.last_start + self.window < F:
            start = self.next_start
            m, k = self._buffer_arrays()
            tail = F - start
            self._accumulate(start, _pad_window(m[-tail:], self.window), _pad_window(k[-tail:], self.window), tail)
            self.last_start = start
        return self._emit_until(F)

    def buffered(self) -> int:
        return len(self.buffer)


def stream_push(state: StreamState, m_frame, k_frame, index: int | None = None) -> list:
    return state.push(m_frame, k_frame, index)


def run_stream(model: MocapModel, m: np.ndarray, k: np.ndarray, slide: int = 30, steps: int = 5, seed: int = 0):
    """Replay a recorded sequence through :class:`StreamState`."""
    state = StreamState(model, slide, steps, seed)
    emitted = []
    for i in range(len(m)):
        emitted.extend(state.push(m[i], k[i], i))
    emitted.extend(state.flush())
    p = np.stack([e[1] for e in emitted])
    r = np.stack([e[2] for e in emitted])
    return p, r


def latency_report(slide: int, fps: float) -> float:
    """Latency in seconds as ``slide / fps``, the interval between window emissions.

    A frame's final value also waits for the last window covering it, which
    can add up to ``window - slide`` frames on top of this figure.
    """
    if slide < 1 or fps <= 0:
        raise ValidationError("slide must be >= 1 and fps > 0")
    return slide / fps
