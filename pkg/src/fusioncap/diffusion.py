"""Gaussian diffusion with x0-prediction: schedule, forward noising,
posterior resampling, deterministic DDIM sampling and the MSE objective.

Schedule arrays have length T + 1 and are indexed by the step t in 1..T.
Slot 0 carries the boundary convention alpha_bar[0] = 1, beta[0] = 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidStepPair, InvalidSteps, NonFiniteLoss, ShapeMismatch, ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    def _gather(self, table: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
        """Coefficient(s) for step t, broadcastable against ``like`` (batch-first)."""
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            idx = t.detach().cpu().numpy().astype(np.int64)
            if np.any(idx < 0) or np.any(idx > self.T):
                raise ValidationError(f"timestep outside [0, {self.T}]")
            vals = torch.as_tensor(table[idx], dtype=like.dtype, device=like.device)
            return vals.reshape((-1,) + (1,) * (like.ndim - 1))
        t = int(t)
        if not 0 <= t <= self.T:
            raise ValidationError(f"timestep {t} outside [0, {self.T}]")
        return torch.as_tensor(table[t], dtype=like.dtype, device=like.device)


def cosine_schedule(T: int = 1000, s: float = 0.008, max_beta: float = 0.999,
                    variance: str = "posterior") -> NoiseSchedule:
    """Squared-cosine alpha_bar schedule.

    ``variance`` picks the fixed reverse-process variance: "posterior" for
    beta_tilde_t, "beta" for beta_t.
    """
    if T < 2:
        raise InvalidSteps(f"T must be >= 2, got {T}")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T) + s) / (1 + s) * math.pi / 2) ** 2
    target = f / f[0]
    beta = np.zeros(T + 1)
    beta[1:] = np.minimum(1.0 - target[1:] / target[:-1], max_beta)
    return _schedule_from_beta(beta, variance)


def _schedule_from_beta(beta: np.ndarray, variance: str = "posterior") -> NoiseSchedule:
    alpha = 1.0 - beta
    alpha_bar = np.ones_like(beta)
    for t in range(1, len(beta)):
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t]
    if variance == "posterior":
        post = np.zeros_like(beta)
        post[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    elif variance == "beta":
        post = beta.copy()
    else:
        raise ValidationError(f"unknown variance choice {variance!r}")
    return NoiseSchedule(beta, alpha, alpha_bar, post)


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise InvalidSteps(f"T must be >= 2, got {T}")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    return _schedule_from_beta(beta)


def posterior_coefficients(schedule: NoiseSchedule, t: int):
    """Weights (on x_t, on x0) of the posterior mean at step t."""
    ab_t = schedule.alpha_bar[t]
    ab_prev = schedule.alpha_bar[t - 1]
    c_xt = math.sqrt(schedule.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab_t)
    c_x0 = math.sqrt(ab_prev) * schedule.beta[t] / (1.0 - ab_t)
    return c_xt, c_x0


def _check_same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape {tuple(a.shape)} != {tuple(b.shape)}")


def forward_diffuse(schedule: NoiseSchedule, x0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    _check_same_shape(x0, eps)
    ab = schedule._gather(schedule.alpha_bar, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def forward_kernel_step(schedule: NoiseSchedule, x_prev: torch.Tensor, t: int,
                        generator: torch.Generator | None = None) -> torch.Tensor:
    """One step of q(x_t | x_{t-1})."""
    z = torch.randn(x_prev.shape, generator=generator, dtype=x_prev.dtype)
    a = float(schedule.alpha[t])
    return math.sqrt(a) * x_prev + math.sqrt(1.0 - a) * z


def posterior_mean(schedule: NoiseSchedule, x_t: torch.Tensor, x0_hat: torch.Tensor, t: int) -> torch.Tensor:
    _check_same_shape(x_t, x0_hat)
    t = int(t)
    if not 1 <= t <= schedule.T:
        raise ValidationError(f"timestep {t} outside [1, {schedule.T}]")
    if t == 1:
        return x0_hat.clone()
    c_xt, c_x0 = posterior_coefficients(schedule, t)
    return c_xt * x_t + c_x0 * x0_hat


def ddpm_resample(schedule: NoiseSchedule, x_t: torch.Tensor, x0_hat: torch.Tensor, t: int,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    mu = posterior_mean(schedule, x_t, x0_hat, t)
    var = float(schedule.posterior_var[t])
    if t == 1 or var == 0.0:
        return mu
    z = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + math.sqrt(var) * z


def ddim_step(schedule: NoiseSchedule, x_t: torch.Tensor, x0_hat: torch.Tensor, t: int, t_prev: int) -> torch.Tensor:
    """Deterministic (eta = 0) jump from step t to t_prev < t."""
    _check_same_shape(x_t, x0_hat)
    t, t_prev = int(t), int(t_prev)
    if not 0 <= t_prev < t <= schedule.T:
        raise InvalidStepPair(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    if t_prev == 0:
        return x0_hat.clone()
    ab_t = float(schedule.alpha_bar[t])
    ab_prev = float(schedule.alpha_bar[t_prev])
    eps_hat = (x_t - math.sqrt(ab_t) * x0_hat) / math.sqrt(1.0 - ab_t)
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Uniformly spaced, strictly decreasing sequence from T down to 0."""
    if not 1 <= steps <= T:
        raise InvalidSteps(f"sampling steps must lie in [1, {T}], got {steps}")
    return np.round(np.linspace(T, 0, steps + 1)).astype(np.int64)


def sample(denoiser, shape, schedule: NoiseSchedule, steps: int = 5,
           generator: torch.Generator | None = None, conditions: dict | None = None,
           method: str = "ddim", dtype=torch.float32) -> torch.Tensor:
    """Draw x0 by iterating from pure noise.

    ``denoiser(x_t, t, **conditions)`` must return the x0 estimate; t is a
    long tensor with one entry per batch element. With method="ddpm" the
    ancestral sampler runs every one of the T steps.
    """
    conditions = conditions or {}
    x = torch.randn(shape, generator=generator, dtype=dtype)
    batch = shape[0]
    if method == "ddim":
        ts = ddim_timesteps(schedule.T, steps)
        x0_hat = x
        for t, t_prev in zip(ts[:-1], ts[1:]):
            t_vec = torch.full((batch,), int(t), dtype=torch.long)
            x0_hat = denoiser(x, t_vec, **conditions)
            x = ddim_step(schedule, x, x0_hat, int(t), int(t_prev))
        return x0_hat
    if method == "ddpm":
        if steps != schedule.T:
            raise InvalidSteps("ancestral sampling runs all T steps")
        for t in range(schedule.T, 0, -1):
            t_vec = torch.full((batch,), t, dtype=torch.long)
            x0_hat = denoiser(x, t_vec, **conditions)
            x = ddpm_resample(schedule, x, x0_hat, t, generator)
        return x
    raise ValidationError(f"unknown sampling method {method!r}")


def training_loss(denoiser, x0: torch.Tensor, schedule: NoiseSchedule,
                  generator: torch.Generator | None = None, conditions: dict | None = None) -> torch.Tensor:
    """MSE between the denoiser's x0 estimate and x0 at a uniformly drawn step.

    Returns the scalar loss tensor; call ``.backward()`` for gradients.
    """
    if not torch.all(torch.isfinite(x0)):
        raise ValidationError("x0 contains non-finite values")
    conditions = conditions or {}
    batch = x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (batch,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = forward_diffuse(schedule, x0, t, eps)
    pred = denoiser(x_t, t, **conditions)
    loss = torch.mean((pred - x0) ** 2)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"training loss is {loss.item()}")
    return loss
