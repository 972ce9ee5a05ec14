"""Transformer-encoder denoisers.

Two model kinds share one backbone:

* ``JointDenoiser`` estimates clean joint positions from noisy positions,
  per-frame IMU readings and a window of 2D keypoints.
* ``PoseDenoiser`` estimates clean 6D joint rotations from noisy rotations,
  IMU readings and the joint positions produced by the first stage. It never
  sees keypoints.

Sequence tokens are the N per-frame embeddings followed by a single
condition token. The condition token takes the last positional slot and its
output is dropped before the output projection.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from enum import Enum

import numpy as np
import torch
from torch import nn

from .errors import ModeMismatch, ShapeMismatch, ValidationError, WrongWindow


class ConditioningMode(str, Enum):
    DIFFCAP = "diffcap"
    BOTH_AS_CONDITION = "both-cond"
    BOTH_AS_SEQUENTIAL = "both-seq"

    @classmethod
    def parse(cls, value) -> "ConditioningMode":
        if isinstance(value, cls):
            return value
        aliases = {"diffcap": cls.DIFFCAP, "both-cond": cls.BOTH_AS_CONDITION,
                   "both_as_condition": cls.BOTH_AS_CONDITION, "both-seq": cls.BOTH_AS_SEQUENTIAL,
                   "both_as_sequential": cls.BOTH_AS_SEQUENTIAL}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValidationError(f"unknown conditioning mode {value!r}") from None


@dataclass
class DenoiserConfig:
    kind: str = "joint"
    data_dim: int = 72
    imu_dim: int = 72
    keypoint_dim: int = 99
    aux_dim: int = 72
    layers: int = 8
    heads: int = 4
    model_dim: int = 512
    ff_dim: int | None = None
    dropout: float = 0.1
    window: int = 60
    conditioning_mode: ConditioningMode = ConditioningMode.DIFFCAP
    activation: str = "gelu"

    def __post_init__(self):
        self.conditioning_mode = ConditioningMode.parse(self.conditioning_mode)
        if self.ff_dim is None:
            self.ff_dim = 2 * self.model_dim
        if self.kind not in ("joint", "pose"):
            raise ValidationError(f"kind must be 'joint' or 'pose', got {self.kind!r}")
        if self.kind == "pose" and self.conditioning_mode is not ConditioningMode.DIFFCAP:
            raise ModeMismatch("the pose model only supports the default conditioning")
        if self.model_dim % self.heads:
            raise ValidationError("model_dim must be divisible by heads")
        if self.activation not in ("gelu", "relu"):
            raise ValidationError(f"unsupported activation {self.activation!r}")
        for name in ("data_dim", "imu_dim", "model_dim", "ff_dim", "window", "heads"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.layers < 0 or not 0.0 <= self.dropout < 1.0:
            raise ValidationError("invalid layers/dropout")

    @property
    def frame_input_dim(self) -> int:
        mode = self.conditioning_mode
        if self.kind == "pose":
            return self.imu_dim + self.data_dim + self.aux_dim
        if mode is ConditioningMode.DIFFCAP:
            return self.imu_dim + self.data_dim
        if mode is ConditioningMode.BOTH_AS_CONDITION:
            return self.data_dim
        return self.imu_dim + self.keypoint_dim + self.data_dim

    @property
    def condition_input_dim(self) -> int:
        """Width of the flattened window fed to the condition projection (0: none)."""
        if self.kind == "pose":
            return 0
        mode = self.conditioning_mode
        if mode is ConditioningMode.DIFFCAP:
            return self.window * self.keypoint_dim
        if mode is ConditioningMode.BOTH_AS_CONDITION:
            return self.window * (self.imu_dim + self.keypoint_dim)
        return 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conditioning_mode"] = self.conditioning_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Transformer-style sin/cos encoding of integer positions, shape (..., dim)."""
    t = torch.as_tensor(t, dtype=torch.float64)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(emb.shape[:-1] + (1,), dtype=emb.dtype)], dim=-1)
    return emb.float()


def parameter_count(config: DenoiserConfig) -> int:
    """Number of learned parameters of a denoiser built from ``config``."""
    D, F, L = config.model_dim, config.ff_dim, config.layers
    total = 2 * (D * D + D)  # timestep feed-forward
    if config.condition_input_dim:
        total += config.condition_input_dim * D + D
    total += config.frame_input_dim * D + D
    per_layer = (3 * D * D + 3 * D) + (D * D + D) + (D * F + F) + (F * D + D) + 4 * D
    total += L * per_layer
    if L > 0:
        total += 2 * D
    total += D * config.data_dim + config.data_dim
    return total


class _TransformerDenoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        D = config.model_dim
        act = nn.GELU if config.activation == "gelu" else nn.ReLU
        self.time_mlp = nn.Sequential(nn.Linear(D, D), act(), nn.Linear(D, D))
        self.cond_proj = nn.Linear(config.condition_input_dim, D) if config.condition_input_dim else None
        self.frame_proj = nn.Linear(config.frame_input_dim, D)
        self.layers = nn.ModuleList([
            nn.TransformerEncoderLayer(D, config.heads, config.ff_dim, config.dropout,
                                       activation=config.activation, batch_first=True, norm_first=True)
            for _ in range(config.layers)
        ])
        self.final_norm = nn.LayerNorm(D) if config.layers > 0 else None
        self.input_dropout = nn.Dropout(config.dropout)
        self.out_proj = nn.Linear(D, config.data_dim)
        self.register_buffer("pos_table", sinusoidal_embedding(torch.arange(config.window + 1), D))
        for name, dim in (("imu", config.imu_dim), ("kp", config.keypoint_dim),
                          ("aux", config.aux_dim), ("x", config.data_dim)):
            self.register_buffer(f"{name}_mean", torch.zeros(dim))
            self.register_buffer(f"{name}_std", torch.ones(dim))

    # -- normalization -------------------------------------------------
    def set_normalization(self, **stats):
        """Store per-channel (mean, std) pairs for imu, kp, aux and x."""
        for name, (mean, std) in stats.items():
            std = np.where(np.asarray(std) < 1e-6, 1.0, std)
            getattr(self, f"{name}_mean").copy_(torch.as_tensor(mean, dtype=torch.float32))
            getattr(self, f"{name}_std").copy_(torch.as_tensor(std, dtype=torch.float32))

    def _norm(self, name, v):
        return (v - getattr(self, f"{name}_mean")) / getattr(self, f"{name}_std")

    def encode_target(self, x: torch.Tensor) -> torch.Tensor:
        return self._norm("x", x)

    def decode_target(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.x_std + self.x_mean

    # -- building blocks -----------------------------------------------
    def timestep_embedding(self, t) -> torch.Tensor:
        t = torch.as_tensor(t)
        return self.time_mlp(sinusoidal_embedding(t, self.config.model_dim).to(self.pos_table.dtype))

    def _condition(self, t, window_data: torch.Tensor | None) -> torch.Tensor:
        c = self.timestep_embedding(t)
        if window_data is not None:
            c = c + self.cond_proj(window_data.flatten(1))
        return c

    def _check_frames(self, name, v, batch=None):
        N = self.config.window
        if v.ndim != 3 or v.shape[1] != N:
            raise WrongWindow(f"{name} must have {N} frames, got shape {tuple(v.shape)}")
        if batch is not None and v.shape[0] != batch:
            raise ShapeMismatch(f"{name} batch {v.shape[0]} != {batch}")

    def _run(self, frames: torch.Tensor, cond: torch.Tensor, return_tokens=False):
        tokens = torch.cat([frames, cond[:, None, :]], dim=1)
        tokens = self.input_dropout(tokens + self.pos_table)
        h = tokens
        for layer in self.layers:
            h = layer(h)
        if self.final_norm is not None:
            h = self.final_norm(h)
        out = self.out_proj(h[:, :-1])
        if return_tokens:
            return out, tokens
        return out


class JointDenoiser(_TransformerDenoiser):
    """x_t (B, N, data_dim), imu (B, N, imu_dim), keypoints (B, N, kp_dim) -> x0 estimate."""

    def __init__(self, config: DenoiserConfig):
        if config.kind != "joint":
            raise ModeMismatch("JointDenoiser needs kind='joint'")
        super().__init__(config)

    def encode_condition(self, t, k: torch.Tensor | None, m: torch.Tensor | None = None) -> torch.Tensor:
        mode = self.config.conditioning_mode
        if mode is ConditioningMode.DIFFCAP:
            if k is not None:
                self._check_frames("keypoints", k)
                k = self._norm("kp", k)
            return self._condition(t, k)
        if mode is ConditioningMode.BOTH_AS_CONDITION:
            self._check_frames("keypoints", k)
            self._check_frames("imu", m)
            return self._condition(t, torch.cat([self._norm("imu", m), self._norm("kp", k)], dim=-1))
        return self._condition(t, None)

    def encode_frames(self, x_t, m, k=None) -> torch.Tensor:
        mode = self.config.conditioning_mode
        if mode is ConditioningMode.DIFFCAP:
            parts = [self._norm("imu", m), x_t]
        elif mode is ConditioningMode.BOTH_AS_CONDITION:
            parts = [x_t]
        else:
            parts = [self._norm("imu", m), self._norm("kp", k), x_t]
        return self.frame_proj(torch.cat(parts, dim=-1))

    def forward(self, x_t, t, m, k, return_tokens=False):
        if k is None or m is None:
            raise ModeMismatch("joint model needs both imu and keypoints")
        B = x_t.shape[0]
        self._check_frames("x_t", x_t)
        self._check_frames("imu", m, B)
        self._check_frames("keypoints", k, B)
        if x_t.shape[-1] != self.config.data_dim:
            raise ShapeMismatch(f"x_t feature width {x_t.shape[-1]} != {self.config.data_dim}")
        cond = self.encode_condition(t, k, m)
        frames = self.encode_frames(x_t, m, k)
        return self._run(frames, cond, return_tokens)


class PoseDenoiser(_TransformerDenoiser):
    """x_t (B, N, data_dim), imu (B, N, imu_dim), p0 (B, N, aux_dim) -> x0 estimate.

    Keypoints are deliberately absent from the signature.
    """

    def __init__(self, config: DenoiserConfig):
        if config.kind != "pose":
            raise ModeMismatch("PoseDenoiser needs kind='pose'")
        super().__init__(config)

    def encode_condition(self, t) -> torch.Tensor:
        return self._condition(t, None)

    def encode_frames(self, x_t, m, p0) -> torch.Tensor:
        return self.frame_proj(torch.cat([self._norm("imu", m), x_t, self._norm("aux", p0)], dim=-1))

    def forward(self, x_t, t, m, p0, return_tokens=False):
        B = x_t.shape[0]
        self._check_frames("x_t", x_t)
        self._check_frames("imu", m, B)
        self._check_frames("p0", p0, B)
        cond = self.encode_condition(t)
        frames = self.encode_frames(x_t, m, p0)
        return self._run(frames, cond, return_tokens)


def build_denoiser(config: DenoiserConfig) -> _TransformerDenoiser:
    return JointDenoiser(config) if config.kind == "joint" else PoseDenoiser(config)
