"""On-disk formats: sequence containers, checkpoints and key-value configs.

Both containers are directories holding a ``manifest.json`` plus one raw
little-endian float32 file per array. Manifests are written with sorted
keys and fixed indentation so identical content always produces identical
bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .denoiser import DenoiserConfig, build_denoiser
from .errors import HashMismatch, InvalidConfig, ShapeMismatch, ValidationError
from .pipeline import TrainConfig

SCHEMA_VERSION = 1
SEQUENCE_ARRAYS = ("rotations", "positions", "imu", "keypoints")
_DTYPE = "<f4"


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


def _write_array(path: Path, arr) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())


def _read_array(path: Path, shape) -> np.ndarray:
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ShapeMismatch(f"{path.name}: {len(raw)} bytes on disk, manifest shape {shape} needs {expected}")
    return np.frombuffer(raw, dtype=_DTYPE).reshape(shape).copy()


# -- sequence containers ----------------------------------------------------

@dataclass
class SequenceContainer:
    """Named per-frame arrays of one clip. All arrays share the leading frame axis."""

    arrays: dict
    fps: float = 60.0

    def __post_init__(self):
        unknown = set(self.arrays) - set(SEQUENCE_ARRAYS)
        if unknown:
            raise ValidationError(f"unknown array names {sorted(unknown)}")
        if not self.arrays:
            raise ValidationError("container holds no arrays")
        lengths = {np.shape(a)[0] for a in self.arrays.values()}
        if len(lengths) != 1:
            raise ShapeMismatch(f"arrays disagree on frame count: {sorted(lengths)}")
        self.arrays = {k: np.asarray(v, dtype=np.float32) for k, v in self.arrays.items()}

    @property
    def frames(self) -> int:
        return next(iter(self.arrays.values())).shape[0]

    def _count(self, name, axis):
        a = self.arrays.get(name)
        return 0 if a is None else int(a.shape[axis])

    def manifest(self) -> dict:
        J = self._count("positions", 1) or self._count("rotations", 1)
        return {
            "schema_version": SCHEMA_VERSION,
            "fps": float(self.fps),
            "N": self.frames,
            "J": J,
            "K": self._count("keypoints", 1),
            "arrays": {name: {"file": f"{name}.f32", "shape": list(arr.shape), "dtype": _DTYPE}
                       for name, arr in sorted(self.arrays.items())},
        }


def save_sequence(path, container: SequenceContainer) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = container.manifest()
    for name, entry in manifest["arrays"].items():
        _write_array(path / entry["file"], container.arrays[name])
    (path / "manifest.json").write_bytes(_dump_json(manifest))
    return path


def _load_manifest(path: Path) -> dict:
    try:
        manifest = json.loads((path / "manifest.json").read_text("utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"{path} has no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}/manifest.json is not valid JSON: {exc}") from None
    if "schema_version" not in manifest:
        raise ValidationError(f"{path}/manifest.json lacks schema_version")
    if manifest["schema_version"] != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema_version {manifest['schema_version']}")
    return manifest


def load_sequence(path) -> SequenceContainer:
    path = Path(path)
    manifest = _load_manifest(path)
    arrays = {}
    for name, entry in manifest.get("arrays", {}).items():
        if name not in SEQUENCE_ARRAYS:
            raise ValidationError(f"unknown array name {name!r} in {path}")
        if entry.get("dtype", _DTYPE) != _DTYPE:
            raise ValidationError(f"{name}: only little-endian float32 is supported")
        arrays[name] = _read_array(path / entry["file"], tuple(entry["shape"]))
    container = SequenceContainer(arrays, manifest["fps"])
    if container.frames != manifest["N"]:
        raise ShapeMismatch(f"manifest N={manifest['N']} but arrays hold {container.frames} frames")
    return container


def list_sequences(root) -> list:
    """Container directories directly under ``root``, sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"{root} is not a directory")
    return sorted(p for p in root.iterdir() if (p / "manifest.json").is_file())


# -- checkpoints ------------------------------------------------------------

def _content_hash(manifest: dict, arrays: dict) -> str:
    h = hashlib.sha256()
    body = {k: v for k, v in manifest.items() if k != "sha256"}
    h.update(_dump_json(body))
    for name in sorted(arrays):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arrays[name], dtype=_DTYPE).tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    """One trained denoiser with everything needed to rebuild and resume it."""

    model_config: DenoiserConfig
    train_config: TrainConfig
    weights: dict
    step: int = 0
    stage: str = "diffusion"
    rng_seed: int = 0
    losses: list | None = None

    @classmethod
    def from_model(cls, model, train_config: TrainConfig, step: int, stage: str = "diffusion",
                   losses=None) -> "Checkpoint":
        weights = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}
        return cls(model.config, train_config, weights, step, stage, train_config.seed + 7919 * step,
                   list(losses or []))

    def normalization(self) -> dict:
        out = {}
        for name in ("imu", "kp", "aux", "x"):
            out[name] = {"mean": self.weights[f"{name}_mean"].tolist(), "std": self.weights[f"{name}_std"].tolist()}
        return out

    def build(self):
        model = build_denoiser(self.model_config)
        state = {k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in self.weights.items()}
        model.load_state_dict(state)
        model.eval()
        return model

    def manifest(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "checkpoint",
            "stage": self.stage,
            "step": int(self.step),
            "rng_state": {"generator": "torch", "seed": int(self.rng_seed)},
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "normalization": self.normalization(),
            "arrays": {name: {"file": f"{name}.f32", "shape": list(arr.shape), "dtype": _DTYPE}
                       for name, arr in sorted(self.weights.items())},
        }


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = ckpt.manifest()
    manifest["sha256"] = _content_hash(manifest, ckpt.weights)
    for name, entry in manifest["arrays"].items():
        _write_array(path / entry["file"], ckpt.weights[name])
    (path / "manifest.json").write_bytes(_dump_json(manifest))
    if ckpt.losses:
        (path / "losses.txt").write_text("".join(f"{i}\t{v!r}\n" for i, v in enumerate(ckpt.losses, 1)))
    return path


def load_checkpoint(path, verify: bool = True) -> Checkpoint:
    path = Path(path)
    manifest = _load_manifest(path)
    if manifest.get("kind") != "checkpoint":
        raise ValidationError(f"{path} is not a checkpoint")
    weights = {name: _read_array(path / e["file"], tuple(e["shape"])) for name, e in manifest["arrays"].items()}
    if verify:
        digest = _content_hash(manifest, weights)
        if digest != manifest.get("sha256"):
            raise HashMismatch(f"{path}: content hash {digest[:12]} != recorded {str(manifest.get('sha256'))[:12]}")
    losses = None
    if (path / "losses.txt").is_file():
        losses = [float(line.split("\t")[1]) for line in (path / "losses.txt").read_text().splitlines() if line]
    return Checkpoint(DenoiserConfig.from_dict(manifest["model_config"]), TrainConfig.from_dict(manifest["train_config"]),
                      weights, manifest["step"], manifest["stage"], manifest["rng_state"]["seed"], losses)


# -- trained runs -----------------------------------------------------------

def save_run(path, model, joint_ckpt: Checkpoint, pose_ckpt: Checkpoint | None) -> Path:
    """A run directory: joint/ and optional pose/ checkpoints plus run.json."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path / "joint", joint_ckpt)
    if pose_ckpt is not None:
        save_checkpoint(path / "pose", pose_ckpt)
    info = {"schema_version": SCHEMA_VERSION, "kind": "run", "one_stage": bool(model.one_stage),
            "stages": ["joint"] + (["pose"] if pose_ckpt is not None else [])}
    (path / "run.json").write_bytes(_dump_json(info))
    return path


def model_from_checkpoints(joint: Checkpoint, pose: Checkpoint | None, one_stage: bool = False):
    """Assemble a :class:`~fusioncap.pipeline.MocapModel` from stage checkpoints."""
    from .diffusion import cosine_schedule
    from .pipeline import DiffusionStage, MocapModel, RegressionStage

    def stage(ckpt):
        net = ckpt.build()
        if ckpt.stage == "regression":
            return RegressionStage(net)
        return DiffusionStage(net, cosine_schedule(ckpt.train_config.T, variance=ckpt.train_config.variance))

    return MocapModel(stage(joint), stage(pose) if pose is not None else None, one_stage=one_stage)


def read_run_info(path) -> dict:
    path = Path(path)
    try:
        info = json.loads((path / "run.json").read_text("utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"{path} has no run.json") from None
    if info.get("kind") != "run":
        raise ValidationError(f"{path}/run.json does not describe a run")
    return info


def load_run(path, verify: bool = True):
    """Rebuild a trained model from a run directory.

    Returns ``(model, joint_checkpoint, pose_checkpoint_or_None)``.
    """
    path = Path(path)
    info = read_run_info(path)
    joint = load_checkpoint(path / "joint", verify)
    pose = load_checkpoint(path / "pose", verify) if "pose" in info["stages"] else None
    return model_from_checkpoints(joint, pose, info["one_stage"]), joint, pose


# -- key-value configuration ------------------------------------------------

def _parse_bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


CONFIG_KEYS = {
    # data synthesis
    "seed": int, "data": str, "train_sequences": int, "val_sequences": int, "frames": int, "fps": float,
    "kinds": _str_list, "occlusion_prob": float, "dropout_prob": float, "max_sigma": float,
    "val_occlusion": _parse_bool,
    # model
    "layers": int, "heads": int, "model_dim": int, "ff_dim": int, "dropout": float, "window": int,
    "mode": str, "one_stage": _parse_bool,
    # training
    "run": str, "batch_size": int, "learning_rate": float, "weight_decay": float, "total_steps": int,
    "T": int, "checkpoint_every": int, "sampling_steps": int, "resume": _parse_bool,
    # evaluation and streaming
    "split": str, "steps": _int_list, "sigma": _float_list, "slide": _int_list, "container": str,
    "out": str, "verify": _parse_bool, "study": str,
}


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse flat ``key = value`` lines. ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{source}: expected 'key = value'", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise InvalidConfig(f"{source}: unknown key {key!r}", key=key, line=lineno)
        if key in out:
            raise InvalidConfig(f"{source}: duplicate key {key!r}", key=key, line=lineno)
        try:
            out[key] = CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise InvalidConfig(f"{source}: bad value for {key!r}: {exc}", key=key, line=lineno) from None
    return out


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text("utf-8")
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, os.fspath(path))
