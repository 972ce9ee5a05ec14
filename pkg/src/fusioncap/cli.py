"""Command-line entry points: synth, train, eval, stream and ablate.

Every verb reads a flat ``key = value`` config file; command-line flags
override the matching keys. Exit status is 0 on success, 1 when an input
fails validation and 2 when training diverges.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .denoiser import ConditioningMode, DenoiserConfig
from .errors import FusionCapError, NonFiniteLoss, TooShortSequence, ValidationError
from .evaluation import (MetricReport, ablation_conditioning, evaluate, noisy_keypoints, sliding_sweep,
                         stage_ablation, train_conditioning_models, train_mocap_model, train_stages)
from .io import (Checkpoint, SequenceContainer, list_sequences, load_config, load_run, load_sequence,
                 model_from_checkpoints, read_run_info, save_checkpoint, save_run, save_sequence)
from .pipeline import (MocapModel, TrainConfig, estimate_positions, fit_denoiser,
                       joint_training_data, latency_report, pose_training_data, run_stream,
                       sliding_window_inference)
from .sensors import DegradationSpec, KeypointSequence, degrade_keypoints
from .skeleton import default_skeleton, forward_kinematics
from .synth import MOTION_KINDS, WindowDataset, generate_motion, observe, random_degradation

log = logging.getLogger("fusioncap")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2
MODES = ("diffcap", "both-cond", "both-seq", "regressor")


# -- dataset plumbing -------------------------------------------------------

def _split_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, {"train": 0, "val": 1}[split], index])


def synthesize_split(cfg: dict, split: str) -> list:
    """Procedural containers for one split, deterministic in ``cfg['seed']``."""
    seed = cfg.get("seed", 0)
    frames = cfg.get("frames", cfg.get("window", 60))
    fps = cfg.get("fps", 60.0)
    kinds = cfg.get("kinds", list(MOTION_KINDS))
    for kind in kinds:
        if kind not in MOTION_KINDS:
            raise ValidationError(f"unknown motion kind {kind!r}; choose from {MOTION_KINDS}")
    if frames < 3:
        raise TooShortSequence("frames must be at least 3 for IMU synthesis")
    count = cfg.get(f"{split}_sequences", 16 if split == "train" else 4)
    skeleton = default_skeleton()
    out = []
    for i in range(count):
        rng = _split_rng(seed, split, i)
        motion = generate_motion(kinds[i % len(kinds)], frames, rng, skeleton, fps)
        imu, kp = observe(motion, skeleton)
        if split == "train" and cfg.get("occlusion_prob", 0.0) + cfg.get("dropout_prob", 0.0) > 0:
            spec = random_degradation(rng, frames, cfg.get("occlusion_prob", 0.0), cfg.get("dropout_prob", 0.0),
                                      cfg.get("max_sigma", 0.0))
            kp = degrade_keypoints(KeypointSequence(kp), spec).data
        elif split == "val" and cfg.get("val_occlusion", False):
            third = frames // 3
            spec = DegradationSpec(occluded_frame_intervals=[[third, frames - third]], rng_seed=i)
            kp = degrade_keypoints(KeypointSequence(kp), spec).data
        out.append(SequenceContainer({"rotations": motion.rotations, "positions": motion.positions,
                                      "imu": imu, "keypoints": kp}, fps))
    return out


def load_windows(root, window: int) -> WindowDataset:
    """Cut every container under ``root`` into non-overlapping ``window``-frame pieces."""
    pieces = {name: [] for name in ("rotations", "positions", "imu", "keypoints")}
    for path in list_sequences(root):
        c = load_sequence(path)
        missing = set(pieces) - set(c.arrays)
        if missing:
            raise ValidationError(f"{path} lacks arrays {sorted(missing)}")
        for a in range(0, c.frames - window + 1, window):
            for name in pieces:
                pieces[name].append(c.arrays[name][a:a + window].astype(np.float64))
    if not pieces["imu"]:
        raise TooShortSequence(f"no container under {root} holds a full {window}-frame window")
    return WindowDataset(*(np.stack(pieces[n]) for n in ("rotations", "positions", "imu", "keypoints")))


def _model_config(cfg: dict, mode: str) -> DenoiserConfig:
    keys = ("layers", "heads", "model_dim", "ff_dim", "dropout", "window")
    d = {k: cfg[k] for k in keys if k in cfg}
    d["conditioning_mode"] = "diffcap" if mode == "regressor" else mode
    return DenoiserConfig.from_dict(d)


def _train_config(cfg: dict) -> TrainConfig:
    keys = ("batch_size", "learning_rate", "weight_decay", "total_steps", "T", "checkpoint_every", "sampling_steps")
    return TrainConfig(seed=cfg.get("seed", 0), **{k: cfg[k] for k in keys if k in cfg})


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ValidationError(f"config needs a {key!r} entry")
    return cfg[key]


# -- reports ----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_report(out, rows: list, name: str = "report") -> Path:
    """Write a text table and a machine-readable ``row.key = value`` file."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cols = []
    for row in rows:
        cols.extend(k for k in row if k not in cols)
    widths = {c: max(len(c), *(len(_fmt(r.get(c, ""))) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    lines += ["  ".join(_fmt(r.get(c, "")).ljust(widths[c]) for c in cols) for r in rows]
    (out / f"{name}.txt").write_text("\n".join(line.rstrip() for line in lines) + "\n")
    kv = [f"row{i}.{k} = {_fmt(v)}" for i, row in enumerate(rows) for k, v in row.items()]
    (out / f"{name}.kv").write_text("\n".join(kv) + "\n")
    return out / f"{name}.txt"


def plot_rows(out, rows: list, x: str, name: str) -> Path | None:
    """Line plot of mpjpe and pa_mpjpe against column ``x``; None if matplotlib is missing."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:  # plotting is optional
        return None
    xs = [r[x] for r in rows]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(xs, [r["mpjpe"] for r in rows], marker="o", label="MPJPE")
    ax.plot(xs, [r["pa_mpjpe"] for r in rows], marker="s", label="PA-MPJPE")
    ax.set_xlabel(x)
    ax.set_ylabel("mm")
    ax.legend()
    fig.tight_layout()
    Path(out).mkdir(parents=True, exist_ok=True)
    path = Path(out) / f"{name}.png"
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _row(report: MetricReport, **keys) -> dict:
    row = dict(keys)
    row.update(report.row())
    return row


# -- verbs ------------------------------------------------------------------

def cmd_synth(cfg: dict) -> dict:
    data = Path(cfg.get("data", "data"))
    written = {}
    for split in ("train", "val"):
        paths = []
        for i, container in enumerate(synthesize_split(cfg, split)):
            paths.append(save_sequence(data / split / f"seq_{i:04d}", container))
        written[split] = paths
    print(f"wrote {len(written['train'])} train and {len(written['val'])} val containers under {data}")
    return written


def _stage_ckpt(result, config: TrainConfig, regression: bool) -> Checkpoint:
    return Checkpoint.from_model(result.model, config, result.step, "regression" if regression else "diffusion",
                                 result.losses)


def cmd_train(cfg: dict) -> MocapModel:
    run = Path(cfg.get("run", "run"))
    mode = cfg.get("mode", "diffcap")
    one_stage = cfg.get("one_stage", False)
    model_cfg = _model_config(cfg, mode)
    train_cfg = _train_config(cfg)
    dataset = load_windows(Path(_require(cfg, "data")) / "train", model_cfg.window)
    started = time.time()
    if cfg.get("resume", False):
        model, joint_ckpt, pose_ckpt = resume_run(run, dataset, train_cfg)
    else:
        regressor = "full" if mode == "regressor" else None

        def on_checkpoint(name, net, step, losses):
            reg = regressor == "full" or (name == "pose" and regressor == "pose")
            save_checkpoint(run / "checkpoints" / f"{name}-{step:06d}",
                            Checkpoint.from_model(net, train_cfg, step, "regression" if reg else "diffusion", losses))

        model, joint, pose = train_stages(dataset, model_cfg, train_cfg, one_stage=one_stage, regressor=regressor,
                                          on_checkpoint=on_checkpoint)
        joint_ckpt = _stage_ckpt(joint, train_cfg, regressor == "full")
        pose_ckpt = None if pose is None else _stage_ckpt(pose, train_cfg, regressor is not None)
    save_run(run, model, joint_ckpt, pose_ckpt)
    report = evaluate(model, dataset, train_cfg.sampling_steps, train_cfg.seed)
    with open(run / "train.log", "a") as fh:  # timestamps live only in this sidecar
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} trained {len(dataset)} windows in "
                 f"{time.time() - started:.1f}s, train mpjpe {report.mpjpe_mm:.3f} mm\n")
    write_report(run, [_row(report, split="train")], "train_report")
    print(f"train MPJPE {report.mpjpe_mm:.2f} mm, PA-MPJPE {report.pa_mpjpe_mm:.2f} mm -> {run}")
    return model


def resume_run(run: Path, dataset: WindowDataset, config: TrainConfig):
    """Continue both stages of a saved run for ``config.total_steps`` more steps.

    Optimizer moments are not stored, so AdamW restarts from zero moments.
    The second stage's cached joint estimates are resampled from the
    continued first stage.
    """
    one_stage = read_run_info(run)["one_stage"]
    _, joint_ckpt, pose_ckpt = load_run(run)

    def resume(ckpt, target, conds):
        net = ckpt.build()
        res = fit_denoiser(net, target, conds, config, start_step=ckpt.step, regression=ckpt.stage == "regression")
        return Checkpoint.from_model(net, config, res.step, ckpt.stage, (ckpt.losses or []) + res.losses)

    new_joint = resume(joint_ckpt, *joint_training_data(dataset, one_stage))
    new_pose = None
    if pose_ckpt is not None:
        joint_only = model_from_checkpoints(new_joint, None, one_stage)
        p0 = estimate_positions(joint_only.joint, dataset, config.sampling_steps, config.seed)
        new_pose = resume(pose_ckpt, *pose_training_data(dataset, p0))
    return model_from_checkpoints(new_joint, new_pose, one_stage), new_joint, new_pose


def cmd_eval(cfg: dict) -> list:
    model, joint_ckpt, _ = load_run(_require(cfg, "run"))
    split = cfg.get("split", "val")
    dataset = load_windows(Path(_require(cfg, "data")) / split, model.window)
    seed = cfg.get("seed", 0)
    steps = cfg.get("steps", [joint_ckpt.train_config.sampling_steps])
    sigmas = cfg.get("sigma", [0.0])
    rows = []
    for S in steps:
        for sigma in sigmas:
            report = evaluate(model, noisy_keypoints(dataset, sigma, seed), S, seed, sigma=sigma)
            rows.append(_row(report, split=split, steps=S, sigma=sigma))
    out = Path(cfg.get("out", Path(cfg["run"]) / "eval"))
    path = write_report(out, rows)
    if len(sigmas) > 1:
        plot_rows(out, [r for r in rows if r["steps"] == steps[0]], "sigma", "sigma_sweep")
    if len(steps) > 1:
        plot_rows(out, [r for r in rows if r["sigma"] == sigmas[0]], "steps", "steps_sweep")
    print(path.read_text(), end="")
    return rows


def cmd_stream(cfg: dict) -> dict:
    model, joint_ckpt, _ = load_run(_require(cfg, "run"))
    container = load_sequence(_require(cfg, "container"))
    for name in ("imu", "keypoints"):
        if name not in container.arrays:
            raise ValidationError(f"container lacks {name!r}")
    slide = cfg.get("slide", [30])[0]
    steps = cfg.get("steps", [joint_ckpt.train_config.sampling_steps])[0]
    seed = cfg.get("seed", 0)
    m = container.arrays["imu"].astype(np.float64)
    k = container.arrays["keypoints"].astype(np.float64)
    p, r = run_stream(model, m, k, slide, steps, seed)
    if cfg.get("verify", False):
        p_off, r_off = sliding_window_inference(m, k, model, slide, steps, seed)
        if not (np.array_equal(p, p_off) and np.array_equal(r, r_off)):
            raise FusionCapError("streamed output differs from offline sliding-window inference")
        print("verify: streamed output is bit-identical to offline inference")
    arrays = {"positions": p}
    if model.pose is not None:
        arrays["rotations"] = r
        arrays["positions"] = forward_kinematics(model.skeleton, r)
    elif model.one_stage:
        arrays["rotations"] = r
    out = Path(cfg.get("out", Path(cfg["run"]) / "stream"))
    save_sequence(out, SequenceContainer(arrays, container.fps))
    latency = latency_report(slide, container.fps)
    info = {"slide": slide, "fps": container.fps, "latency_s": latency, "frames_in": container.frames,
            "frames_out": len(p)}
    write_report(out, [info], "latency")
    print(f"streamed {len(p)}/{container.frames} frames with slide {slide}; latency {latency:.3f} s -> {out}")
    return info


def cmd_ablate(cfg: dict) -> list:
    study = cfg.get("study", "conditioning")
    seed = cfg.get("seed", 0)
    steps = cfg.get("steps", [5])[0]
    out = Path(cfg.get("out", "ablation"))
    if study in ("conditioning", "stage", "regressor"):
        model_cfg = _model_config(cfg, "diffcap")
        train_cfg = _train_config(cfg)
        data = Path(_require(cfg, "data"))
        train = load_windows(data / "train", model_cfg.window)
        val = load_windows(data / "val", model_cfg.window)
        N = model_cfg.window
        occluded = val.degraded(lambda i: DegradationSpec(occluded_frame_intervals=[[N // 3, N - N // 3]], rng_seed=i))
        splits = {"clean": val, "occluded": occluded}
        rows = []
        if study == "conditioning":
            models = train_conditioning_models(train, model_cfg, train_cfg)
            for mode, reports in ablation_conditioning(models, splits, steps, seed).items():
                rows += [_row(rep, mode=mode.value, split=name) for name, rep in reports.items()]
        else:
            if study == "stage":
                variants = {"two-stage": {}, "one-stage": {"one_stage": True}}
            else:
                variants = {"diffusion": {}, "regressor-pose": {"regressor": "pose"},
                            "regressor-full": {"regressor": "full"}}
            models = {name: train_mocap_model(train, model_cfg, train_cfg, **kw) for name, kw in variants.items()}
            for name, ds in splits.items():
                rows += [_row(rep, variant=v, split=name) for v, rep in stage_ablation(models, ds, steps, seed).items()]
    elif study == "slide":
        model, _, _ = load_run(_require(cfg, "run"))
        seqs = []
        for path in list_sequences(Path(_require(cfg, "data")) / cfg.get("split", "val")):
            c = load_sequence(path)
            seqs.append((c.arrays["positions"].astype(np.float64), c.arrays["imu"].astype(np.float64),
                         c.arrays["keypoints"].astype(np.float64)))
        slides = cfg.get("slide", [10, 20, 30])
        rows = [_row(rep, slide=s) for s, rep in sliding_sweep(model, seqs, slides, steps, seed,
                                                              cfg.get("fps", 60.0)).items()]
        if len(rows) > 1:
            plot_rows(out, rows, "slide", "slide_sweep")
    else:
        raise ValidationError(f"unknown study {study!r}; choose conditioning, stage, regressor or slide")
    path = write_report(out, rows)
    print(path.read_text(), end="")
    return rows


VERBS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "stream": cmd_stream, "ablate": cmd_ablate}


def _csv(cast):
    def parse(text):
        try:
            return [cast(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated values, got {text!r}") from None
    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusioncap", description="IMU and keypoint motion capture by diffusion.")
    parser.add_argument("verb", choices=sorted(VERBS))
    parser.add_argument("--config", type=Path, help="flat key = value config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--steps", type=_csv(int), help="sampling steps, comma-separated for sweeps")
    parser.add_argument("--sigma", type=_csv(float), help="keypoint noise levels, comma-separated")
    parser.add_argument("--slide", type=_csv(int), help="sliding step(s) in frames")
    parser.add_argument("--mode", choices=MODES)
    parser.add_argument("--one-stage", action="store_true", default=None)
    parser.add_argument("--verify", action="store_true", default=None)
    parser.add_argument("--data", help="dataset root (train/ and val/ below it)")
    parser.add_argument("--run", help="run directory")
    parser.add_argument("--container", help="sequence container for stream")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> dict:
    cfg = load_config(args.config) if args.config else {}
    overrides = {"seed": args.seed, "steps": args.steps, "sigma": args.sigma, "slide": args.slide,
                 "mode": args.mode, "one_stage": args.one_stage, "verify": args.verify, "data": args.data,
                 "run": args.run, "container": args.container, "out": args.out}
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if "mode" in cfg and cfg["mode"] not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {cfg['mode']!r}")
    if "mode" in cfg and cfg["mode"] != "regressor":
        ConditioningMode.parse(cfg["mode"])
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        VERBS[args.verb](resolve_config(args))
    except NonFiniteLoss as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FusionCapError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
