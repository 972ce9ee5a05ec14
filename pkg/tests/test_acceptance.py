"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are collected in ``conftest.ACCEPTANCE_RESULTS`` and written in the
terminal summary, so they show up without ``-s``.
"""
import contextlib
import hashlib
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_RESULTS, imu_driven_model
from fusioncap.denoiser import ConditioningMode, DenoiserConfig, JointDenoiser
from fusioncap.diffusion import cosine_schedule, posterior_coefficients, sample, training_loss
from fusioncap.evaluation import (ablation_conditioning, evaluate, robustness_sweep, stage_ablation,
                                  train_conditioning_models, train_mocap_model)
from fusioncap.io import SequenceContainer, load_checkpoint, load_sequence, save_checkpoint, save_sequence
from fusioncap.metrics import mpjpe, pa_mpjpe
from fusioncap.pipeline import (StreamState, TrainConfig, blend_weight_matrix, run_stream, sliding_window_inference,
                               stream_push)
from fusioncap.sensors import DegradationSpec, site_acceleration
from fusioncap.skeleton import default_skeleton, forward_kinematics, matrix_to_rot6d, rot6d_to_matrix
from fusioncap.synth import make_sequence, make_windows
from test_io import GOLDEN, dirs_identical

SIGMAS = (0.0, 0.01, 0.05, 0.1, 0.2)


def push_all(model, m, k, slide, seed):
    """Feed frames one at a time through ``stream_push``; returns (positions, rotations)."""
    state = StreamState(model, slide, seed=seed)
    emitted = []
    for i in range(len(m)):
        emitted.extend(stream_push(state, m[i], k[i], i))
    emitted.extend(state.flush())
    assert [e[0] for e in emitted] == list(range(len(m)))
    return np.stack([e[1] for e in emitted]), np.stack([e[2] for e in emitted])


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record PASS when the block completes, FAIL with the reason otherwise."""
    info = {}
    start = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        ACCEPTANCE_RESULTS[number] = f"criterion {number:2d} FAIL  {title}: {reason}"
        print(ACCEPTANCE_RESULTS[number])
        raise
    detail = ", ".join(f"{k}={v}" for k, v in info.items())
    line = f"criterion {number:2d} PASS  {title} ({time.perf_counter() - start:.1f} s{', ' + detail if detail else ''})"
    ACCEPTANCE_RESULTS[number] = line
    print(line)


def random_rotations(rng, shape):
    q = rng.normal(size=tuple(shape) + (4,))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


# -- 1-3: diffusion core -------------------------------------------------------

def test_sampler_exactness():
    with criterion(1, "oracle denoiser recovers x0 for S in {1, 5, 10, 1000}") as info:
        start = time.perf_counter()
        schedule = cosine_schedule(1000)
        g = torch.Generator().manual_seed(0)
        x0 = torch.randn(4, 60, 72, generator=g)
        worst = 0.0
        for steps in (1, 5, 10, 1000):
            out = sample(lambda x, t, **kw: x0, x0.shape, schedule, steps, torch.Generator().manual_seed(steps))
            worst = max(worst, float((out - x0).abs().max()))
        elapsed = time.perf_counter() - start
        info["max_err"] = f"{worst:.1e}"
        assert worst <= 1e-6
        assert elapsed < 1.0, f"took {elapsed:.2f} s"


def test_schedule_identities():
    with criterion(2, "schedule running product, coefficient sums, terminal alpha_bar") as info:
        start = time.perf_counter()
        s = cosine_schedule(1000)
        np.testing.assert_array_equal(s.alpha_bar, np.cumprod(s.alpha))
        worst = 0.0
        for t in range(1, s.T + 1):
            c_xt, c_x0 = posterior_coefficients(s, t)
            # weights on the noiseless trajectory sqrt(alpha_bar) x0, relative to the target step
            total = (c_xt * np.sqrt(s.alpha_bar[t]) + c_x0) / np.sqrt(s.alpha_bar[t - 1])
            worst = max(worst, abs(total - 1.0))
        info["coef_err"] = f"{worst:.1e}"
        info["alpha_bar_T"] = f"{s.alpha_bar[-1]:.2e}"
        assert worst < 1e-10
        assert s.alpha_bar[1000] < 1e-3
        assert time.perf_counter() - start < 1.0


def test_gradient_correctness():
    with criterion(3, "training_loss gradients match central differences") as info:
        start = time.perf_counter()
        torch.manual_seed(0)
        cfg = DenoiserConfig(data_dim=3, imu_dim=2, keypoint_dim=2, window=4, layers=1, model_dim=8, heads=2,
                             ff_dim=8, dropout=0.0)
        model = JointDenoiser(cfg).double().eval()
        params = list(model.parameters())
        n_params = sum(p.numel() for p in params)
        assert n_params <= 1000
        rng = np.random.default_rng(0)
        x0 = torch.as_tensor(rng.normal(size=(3, 4, 3)))
        cond = {"m": torch.as_tensor(rng.normal(size=(3, 4, 2))), "k": torch.as_tensor(rng.normal(size=(3, 4, 2)))}
        schedule = cosine_schedule(1000)

        def loss():
            return training_loss(model, x0, schedule, torch.Generator().manual_seed(7), cond)

        model.zero_grad()
        loss().backward()
        flat = [(pi, idx) for pi, p in enumerate(params) for idx in range(p.numel())]
        picks = rng.choice(len(flat), size=32, replace=False)
        h = 1e-6
        errors = []
        with torch.no_grad():
            for pick in picks:
                pi, idx = flat[pick]
                view = params[pi].view(-1)
                analytic = float(params[pi].grad.view(-1)[idx])
                orig = float(view[idx])
                view[idx] = orig + h
                up = float(loss())
                view[idx] = orig - h
                down = float(loss())
                view[idx] = orig
                numeric = (up - down) / (2 * h)
                scale = max(abs(analytic), abs(numeric))
                errors.append(0.0 if scale < 1e-9 else abs(analytic - numeric) / scale)
        info["params"] = n_params
        info["checked"] = len(errors)
        info["max_rel_err"] = f"{max(errors):.1e}"
        assert len(errors) >= 20
        assert max(errors) < 1e-3
        assert time.perf_counter() - start < 30.0


# -- 4: overfit ------------------------------------------------------------------

@pytest.mark.slow
def test_overfit_convergence():
    with criterion(4, "micro two-stage overfits 8 windows below 20 mm and beats one-stage") as info:
        start = time.perf_counter()
        data = make_windows(8, window=60, seed=0)
        cfg = DenoiserConfig(layers=2, model_dim=64, heads=4, dropout=0.0, window=60)
        tc = TrainConfig(batch_size=8, learning_rate=1e-4, total_steps=5000, seed=0)
        two = train_mocap_model(data, cfg, tc)
        one = train_mocap_model(data, cfg, tc, one_stage=True)
        reps = stage_ablation({"two-stage": two, "one-stage": one}, data)
        elapsed = time.perf_counter() - start
        info["two_stage_mm"] = f"{reps['two-stage'].mpjpe_mm:.2f}"
        info["one_stage_mm"] = f"{reps['one-stage'].mpjpe_mm:.2f}"
        assert reps["two-stage"].mpjpe_mm < 20.0
        assert reps["two-stage"].mpjpe_mm < reps["one-stage"].mpjpe_mm
        assert elapsed <= 600.0, f"took {elapsed:.0f} s"


# -- 5-6: ablation trends ----------------------------------------------------------

ABLATION_MODEL = DenoiserConfig(layers=2, model_dim=64, heads=4, dropout=0.1)
ABLATION_TRAIN = TrainConfig(batch_size=32, learning_rate=1e-4, total_steps=3000, seed=0)


@pytest.fixture(scope="module")
def ablation_data():
    train = make_windows(256, seed=11, augment=dict(occlusion_prob=0.5, dropout_prob=0.1, max_sigma=0.0))
    held = make_windows(64, seed=12345)
    occluded = held.degraded(lambda i: DegradationSpec(occluded_frame_intervals=[[0, 60]], rng_seed=i))
    return train, held, occluded


@pytest.fixture(scope="module")
def conditioning_models(ablation_data):
    start = time.perf_counter()
    models = train_conditioning_models(ablation_data[0], ABLATION_MODEL, ABLATION_TRAIN)
    return models, time.perf_counter() - start


@pytest.mark.slow
def test_conditioning_ablation_trend(ablation_data, conditioning_models):
    with criterion(5, "keypoints as condition degrade least under occlusion") as info:
        _, held, occluded = ablation_data
        models, train_time = conditioning_models
        res = ablation_conditioning(models, {"clean": held, "occluded": occluded})
        ratio = {m: r["occluded"].mpjpe_mm / r["clean"].mpjpe_mm for m, r in res.items()}
        diffcap, cond, seq = ConditioningMode.DIFFCAP, ConditioningMode.BOTH_AS_CONDITION, \
            ConditioningMode.BOTH_AS_SEQUENTIAL
        info["ratio_diffcap"] = f"{ratio[diffcap]:.3f}"
        info["ratio_both_seq"] = f"{ratio[seq]:.3f}"
        info["train_s"] = f"{train_time:.0f}"
        assert ratio[diffcap] < ratio[seq]
        for split in ("clean", "occluded"):
            assert res[diffcap][split].mpjpe_mm < res[cond][split].mpjpe_mm, split
        assert train_time <= 1800.0


@pytest.mark.slow
def test_robustness_sweep_trend(ablation_data, conditioning_models):
    with criterion(6, "diffusion error grows slower with keypoint noise than the regressor") as info:
        train, held, _ = ablation_data
        diffusion = conditioning_models[0][ConditioningMode.DIFFCAP]
        per_frame = DenoiserConfig.from_dict({**ABLATION_MODEL.to_dict(), "conditioning_mode": "both-seq"})
        regressor = train_mocap_model(train, per_frame, ABLATION_TRAIN, joint_only=True, regressor="full")
        diff = [r.mpjpe_mm for r in robustness_sweep(diffusion, held, SIGMAS).values()]
        reg = [r.mpjpe_mm for r in robustness_sweep(regressor, held, SIGMAS).values()]
        info["diffusion_mm"] = "/".join(f"{e:.1f}" for e in diff)
        info["regressor_mm"] = "/".join(f"{e:.1f}" for e in reg)
        for lo, hi in zip(diff[:-1], diff[1:]):
            assert hi >= 0.9 * lo
        assert diff[-1] / diff[0] < reg[-1] / reg[0]


# -- 7: streaming ----------------------------------------------------------------

def test_streaming_equivalence(tmp_path):
    with criterion(7, "online stream equals offline sliding windows on 600 frames") as info:
        start = time.perf_counter()
        motion, imu, kp = make_sequence(600, seed=3)
        save_sequence(tmp_path / "seq", SequenceContainer({"positions": motion.positions, "imu": imu,
                                                           "keypoints": kp}, fps=60.0))
        c = load_sequence(tmp_path / "seq")
        data = make_windows(4, window=60, seed=1)
        model = train_mocap_model(data, DenoiserConfig(layers=1, model_dim=16, heads=2, dropout=0.0),
                                  TrainConfig(batch_size=4, learning_rate=1e-3, total_steps=20))
        for slide in (10, 20, 30):
            p_off, r_off = sliding_window_inference(c.arrays["imu"], c.arrays["keypoints"], model, slide, seed=4)
            p_on, r_on = push_all(model, c.arrays["imu"], c.arrays["keypoints"], slide, seed=4)
            assert p_on.shape[0] == 600
            np.testing.assert_array_equal(p_on, p_off)
            np.testing.assert_array_equal(r_on, r_off)
            sums = blend_weight_matrix(600, 60, slide).sum(axis=0)
            assert np.max(np.abs(sums - 1.0)) <= 1e-9
        const = imu_driven_model()
        m = np.tile(np.linspace(-1, 1, 72), (600, 1))
        for slide in (10, 20, 30):
            p, _ = run_stream(const, m, np.zeros((600, 33, 3)), slide)
            np.testing.assert_allclose(p, np.broadcast_to(p[0], p.shape), rtol=0, atol=1e-12)
        elapsed = time.perf_counter() - start
        assert elapsed < 60.0, f"took {elapsed:.1f} s"


# -- 8-10: metrics, geometry, formats -------------------------------------------------

def test_metric_correctness():
    with criterion(8, "PA-MPJPE similarity invariance, 10 mm offset, pa <= mpjpe") as info:
        rng = np.random.default_rng(8)
        skeleton = default_skeleton()
        gt = forward_kinematics(skeleton, matrix_to_rot6d(random_rotations(rng, (20, 24))))
        worst_pa = 0.0
        for _ in range(20):
            R = random_rotations(rng, ())
            moved = rng.uniform(0.5, 2.0) * gt @ R.T + rng.normal(size=3)
            worst_pa = max(worst_pa, pa_mpjpe(moved, gt))
        info["max_pa_mm"] = f"{worst_pa:.1e}"
        assert worst_pa <= 1e-6
        direction = rng.normal(size=3)
        offset = gt + 0.01 * direction / np.linalg.norm(direction)
        assert abs(mpjpe(offset, gt, root=None) - 10.0) < 1e-9
        violations = 0
        for _ in range(1000):
            g = forward_kinematics(skeleton, matrix_to_rot6d(random_rotations(rng, (1, 24))))
            p = g + rng.uniform(0.001, 0.2) * rng.normal(size=g.shape)
            violations += pa_mpjpe(p, g) > mpjpe(p, g) + 1e-9
        info["violations"] = violations
        assert violations == 0


def test_geometry_round_trips():
    with criterion(9, "6D/matrix round trip, FK equivariance, exact acceleration") as info:
        rng = np.random.default_rng(9)
        R = random_rotations(rng, (100, 24))
        err6d = np.abs(rot6d_to_matrix(matrix_to_rot6d(R)) - R).max()
        skeleton = default_skeleton()
        rot6d = matrix_to_rot6d(random_rotations(rng, (50, 24)))
        G = random_rotations(rng, ())
        rotated = rot6d.copy()
        rotated[:, 0] = matrix_to_rot6d(G @ rot6d_to_matrix(rot6d[:, 0]))
        err_fk = np.abs(forward_kinematics(skeleton, rotated) - forward_kinematics(skeleton, rot6d) @ G.T).max()
        fps = 60.0
        t = np.arange(120)[:, None, None] / fps
        a, v, p0 = rng.normal(size=(3, 6, 3))
        acc = site_acceleration(p0 + v * t + 0.5 * a * t ** 2, fps)
        err_acc = np.abs(acc - a).max()
        info.update(rot6d=f"{err6d:.1e}", fk_m=f"{err_fk:.1e}", acc=f"{err_acc:.1e}")
        assert err6d < 1e-6 and err_fk < 1e-6 and err_acc < 1e-6


def test_format_stability(tmp_path):
    with criterion(10, "golden container and checkpoint round trip byte-identically") as info:
        for line in (GOLDEN / "SHA256SUMS").read_text().splitlines():
            digest, name = line.split()
            assert hashlib.sha256((GOLDEN / name).read_bytes()).hexdigest() == digest, name
        save_sequence(tmp_path / "sequence", load_sequence(GOLDEN / "sequence"))
        save_checkpoint(tmp_path / "checkpoint", load_checkpoint(GOLDEN / "checkpoint", verify=True))
        assert dirs_identical(GOLDEN / "sequence", tmp_path / "sequence")
        assert dirs_identical(GOLDEN / "checkpoint", tmp_path / "checkpoint")
        load_checkpoint(tmp_path / "checkpoint", verify=True)
        info["files"] = len(list(Path(GOLDEN).rglob("*.*"))) - 1
