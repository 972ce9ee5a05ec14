import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from fusioncap.errors import DegenerateConfiguration, ShapeMismatch
from fusioncap.metrics import mpjpe, pa_mpjpe, per_joint_error, procrustes_align


def brute_mpjpe(pred, gt):
    total, count = 0.0, 0
    for f in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            d = (pred[f, j] - pred[f, 0]) - (gt[f, j] - gt[f, 0])
            total += np.sqrt(np.sum(d ** 2))
            count += 1
    return 1000.0 * total / count


def test_mpjpe_brute_force(rng):
    pred = rng.normal(size=(7, 24, 3))
    gt = rng.normal(size=(7, 24, 3))
    assert mpjpe(pred, gt) == pytest.approx(brute_mpjpe(pred, gt), abs=1e-9)


def test_mpjpe_uniform_offset(rng):
    gt = rng.normal(size=(5, 24, 3))
    pred = gt + [0.01, 0.0, 0.0]
    assert mpjpe(pred, gt, root=None) == pytest.approx(10.0, abs=1e-9)
    # with root subtraction a rigid shift of the whole body cancels
    assert mpjpe(pred, gt) == pytest.approx(0.0, abs=1e-9)
    shifted = gt.copy()
    shifted[:, 1:] += [0.01, 0.0, 0.0]
    # the root itself has zero error, the other 23 joints are 10 mm off
    assert mpjpe(shifted, gt) == pytest.approx(10.0 * 23 / 24, abs=1e-9)


def test_mpjpe_zero_and_symmetry(rng):
    a = rng.normal(size=(3, 24, 3))
    b = rng.normal(size=(3, 24, 3))
    assert mpjpe(a, a) == 0.0
    assert mpjpe(a, b) == pytest.approx(mpjpe(b, a), abs=1e-12)
    with pytest.raises(ShapeMismatch):
        mpjpe(a, b[:, :5])
    assert per_joint_error(a, b).shape == (3, 24)


def random_similarity(rng):
    R = Rotation.random(random_state=int(rng.integers(0, 2**31))).as_matrix()
    return R, rng.uniform(0.5, 2.0), rng.normal(size=3)


@pytest.mark.parametrize("scale", [0.5, 1.0, 3.0])
def test_pa_mpjpe_removes_similarity(scale, rng):
    gt = rng.normal(size=(10, 24, 3))
    R, _, t = random_similarity(rng)
    pred = scale * gt @ R.T + t
    assert pa_mpjpe(pred, gt) <= 1e-6


def lstsq_oracle(pred, gt):
    """Fit rotation vector, log-scale and translation by generic nonlinear least squares."""
    def resid(params):
        R = Rotation.from_rotvec(params[:3]).as_matrix()
        return (np.exp(params[3]) * pred @ R.T + params[4:] - gt).ravel()

    best = None
    for start in Rotation.random(8, random_state=0).as_rotvec():
        x0 = np.concatenate([start, [0.0], gt.mean(0) - pred.mean(0)])
        sol = least_squares(resid, x0, xtol=1e-14, ftol=1e-14, gtol=1e-14)
        if best is None or sol.cost < best.cost:
            best = sol
    aligned = resid(best.x).reshape(-1, 3) + gt
    return 1000.0 * np.linalg.norm(aligned - gt, axis=-1).mean()


def test_pa_mpjpe_matches_optimizer_oracle(rng):
    for _ in range(5):
        gt = rng.normal(size=(1, 24, 3)) * 0.3
        R, s, t = random_similarity(rng)
        pred = s * gt @ R.T + t + rng.normal(size=gt.shape) * 0.02
        # the optimizer minimizes squared error, the metric averages distances,
        # so both evaluate the same least-squares alignment
        assert pa_mpjpe(pred, gt) == pytest.approx(lstsq_oracle(pred[0], gt[0]), abs=1e-3)


def test_pa_mpjpe_without_scale_is_symmetric(rng):
    a = rng.normal(size=(4, 24, 3))
    b = a + rng.normal(size=a.shape) * 0.05
    assert pa_mpjpe(a, b, scale=False) == pytest.approx(pa_mpjpe(b, a, scale=False), abs=1e-6)


def test_procrustes_reflection_guard(rng):
    gt = rng.normal(size=(1, 24, 3))
    mirrored = gt * np.array([-1.0, 1.0, 1.0])
    aligned = procrustes_align(mirrored, gt)
    # the best proper rotation cannot undo a mirror image
    assert np.linalg.norm(aligned - gt, axis=-1).mean() > 1e-3


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.001, 0.2))
def test_pa_not_above_mpjpe_for_joint_noise(seed, sigma):
    r = np.random.default_rng(seed)
    gt = r.normal(size=(2, 24, 3)) * 0.3
    pred = gt + r.normal(size=gt.shape) * sigma
    assert pa_mpjpe(pred, gt) <= mpjpe(pred, gt) + 1e-9


def test_degenerate_point_sets():
    gt = np.zeros((1, 5, 3))
    with pytest.raises(DegenerateConfiguration):
        pa_mpjpe(gt, gt)
    line = np.zeros((1, 5, 3))
    line[0, :, 0] = np.arange(5.0)
    with pytest.raises(DegenerateConfiguration):
        pa_mpjpe(line, line)
