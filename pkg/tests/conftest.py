import numpy as np
import pytest
import torch

from fusioncap.pipeline import MocapModel
from fusioncap.skeleton import default_skeleton
from fusioncap.synth import make_windows


class _Cfg:
    def __init__(self, window, data_dim):
        self.window = window
        self.data_dim = data_dim


class _Holder:
    def __init__(self, window, data_dim):
        self.config = _Cfg(window, data_dim)


class FnStage:
    """A stand-in stage: ``fn(conditions, steps, generator) -> tensor``."""

    regression = False

    def __init__(self, fn, window=60, data_dim=72):
        self.fn = fn
        self.model = _Holder(window, data_dim)
        self.calls = 0

    def __call__(self, conditions, steps, generator):
        self.calls += 1
        return self.fn(conditions, steps, generator)


def imu_driven_model(window=60, noisy=False):
    """Joint stage maps each frame's IMU to positions; pose stage to rotations.

    With ``noisy`` the outputs also carry generator noise, so results depend
    on the per-window seed.
    """
    J = 24

    def joint(cond, steps, gen):
        out = cond["m"].clone()  # 72 IMU channels stand in for 3 * 24 coordinates
        if noisy:
            out = out + 0.01 * torch.randn(out.shape, generator=gen)
        return out

    def pose(cond, steps, gen):
        p0 = cond["p0"]
        return torch.cat([p0, p0], dim=-1)[..., : 6 * J] + 1.0

    return MocapModel(FnStage(joint, window, 3 * J), FnStage(pose, window, 6 * J))


@pytest.fixture(scope="session")
def skeleton():
    return default_skeleton()


@pytest.fixture(scope="session")
def tiny_windows():
    return make_windows(4, window=20, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
