import numpy as np
import pytest

from qvit.data import synth_gaussian_classes
from qvit.model import PRESETS, ViT, ViTConfig

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    return PRESETS["tiny"]


@pytest.fixture(scope="session")
def tiny_calib(tiny_cfg):
    return synth_gaussian_classes(4, 16, seed=3, shape=tiny_cfg.image_shape).batched(16, 0)


@pytest.fixture(scope="session")
def tiny_fp(tiny_cfg):
    return ViT.from_seed(tiny_cfg, 0)


@pytest.fixture
def tiny_q(tiny_fp, tiny_calib):
    return tiny_fp.calibrate(tiny_calib.iter_batches())


@pytest.fixture(scope="session")
def desk_calib():
    return synth_gaussian_classes(8, 8, seed=5).batched(32, 0)


@pytest.fixture(scope="session")
def desk_q(desk_calib):
    return ViT.from_seed(ViTConfig(bits_weights=4), 0).calibrate(desk_calib.iter_batches())
