from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sgunlearn.datasets import gen_gaussian_mixture, split_forget  # noqa: E402
from sgunlearn.models import MlpSpec, TrainConfig, train  # noqa: E402


@pytest.fixture(scope="session")
def small_bundle():
    return gen_gaussian_mixture(3, 100, 6, 2.0, seed=0)


@pytest.fixture(scope="session")
def small_partition(small_bundle):
    return split_forget(small_bundle, "random", seed=0, ratio=0.1)


@pytest.fixture(scope="session")
def small_model(small_bundle):
    spec = MlpSpec((6, 16, 3), seed=0)
    cfg = TrainConfig(epochs=8, lr_milestones=((6, 0.1),))
    return train(*small_bundle.rows(small_bundle.indices("train")), spec, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_bundle():
    return gen_gaussian_mixture(5, 600, 20, 2.0, seed=0)


@pytest.fixture(scope="session")
def default_original(default_bundle):
    """The overfit original model of seed 0 on the default bundle."""
    spec = MlpSpec((20, 128, 128, 5), seed=0)
    return train(*default_bundle.rows(default_bundle.indices("train")), spec, TrainConfig())


@pytest.fixture(scope="session")
def default_partition(default_bundle):
    return split_forget(default_bundle, "random", seed=0, ratio=0.1)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
