import numpy as np
import pytest

from unimaml import network as nw
from unimaml.episodes import EpisodeSpec, generate_synthetic_pool, split_pool

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_pools():
    pool = generate_synthetic_pool(20, 6, 25, 0.3, seed=11)
    return split_pool(pool, 12, 0, 8)


@pytest.fixture
def spec5():
    return EpisodeSpec(5, 1, 3)


def identity_params(heads, shared=False):
    """Zero-depth encoder: features are the raw inputs."""
    return nw.ParamSet((), np.asarray(heads, dtype=float), shared)
