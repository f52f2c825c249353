import functools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from htprecond.bench import generate_frame

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@functools.lru_cache(maxsize=None)
def cached_frame(N, seed=7, index=0, split="test"):
    return generate_frame(N, seed, index, split)


@pytest.fixture
def frame256():
    return cached_frame(256)


@pytest.fixture
def frame1024():
    return cached_frame(1024)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance results, printed once at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
