import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mfeig import NoiseSpec, PriorSpec, RngStream

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return RngStream(12345, ())


@pytest.fixture
def unit_prior():
    return PriorSpec.uniform([0.0], [1.0])


@pytest.fixture
def std_normal_prior():
    return PriorSpec.normal([0.0], [1.0])


@pytest.fixture
def noise_1pct():
    return NoiseSpec([0.01])


def random_spd(rng, n, cond=50.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    ev = np.geomspace(1.0, cond, n)
    return (q * ev) @ q.T


# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def gate():
    def record(label, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
