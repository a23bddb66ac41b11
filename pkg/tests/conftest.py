import math

import numpy as np
import pytest

from nmg import Environment, OhmicFamily, SystemSpec, TimeGrid, solve

ACCEPTANCE_LINES = []


def record_acceptance(number, passed, detail):
    """Print and remember one acceptance verdict line."""
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def subohmic_env(eta, kT=1.0, omega_c=1.0, s=0.5):
    beta = math.inf if kT == 0 else 1.0 / kT
    return Environment.single(OhmicFamily(eta, s, omega_c), beta=beta)


@pytest.fixture(scope="session")
def subohmic_runs():
    """Green functions of the three sub-Ohmic coupling regimes on [0, 50]."""
    grid = TimeGrid(0.0, 50.0, 0.02)
    system = SystemSpec.scalar(1.0)
    return {eta: solve(system, subohmic_env(eta), grid) for eta in (0.05, 0.4, 0.8)}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
