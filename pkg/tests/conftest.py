import math

import numpy as np
import pytest

from fvlab.models import constant_rate_model, two_state_model

LN4 = math.log(4.0)

# lines recorded by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def two_state():
    return two_state_model(0.5, LN4)


@pytest.fixture(scope="session")
def const1():
    return constant_rate_model(1.0)


def within_se(values, target, k=3.0):
    v = np.asarray(values, dtype=float)
    se = v.std(ddof=1) / math.sqrt(len(v))
    return abs(v.mean() - target) <= k * se
