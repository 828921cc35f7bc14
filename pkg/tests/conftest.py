import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "vlkit", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "vlkit"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []  # (number, title, passed, detail)


@pytest.fixture
def criterion():
    """Record one acceptance verdict; printed now and again in the terminal summary."""
    def record(n, title, passed, detail=""):
        line = f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {title}  {detail}".rstrip()
        print(line)
        ACCEPTANCE.append(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
