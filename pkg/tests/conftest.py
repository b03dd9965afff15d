import numpy as np
import pytest
from hypothesis import settings

from s2lab.field_core import Grid

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# Acceptance outcomes, filled in by tests/test_acceptance.py and printed at the end.
ACCEPTANCE = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def grid3():
    return Grid.box(3, 1.25, 1 / 8)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
