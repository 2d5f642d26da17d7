import os
import sys

import hypothesis
import numpy as np
import pytest

from stochbh.datasets import synthetic_bh_table
from stochbh.karhunen_loeve import KLExpansion

hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=400, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def bh_table():
    return synthetic_bh_table()


@pytest.fixture(scope="session")
def kl_half(bh_table):
    """Correlation length 1/2, three modes, worst-case amplitude."""
    return KLExpansion.from_table(bh_table, length=0.5, M=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
