import numpy as np
import pytest

from mflchaos.cloud import DistributionSpec
from mflchaos.functionals import CompositeExpectation, PairwiseInteraction, QuadraticPotential

# acceptance verdict lines, printed at the end of the session
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def composite():
    return CompositeExpectation.quadratic_tanh(kappa=2.0, target=0.5)


@pytest.fixture
def pairwise():
    return PairwiseInteraction(amplitude=1.0, length_scale=1.0)


@pytest.fixture
def quad():
    return QuadraticPotential(1.0)


@pytest.fixture
def shifted_gaussian():
    return DistributionSpec("gaussian", mean=1.0, cov_scalar=1.0)
