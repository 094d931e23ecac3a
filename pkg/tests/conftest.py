import numpy as np
import pytest
from hypothesis import settings

from robdiv import fbp
from robdiv.model import (
    OrnsteinUhlenbeck,
    SurplusModel,
    TabulatedC1,
    check_assumptions,
)

settings.register_profile("ci", deadline=None, derandomize=True, max_examples=25)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def baseline():
    """OU baseline: kappa=0.5, m=3.0, sigma_bar=0.5, rho=0.05, R=0.1, xi0=1.5."""
    return SurplusModel(OrnsteinUhlenbeck(0.5, 3.0, 0.5), rho=0.05, R=0.1, xi0=1.5)


@pytest.fixture(scope="session")
def baseline_report(baseline):
    return check_assumptions(baseline)


@pytest.fixture(scope="session")
def baseline_bstar(baseline, baseline_report):
    return fbp.shoot(baseline, report=baseline_report)


@pytest.fixture(scope="session")
def baseline_solution(baseline, baseline_bstar, baseline_report):
    return fbp.build_value_function(baseline, baseline_bstar, report=baseline_report)


@pytest.fixture(scope="session")
def humped_model():
    """Tabulated family whose drift rises before falling, so the split point
    b_lower sits strictly inside the domain (1.437 for these numbers)."""
    xs = np.linspace(0.0, 4.0, 81)
    mu = 0.5 + 1.2 * xs - 0.4 * xs ** 2
    sg = np.full_like(xs, 0.3)
    return SurplusModel(TabulatedC1(tuple(xs), tuple(mu), tuple(sg)),
                        rho=0.05, R=0.1, xi0=2.0)
