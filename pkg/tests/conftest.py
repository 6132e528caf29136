import numpy as np
import pytest
from hypothesis import settings

from vanishcost.geometry import Domain, Region
from vanishcost.velocity import GradientPotential, make_gradient_field

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def half_square():
    """Gradient field of x^2/2 on (-1, 1)."""
    return make_gradient_field(GradientPotential.from_expression("x1^2/2", 1))


@pytest.fixture(scope="session")
def unit_interval():
    return Domain.interval(-1, 1)


@pytest.fixture(scope="session")
def centre_window():
    return Region.interval(-0.3, 0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
