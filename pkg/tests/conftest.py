import numpy as np
import pytest

from meramdiff.calibrate import FitOptions, discretize_gaussian, eps_grid, fit_probabilities
from meramdiff.markov import UnitConfig


@pytest.fixture(scope="session")
def gauss_target():
    return discretize_gaussian(1.0, eps_grid(8))


@pytest.fixture(scope="session")
def calibrated(gauss_target):
    """Default (independent p_pa, p_ap) fit to the sigma = 1 target."""
    return fit_probabilities(gauss_target, 8, FitOptions())


@pytest.fixture(scope="session")
def calibrated_sym(gauss_target):
    return fit_probabilities(gauss_target, 8, FitOptions(symmetric=True))


@pytest.fixture
def coins():
    return UnitConfig.uniform(8, 0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
