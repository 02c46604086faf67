"""
Shared fixtures: small models, simulated datasets and fast optimiser settings.
"""

import numpy as np
import pytest

from core.estimate import FitOptions
from core.likelihood import QuadratureConfig, simulate_dataset
from core.mean_functions import M4_DESIGN, model_m1, model_m4
from core.model import Theta


@pytest.fixture
def fast_opts():
    """One start is enough for the well-conditioned test problems."""
    return FitOptions(n_starts=1, max_evals=3000)


@pytest.fixture
def quad():
    return QuadratureConfig()


@pytest.fixture
def m1():
    return model_m1()


@pytest.fixture
def m1_theta():
    return Theta(beta=[0.0, 7.0], lam=np.diag([np.sqrt(1.3), 0.0]), sigma2=2.25)


@pytest.fixture
def m1_design():
    x = np.arange(1.0, 6.0).reshape(-1, 1)
    return [x] * 20


@pytest.fixture
def m1_data(m1, m1_theta, m1_design):
    return simulate_dataset(m1, m1_theta, m1_design, np.random.default_rng(7))


@pytest.fixture
def m4():
    return model_m4()


@pytest.fixture
def m4_theta():
    return Theta(beta=[200.0, 500.0, 150.0], lam=np.diag([10.0, 10.0, 0.0]), sigma2=25.0)


@pytest.fixture
def m4_data(m4, m4_theta):
    x = np.asarray(M4_DESIGN).reshape(-1, 1)
    return simulate_dataset(m4, m4_theta, [x] * 8, np.random.default_rng(11))


@pytest.fixture
def isolated_config(tmp_path):
    """Point the global configuration at a throwaway file."""
    import core.config_manager as config_manager

    path = tmp_path / "config.yaml"
    path.write_text("logging:\n  level: WARNING\n", encoding="utf-8")
    original = config_manager.config
    manager = config_manager.set_config_path(str(path))
    yield manager
    config_manager.config = original


def pytest_addoption(parser):
    parser.addoption(
        "--run-acceptance",
        action="store_true",
        default=False,
        help="run the desk-scale Monte Carlo acceptance studies (hours on one core)",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-acceptance"):
        return
    skip = pytest.mark.skip(reason="desk-scale study; pass --run-acceptance")
    for item in items:
        if "acceptance" in item.keywords:
            item.add_marker(skip)
