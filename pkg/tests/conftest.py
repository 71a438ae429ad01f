"""Shared fixtures and the --runslow switch for full-size Monte Carlo reproductions"""

import sys
from pathlib import Path

import numpy as np
import pytest

# repository root on the import path
sys.path.insert(0, str(Path(__file__).parent.parent))

from pycalibra.calibration import CovariateMatrix, TargetSummary


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run full-size simulation reproductions")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size Monte Carlo reproduction (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def two_point():
    """x=(0,1), y=(1,3): exactly determined with target mean 0.25"""
    data = CovariateMatrix(np.array([[0.0], [1.0]]), np.array([1.0, 3.0]))
    target = TargetSummary(np.array([0.25]), ybar0=1.0)
    return data, target


@pytest.fixture
def three_point():
    """x=(-1,0,1), y=(0,1,1), target mean 0.2"""
    data = CovariateMatrix(np.array([[-1.0], [0.0], [1.0]]), np.array([0.0, 1.0, 1.0]))
    target = TargetSummary(np.array([0.2]))
    return data, target


def random_instance(rng: np.random.Generator, n: int, p: int, shift: float = 0.3):
    """Normal covariates with the target inside the hull (target means shifted towards the centre)"""
    x = rng.normal(size=(n, p))
    y = x @ np.full(p, 0.5) + rng.normal(size=n)
    target = TargetSummary(x.mean(axis=0) - shift * x.std(axis=0) / np.sqrt(p))
    return CovariateMatrix(x, y), target
