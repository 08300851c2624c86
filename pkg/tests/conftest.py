import numpy as np
import pytest

from src.datamodel import DataMatrix


def correlated_sample(n, sigma, seed):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, sigma.shape[0])) @ np.linalg.cholesky(sigma).T


@pytest.fixture
def bivariate_sigma():
    return np.array([[1.0, 0.9], [0.9, 1.0]])


@pytest.fixture
def regression_data():
    """x1, x2 correlated predictors, y1 = x1 - 0.5 x2 + noise."""
    rng = np.random.default_rng(11)
    n = 80
    x = rng.standard_normal((n, 2)) @ np.linalg.cholesky(np.array([[1.0, 0.3], [0.3, 1.0]])).T
    y = x @ np.array([1.0, -0.5]) + 0.3 * rng.standard_normal(n)
    return DataMatrix.from_array(np.column_stack([x, y]), ["x1", "x2", "y1"])
