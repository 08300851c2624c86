from types import SimpleNamespace

import numpy as np
import pytest

from src.datamodel import DataMatrix
from src.estimators.cellcov import CovEstimate, cellcov, orth_normalizer, orth_scatter, repair_psd
from src.exceptions import NormalizerZeroError
from tests.conftest import correlated_sample


def _sample(n=120, seed=0):
    sigma = np.array([[1.0, 0.6, 0.3], [0.6, 1.0, 0.5], [0.3, 0.5, 1.0]])
    return correlated_sample(n, sigma, seed)


def test_estimate_is_symmetric_psd_with_low_rank_subspace_part():
    est = cellcov(DataMatrix.from_array(_sample()), k=1)
    np.testing.assert_allclose(est.sigma, est.sigma.T)
    assert np.linalg.eigvalsh(est.sigma).min() >= -1e-10
    assert np.linalg.matrix_rank(est.sigma_sub, tol=1e-8) <= 1
    assert est.mu.shape == (3,)


def test_scale_equivariance():
    values = _sample(seed=1)
    values[4, 2] = np.nan
    A = np.array([2.0, 0.1, 30.0])
    base = cellcov(DataMatrix.from_array(values), k=1)
    scaled = cellcov(DataMatrix.from_array(values * A), k=1)
    np.testing.assert_allclose(scaled.sigma, base.sigma * np.outer(A, A), rtol=1e-6, atol=1e-10)
    np.testing.assert_allclose(scaled.mu, base.mu * A, rtol=1e-6, atol=1e-10)


def test_bivariate_correlation_is_recovered(bivariate_sigma):
    est = cellcov(DataMatrix.from_array(correlated_sample(500, bivariate_sigma, 2)), k=1)
    sigma = est.sigma
    corr = sigma[0, 1] / np.sqrt(sigma[0, 0] * sigma[1, 1])
    assert corr == pytest.approx(0.9, abs=0.05)
    assert np.all((np.diag(sigma) > 0.7) & (np.diag(sigma) < 1.3))


def test_outlying_cells_do_not_break_the_estimate(bivariate_sigma):
    values = correlated_sample(300, bivariate_sigma, 3)
    values[:15, 1] = 40.0
    est = cellcov(DataMatrix.from_array(values), k=1)
    assert est.sigma[1, 1] < 2.0
    assert abs(est.mu[1]) < 0.3


def test_center_only_rank():
    est = cellcov(DataMatrix.from_array(_sample(seed=4)), k=0)
    assert est.mcd is None
    np.testing.assert_array_equal(est.sigma_sub, np.zeros((3, 3)))


def test_orth_scatter_by_hand():
    fit = SimpleNamespace(
        cell_weights=np.array([[1.0, 1.0], [1.0, 0.5]]),
        case_weights=np.array([1.0, 0.5]),
        residuals=np.array([[1.0, 2.0], [3.0, 4.0]]),
    )
    data = SimpleNamespace(mask=np.ones((2, 2), dtype=bool), d=2)
    assert orth_normalizer(fit, data) == pytest.approx(1.28125)
    expected = np.array([[5.5, 5.0], [5.0, 6.0]]) / 1.28125
    np.testing.assert_allclose(orth_scatter(fit, data), expected)


def test_orth_scatter_ignores_missing_cells():
    fit = SimpleNamespace(
        cell_weights=np.array([[1.0, 0.0], [1.0, 1.0]]),
        case_weights=np.array([1.0, 1.0]),
        residuals=np.array([[1.0, np.nan], [1.0, 1.0]]),
    )
    data = SimpleNamespace(mask=np.array([[True, False], [True, True]]), d=2)
    assert np.all(np.isfinite(orth_scatter(fit, data)))


def test_zero_normalizer_is_an_error():
    fit = SimpleNamespace(cell_weights=np.ones((2, 2)), case_weights=np.zeros(2), residuals=np.ones((2, 2)))
    data = SimpleNamespace(mask=np.ones((2, 2), dtype=bool), d=2)
    with pytest.raises(NormalizerZeroError):
        orth_scatter(fit, data)


def test_repair_psd():
    np.testing.assert_allclose(repair_psd(np.array([[1.0, 2.0], [2.0, 1.0]])), 1.5 * np.ones((2, 2)))
    spd = np.array([[2.0, 0.5], [0.5, 1.0]])
    np.testing.assert_array_equal(repair_psd(spd), spd)


def test_estimate_serializes():
    est = cellcov(DataMatrix.from_array(_sample(60, 5)), k=1)
    again = CovEstimate.from_dict(est.to_dict())
    np.testing.assert_array_equal(again.sigma, est.sigma)
    np.testing.assert_array_equal(again.pca_fit.V, est.pca_fit.V)
