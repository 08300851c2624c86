import numpy as np
import pytest

from src.datamodel import DataMatrix, standardize
from src.estimators import cellpca
from src.estimators.cellpca import CellPcaFit, CellPcaOptions, Candidate
from src.estimators.mkernel import QuadraticRho
from src.exceptions import AllMissingPointError, DimensionMismatchError, RankTooLargeError, ScaleZeroError


def _standardized(values):
    z, _ = standardize(DataMatrix.from_array(values))
    return z


def _factor_sample(n, seed, noise=0.3):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal((n, 1))
    loadings = np.array([[1.0, 0.8, -0.6, 0.9]])
    return scores @ loadings + noise * rng.standard_normal((n, 4))


def test_noiseless_rank_one_is_recovered_exactly():
    rng = np.random.default_rng(0)
    u = rng.uniform(-1.0, 1.0, size=(30, 1))
    values = np.array([1.0, -2.0, 0.5, 3.0]) + u @ np.array([[1.0, 2.0, -1.0, 0.5]])
    pca = cellpca.fit(DataMatrix.from_array(values), k=1)
    assert np.max(np.abs(pca.residuals)) <= 1e-8
    assert np.all(pca.cell_weights >= 0.999)
    assert np.all(pca.case_weights >= 0.999)
    np.testing.assert_allclose(pca.fitted_values(), values, atol=1e-8)


def test_quadratic_kernels_reduce_to_classical_pca():
    rng = np.random.default_rng(1)
    values = rng.standard_normal((60, 4)) * np.array([10.0, 1.0, 0.5, 0.2])
    options = CellPcaOptions(rho_cell=QuadraticRho(), rho_case=QuadraticRho(), winsor_limit=1e6,
                             tol=1e-14, max_iter=500)
    pca = cellpca.fit(DataMatrix.from_array(values), k=2, options=options)
    centered = values - values.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    np.testing.assert_allclose(pca.V @ pca.V.T, vt[:2].T @ vt[:2], atol=1e-6)
    np.testing.assert_allclose(pca.fitted_values().mean(axis=0), values.mean(axis=0), atol=1e-6)


def test_loadings_are_orthonormal():
    pca = cellpca.fit(_standardized(_factor_sample(50, 2)), k=2)
    np.testing.assert_allclose(pca.V.T @ pca.V, np.eye(2), atol=1e-10)


def test_outlying_cell_is_rejected():
    values = _factor_sample(60, 3)
    values[5, 2] += 50.0
    pca = cellpca.fit(_standardized(values), k=1)
    assert pca.cell_weights[5, 2] == 0.0
    assert np.median(pca.cell_weights) == pytest.approx(1.0)


def test_missing_cells_have_nan_residuals_and_zero_weight():
    values = _factor_sample(40, 4)
    values[[1, 7], [0, 3]] = np.nan
    pca = cellpca.fit(_standardized(values), k=1)
    assert np.isnan(pca.residuals[1, 0]) and np.isnan(pca.residuals[7, 3])
    assert pca.cell_weights[1, 0] == 0.0 and pca.cell_weights[7, 3] == 0.0
    assert np.isfinite(pca.residuals[1, 1])


def test_rank_bounds():
    data = _standardized(_factor_sample(20, 5))
    with pytest.raises(RankTooLargeError):
        cellpca.fit(data, k=4)
    with pytest.raises(RankTooLargeError):
        cellpca.fit(data, k=-1)
    center_only = cellpca.fit(data, k=0)
    assert center_only.V.shape == (4, 0)


def test_loss_trace_ends_at_returned_loss():
    data = _standardized(_factor_sample(50, 6))
    pca = cellpca.fit(data, k=1)
    expected = pca.loss_trace[-1] if pca.converged else min(pca.loss_trace)
    assert cellpca.loss(pca, data) == pytest.approx(expected, rel=1e-6)


def test_loss_rejects_zero_scales():
    data = _standardized(_factor_sample(10, 7))
    candidate = Candidate(np.zeros(4), np.zeros((4, 1)), np.zeros((10, 1)), np.zeros(4), 1.0)
    with pytest.raises(ScaleZeroError):
        cellpca.loss(candidate, data)


def test_total_deviation_matches_fit():
    values = _factor_sample(40, 8)
    values[3, 1] = np.nan
    pca = cellpca.fit(_standardized(values), k=1)
    assert cellpca.total_deviation(pca, 3) == pytest.approx(pca.total_dev[3])
    assert cellpca.total_deviation(pca, pca.residuals[10]) == pytest.approx(pca.total_dev[10])


def test_impute_point_fills_missing_cells_from_the_fit():
    data = _standardized(_factor_sample(60, 9))
    pca = cellpca.fit(data, k=1)
    x = data.values[0].copy()
    mask = np.array([True, True, False, True])
    imputed = cellpca.impute_point(pca, x, mask)
    scored = cellpca.score_rows(pca, x[None, :], mask[None, :])
    assert np.all(np.isfinite(imputed))
    assert imputed[2] == pytest.approx(scored.fitted[0, 2])


def test_impute_point_errors():
    data = _standardized(_factor_sample(30, 10))
    pca = cellpca.fit(data, k=1)
    with pytest.raises(AllMissingPointError):
        cellpca.impute_point(pca, np.full(4, np.nan))
    with pytest.raises(DimensionMismatchError):
        cellpca.impute_point(pca, np.zeros(3))


def test_fit_serializes():
    values = _factor_sample(25, 12)
    values[0, 0] = np.nan
    pca = cellpca.fit(_standardized(values), k=1)
    again = CellPcaFit.from_dict(pca.to_dict())
    np.testing.assert_array_equal(again.V, pca.V)
    np.testing.assert_array_equal(again.mask, pca.mask)
    assert np.isnan(again.residuals[0, 0])
