import numpy as np
import pytest

from src import diagnostics, regression
from src.datamodel import DataMatrix
from src.diagnostics import CELL_CUTOFF, CASE_CLASSES, CellMap
from src.exceptions import SingularCovarianceError


@pytest.fixture(scope="module")
def shifted():
    """y1 of row 0 shifted far off the regression plane."""
    rng = np.random.default_rng(17)
    x = rng.standard_normal((70, 2))
    y = x @ np.array([1.0, -0.5]) + 0.3 * rng.standard_normal(70)
    y[0] += 20.0
    values = np.column_stack([x, y])
    values[4, 1] = np.nan
    data = DataMatrix.from_array(values, ["x1", "x2", "y1"])
    return data, regression.fit(data, p=2, k=1, lam=0.0)


def test_chi_cutoffs():
    assert diagnostics.chi_cutoff(3) == pytest.approx(3.3682, abs=1e-4)
    assert CELL_CUTOFF == pytest.approx(2.5758, abs=1e-4)


def test_classify_quadrants_with_closed_cutoffs():
    classes = diagnostics.classify([1.0, 5.0, 1.0, 5.0, 2.0], [1.0, 1.0, 5.0, 5.0, 2.0], 2.0, 2.0)
    assert list(classes) == ["regular", "vertical_outlier", "good_leverage", "bad_leverage", "regular"]


def test_cell_flags_and_labels():
    stdres = np.array([[CELL_CUTOFF, -3.0, 3.0, np.nan, 0.0]])
    flags = diagnostics.cell_flags(stdres)
    np.testing.assert_array_equal(flags, [[0, -1, 1, 0, 0]])
    labels = diagnostics.flag_labels(CellMap(stdres, flags, tuple("abcde")))
    assert list(labels[0]) == ["regular", "low", "high", "missing", "regular"]


def test_cellmap_frame_is_long_format():
    cellmap = CellMap(np.array([[0.1, 4.0], [np.nan, -0.2]]), np.array([[0, 1], [0, 0]]), ("a", "b"))
    frame = diagnostics.cellmap_frame(cellmap, ids=[10, 11])
    assert list(frame.columns) == ["id", "variable", "stdres", "flag"]
    assert list(frame["id"]) == [10, 10, 11, 11]
    assert list(frame["variable"]) == ["a", "b", "a", "b"]
    assert list(frame["flag"]) == ["regular", "high", "missing", "regular"]


def test_mahalanobis_matches_the_inverse():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((3, 3))
    sigma = A @ A.T + np.eye(3)
    deviations = rng.standard_normal((6, 3))
    distances, damped = diagnostics._mahalanobis(deviations, sigma, "test")
    expected = np.sqrt(np.einsum("ij,jk,ik->i", deviations, np.linalg.inv(sigma), deviations))
    np.testing.assert_allclose(distances, expected)
    assert not damped


def test_singular_scatter_is_damped_then_rejected():
    _, damped = diagnostics._mahalanobis(np.ones((2, 2)), np.ones((2, 2)), "test")
    assert damped
    with pytest.raises(SingularCovarianceError):
        diagnostics._mahalanobis(np.ones((2, 2)), np.array([[1.0, 2.0], [2.0, 1.0]]), "test")


def test_t_cutoff_simulation():
    first = diagnostics.simulate_t_cutoff(40, 3, 1, n_sim=100, seed=2)
    assert first == diagnostics.simulate_t_cutoff(40, 3, 1, n_sim=100, seed=2, threads=2)
    assert first > 0
    with pytest.raises(ValueError):
        diagnostics.simulate_t_cutoff(40, 3, 1, n_sim=50)


def test_distances_flag_the_shifted_response(shifted):
    data, model = shifted
    report = diagnostics.distances(model, data, cutoff_t=2.0)
    assert report.rd.shape == (data.n,)
    assert report.cutoff_rd == pytest.approx(diagnostics.chi_cutoff(1))
    assert report.rd[0] > report.cutoff_rd
    assert report.case_class[0] in ("vertical_outlier", "bad_leverage")
    assert set(report.case_class) <= set(CASE_CLASSES)
    assert np.all((report.point_size >= 0) & (report.point_size <= 1))
    assert np.all((report.case_shade >= 0) & (report.case_shade <= 1))
    assert np.mean(report.case_class == "regular") > 0.8
    frame = report.outlier_frame()
    assert list(frame.columns) == ["id", "rd", "pd", "size", "shade", "class"]


def test_cellmaps(shifted):
    data, model = shifted
    cellmap_x, cellmap_y = diagnostics.cellmaps(model, data)
    assert cellmap_x.stdres.shape == (data.n, 2)
    assert cellmap_y.stdres.shape == (data.n, 1)
    assert cellmap_x.names == ("x1", "x2")
    assert cellmap_y.flags[0, 0] == 1
    assert np.isnan(cellmap_x.stdres[4, 1])
    subset_x, _ = diagnostics.cellmaps(model, data, rows=[0, 5])
    np.testing.assert_allclose(subset_x.stdres, cellmap_x.stdres[[0, 5]])


def test_predictor_residual_scales(shifted):
    _, model = shifted
    scales = diagnostics.predictor_residual_scales(model)
    assert scales.shape == (2,)
    assert np.all(np.isfinite(scales) & (scales > 0))


def test_diagnose_combines_both_views(shifted):
    data, model = shifted
    report = diagnostics.diagnose(model, data, cutoff_t=2.0)
    assert report.cellmap_X.stdres.shape == (data.n, 2)
    assert report.cutoff_t == 2.0
