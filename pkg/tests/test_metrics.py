import numpy as np
import pytest

from evaluation.metrics import interval_coverage, mse, trim_rmse


def test_full_trim_is_the_rmse():
    residuals = np.random.default_rng(0).standard_normal((30, 2))
    assert trim_rmse(residuals, alpha=1.0) == pytest.approx(np.sqrt(np.mean(residuals ** 2)))


def test_equal_residuals():
    assert trim_rmse(np.full(8, -1.5)) == pytest.approx(1.5)


def test_trim_drops_the_largest_squares():
    residuals = np.array([1.0, -2.0, 3.0, 100.0])
    # ceil(0.75 * 4) = 3 smallest squares: 1, 4, 9
    assert trim_rmse(residuals, alpha=0.75) == pytest.approx(np.sqrt(14.0 / 3.0))
    assert trim_rmse(residuals, alpha=0.75) == pytest.approx(2.1602, abs=1e-4)


def test_trim_rmse_checks_alpha():
    with pytest.raises(ValueError):
        trim_rmse(np.ones(3), alpha=0.0)


def test_interval_coverage_includes_bounds():
    intervals = [(0.0, 1.0), (0.0, 1.0), (2.0, 3.0), (-1.0, 0.5)]
    assert interval_coverage(intervals, [1.0, 0.5, 1.0, 0.7]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        interval_coverage(intervals, [0.0])


def test_mse():
    assert mse([[1.0, 2.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 1.0]]) == pytest.approx(3.0)
    assert mse([1.0, 2.0], [1.0, 0.0]) == pytest.approx(2.0)
