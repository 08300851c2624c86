import numpy as np
import pytest

from src import inference, regression
from src.datamodel import DataMatrix
from src.estimators import fastcellcov
from src.exceptions import NonFiniteIterateError
from src.inference import ThetaSpace, ThetaVector, project_theta, solve_fixed_point
from tests.conftest import correlated_sample


@pytest.fixture
def space():
    return ThetaSpace(M=10.0, c_lo=0.1, c_hi=1.0)


def _random_theta(rng, d=3):
    A = rng.standard_normal((d, d))
    return ThetaVector.from_moments(3.0 * rng.standard_normal(d), A + A.T)


def test_vech_s_norm_is_frobenius():
    sigma = np.array([[2.0, 0.5, -1.0], [0.5, 1.0, 0.3], [-1.0, 0.3, 4.0]])
    vector = inference.vech_s(sigma)
    assert vector.size == 6
    assert np.linalg.norm(vector) == pytest.approx(np.linalg.norm(sigma))
    np.testing.assert_allclose(inference.unvech_s(vector, 3), sigma)


def test_theta_vector_layout():
    theta = ThetaVector.from_moments([1.0, 2.0], np.eye(2))
    np.testing.assert_array_equal(theta.as_array(), [1.0, 2.0, 1.0, 0.0, 1.0])
    again = ThetaVector.from_array(theta.as_array(), 2)
    np.testing.assert_array_equal(again.sigma, np.eye(2))


def test_projection_clips_eigenvalues(space):
    theta = ThetaVector.from_moments(np.zeros(2), np.diag([0.05, 2.0]))
    projected = project_theta(space, theta)
    np.testing.assert_allclose(projected.sigma, np.diag([0.1, 1.0]))


def test_projection_clips_the_mean_radially(space):
    theta = ThetaVector.from_moments([30.0, 40.0], 0.5 * np.eye(2))
    projected = project_theta(space, theta)
    np.testing.assert_allclose(projected.mu, [6.0, 8.0])
    assert space.contains(projected)


def test_projection_keeps_points_inside(space):
    theta = ThetaVector.from_moments([1.0, -2.0], np.array([[0.5, 0.1], [0.1, 0.4]]))
    assert space.contains(theta)
    np.testing.assert_allclose(project_theta(space, theta).as_array(), theta.as_array())


def test_projection_is_idempotent_and_nonexpansive(space):
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = _random_theta(rng), _random_theta(rng)
        pa, pb = project_theta(space, a), project_theta(space, b)
        np.testing.assert_allclose(project_theta(space, pa).as_array(), pa.as_array(), atol=1e-12)
        distance = np.linalg.norm(pa.as_array() - pb.as_array())
        assert distance <= np.linalg.norm(a.as_array() - b.as_array()) + 1e-12


def test_space_validation_and_default():
    with pytest.raises(ValueError):
        ThetaSpace(M=1.0, c_lo=2.0, c_hi=1.0)
    space = ThetaSpace.from_estimate(np.array([3.0, 4.0]), np.diag([0.5, 2.0]))
    assert space.M == pytest.approx(60.0)
    assert space.c_lo == pytest.approx(0.005)
    assert space.c_hi == pytest.approx(200.0)


def test_identity_binding_returns_the_projected_estimate(space):
    pi_hat = ThetaVector.from_moments([1.0, 0.0], np.diag([0.05, 0.5]))
    result = solve_fixed_point(pi_hat, space, lambda theta: theta)
    assert result.converged
    assert result.iterations == 1
    np.testing.assert_allclose(result.theta.as_array(), project_theta(space, pi_hat).as_array())


def test_binding_only_sees_points_of_the_space(space):
    pi_hat = ThetaVector.from_moments([1.0, 0.0], np.diag([0.05, 1.5]))
    assert not space.contains(pi_hat)
    shift = ThetaVector.from_moments([0.1, 0.0], np.diag([0.02, 0.0])).as_array()
    inside = []

    def binding(theta):
        inside.append(space.contains(theta))
        return ThetaVector.from_array(theta.as_array() + shift, 2)

    solve_fixed_point(pi_hat, space, binding)
    assert inside and all(inside)


def test_constant_bias_is_removed(space):
    delta = ThetaVector.from_moments([0.2, -0.1], np.diag([0.1, 0.05])).as_array()
    pi_hat = ThetaVector.from_moments([1.0, 1.0], np.diag([0.6, 0.7]))
    binding = lambda theta: ThetaVector.from_array(theta.as_array() + delta, 2)
    result = solve_fixed_point(pi_hat, space, binding)
    expected = project_theta(space, ThetaVector.from_array(pi_hat.as_array() - delta, 2))
    assert result.converged
    assert result.iterations <= 3
    np.testing.assert_allclose(result.theta.as_array(), expected.as_array(), atol=1e-12)


def test_non_finite_binding_is_an_error(space):
    pi_hat = ThetaVector.from_moments([0.0, 0.0], 0.5 * np.eye(2))
    nan_binding = lambda theta: ThetaVector.from_array(np.full(5, np.nan), 2)
    with pytest.raises(NonFiniteIterateError):
        solve_fixed_point(pi_hat, space, nan_binding)
    with pytest.raises(NonFiniteIterateError):
        solve_fixed_point(ThetaVector.from_moments([np.nan, 0.0], np.eye(2)), space, lambda theta: theta)


@pytest.fixture(scope="module")
def fitted():
    values = correlated_sample(60, np.array([[1.0, 0.3, 0.6], [0.3, 1.0, -0.2], [0.6, -0.2, 1.0]]), 13)
    data = DataMatrix.from_array(values, ["x1", "x2", "y1"])
    model = regression.fit(data, p=2, k=1, lam=0.0)
    return data, model.with_aux_model(fastcellcov.train(data, model.cov))


def test_simulated_binding_uses_common_random_numbers(fitted):
    _, model = fitted
    theta = ThetaVector.from_moments(model.cov.mu, model.cov.sigma)
    first = inference.simulated_binding(model.aux_model, 50, 3, seed=4)
    second = inference.simulated_binding(model.aux_model, 50, 3, seed=4)
    np.testing.assert_array_equal(first(theta).as_array(), first(theta).as_array())
    np.testing.assert_array_equal(first(theta).as_array(), second(theta).as_array())
    with pytest.raises(ValueError):
        inference.simulated_binding(model.aux_model, 50, 0, seed=4)


def test_coefficient_vector_and_slope_contrasts():
    vector = inference.coefficient_vector([1.0, 2.0], [[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(vector, [1.0, 2.0, 3.0, 5.0, 4.0, 6.0])
    contrasts, labels = inference.slope_contrasts(2, 2)
    assert labels == [(0, 0), (1, 0), (0, 1), (1, 1)]
    assert contrasts[1] @ vector == 5.0
    assert contrasts[2] @ vector == 4.0


def test_percentile_ranks():
    assert inference.percentile_ranks(100, 0.9) == (5, 95)
    assert inference.percentile_ranks(4, 0.95) == (1, 4)
    assert inference.percentile_ranks(1, 0.9) == (1, 1)
    assert inference.percentile_interval([2.5], 0.9) == (2.5, 2.5)
    assert inference.percentile_interval(np.arange(100.0), 0.9) == (4.0, 94.0)


def test_cellboot_does_not_depend_on_threads(fitted):
    data, model = fitted
    contrasts, _ = inference.slope_contrasts(model.p, model.q)
    serial = inference.cellboot(data, model, contrasts, B=8, H=2, seed=5, threads=1)
    threaded = inference.cellboot(data, model, contrasts, B=8, H=2, seed=5, threads=2)
    np.testing.assert_array_equal(serial.coef_samples, threaded.coef_samples)
    assert serial.intervals == threaded.intervals
    assert serial.failures == threaded.failures
    assert serial.coef_samples.shape == (serial.B, 2)
    for lower, upper, level in serial.intervals:
        assert lower <= upper
        assert level == 0.9
    summary = serial.summary(["x1->y1", "x2->y1"])
    assert summary["intervals"][0]["contrast"] == "x1->y1"


def test_cellboot_argument_checks(fitted):
    data, model = fitted
    with pytest.raises(ValueError):
        inference.cellboot(data, model, [np.ones(2)], B=2, H=1)
    contrasts, _ = inference.slope_contrasts(model.p, model.q)
    with pytest.raises(ValueError):
        inference.cellboot(data, model, contrasts, B=2, H=1, level=1.0)


def test_ols_percentile_bootstrap(fitted):
    data, _ = fitted
    contrasts, _ = inference.slope_contrasts(2, 1)
    first = inference.ols_percentile_bootstrap(data, 2, contrasts, B=50, seed=1)
    second = inference.ols_percentile_bootstrap(data, 2, contrasts, B=50, seed=1)
    assert first == second
    assert all(lower <= upper for lower, upper in first)
