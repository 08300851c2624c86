import numpy as np
import pytest
from scipy import integrate, stats

from src.estimators.mkernel import QuadraticRho, TanhChi, TanhRho, default_chi, mscale, mscale_columns
from src.exceptions import EmptyInputError, NonFiniteInputError


@pytest.fixture
def rho():
    return TanhRho()


def test_rho_examples(rho):
    assert rho.rho(0.0) == 0.0
    assert rho.rho(1.0) == pytest.approx(0.5)
    assert rho.rho(10.0) == rho.d_const
    assert rho.rho(4.0) == pytest.approx(rho.d_const, abs=1e-12)


def test_q1_follows_from_continuity(rho):
    assert rho.q1 * np.tanh(rho.q2 * (rho.c - rho.b)) == pytest.approx(rho.b, abs=1e-12)
    assert rho.q1 == pytest.approx(1.54, abs=5e-3)


def test_psi_is_continuous_at_the_edges(rho):
    eps = 1e-12
    assert abs(rho.psi(rho.b - eps) - rho.psi(rho.b + eps)) <= 1e-9
    assert abs(rho.psi(rho.c - eps) - rho.psi(rho.c + eps)) <= 1e-9


def test_psi_examples(rho):
    assert rho.psi(0.7) == pytest.approx(0.7)
    assert rho.psi(5.0) == 0.0
    z = np.linspace(-6, 6, 101)
    np.testing.assert_allclose(rho.psi(-z), -rho.psi(z), atol=1e-15)


def test_psi_is_the_derivative_of_rho(rho):
    z = np.linspace(-8, 8, 1000)
    h = 1e-5
    numerical = (rho.rho(z + h) - rho.rho(z - h)) / (2 * h)
    assert np.max(np.abs(rho.psi(z) - numerical)) <= 1e-6


def test_weight_examples_and_bounds(rho):
    assert rho.weight(0.0) == 1.0
    assert rho.weight(1.2) == pytest.approx(1.0)
    assert rho.weight(6.0) == 0.0
    z = np.linspace(-10, 10, 401)
    w = rho.weight(z)
    assert np.all((w >= 0) & (w <= 1))
    np.testing.assert_allclose(w * z, rho.psi(z), atol=1e-14)


def test_rho_of_sqrt_is_concave(rho):
    z = np.linspace(0.0, (2 * rho.c) ** 2, 2001)
    values = rho.rho(np.sqrt(z))
    assert np.max(np.diff(values, 2)) <= 1e-10


def test_rho_is_nondecreasing(rho):
    z = np.linspace(0, 10, 1001)
    assert np.all(np.diff(rho.rho(z)) >= -1e-15)


def test_rescaled_keeps_bridge_span(rho):
    other = TanhRho.rescaled(2.0, 5.0)
    assert other.q2 * (other.c - other.b) == pytest.approx(rho.q2 * (rho.c - rho.b))
    assert other.psi(other.b) == pytest.approx(other.b)


def test_quadratic_rho_has_constant_weight():
    quad = QuadraticRho()
    assert quad.rho(3.0) == 9.0
    np.testing.assert_array_equal(quad.weight(np.array([0.0, 5.0])), [2.0, 2.0])


def test_chi_shape():
    chi = default_chi()
    assert chi.chi(0.0) == pytest.approx(chi.a_const - 1.0)
    assert chi.chi(chi.c) == 0.0
    assert chi.chi(10.0) == 0.0
    assert chi.chi(chi.root) == pytest.approx(0.0, abs=1e-12)
    eps = 1e-10
    assert abs(chi.chi(chi.b - eps) - chi.chi(chi.b + eps)) <= 1e-8


def test_chi_is_fisher_consistent():
    chi = TanhChi()
    value, _ = integrate.quad(lambda x: float(chi.chi(x)) * stats.norm.pdf(x), -chi.c, chi.c,
                              points=[-chi.b, chi.b], limit=200)
    assert abs(value) <= 1e-8


def test_mscale_all_zero_is_degenerate():
    result = mscale([0.0, 0.0, 0.0, 0.0])
    assert result.degenerate
    assert result.scale == 0.0


def test_mscale_constant_sample():
    result = mscale([3.0] * 5)
    assert not result.degenerate
    assert result.scale == pytest.approx(3.0 / default_chi().root, rel=1e-10)


def test_mscale_root_residual():
    z = np.random.default_rng(0).standard_normal(200)
    sigma = mscale(z).scale
    assert abs(np.mean(default_chi().chi(z / sigma))) <= 1e-10


def test_mscale_is_scale_equivariant():
    z = np.random.default_rng(1).standard_normal(50)
    assert mscale(2 * z).scale == pytest.approx(2 * mscale(z).scale, rel=1e-10)


def test_mscale_does_not_center():
    z = np.random.default_rng(2).standard_normal(100)
    assert mscale(z + 5.0).scale > 2 * mscale(z).scale


def test_mscale_is_consistent_at_the_normal():
    z = np.random.default_rng(3).standard_normal(20000)
    assert mscale(z).scale == pytest.approx(1.0, abs=0.05)


def test_mscale_errors():
    with pytest.raises(EmptyInputError):
        mscale([])
    with pytest.raises(NonFiniteInputError):
        mscale([1.0, np.nan])


def test_mscale_columns_skips_missing():
    values = np.array([[1.0, 2.0], [-1.0, np.nan], [2.0, -2.0], [-2.0, 1.0]])
    mask = np.isfinite(values)
    scales = mscale_columns(values, mask)
    assert scales[0] == pytest.approx(mscale([1.0, -1.0, 2.0, -2.0]).scale)
    assert scales[1] == pytest.approx(mscale([2.0, -2.0, 1.0]).scale)
