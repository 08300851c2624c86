"""
Module: inference.py

Bias correction of the fast auxiliary estimator by indirect inference, and the
cellBoot bootstrap built on it.

Main classes / functions:
    - ThetaVector, ThetaSpace: Gaussian parameters (mu, vech_s(Sigma)) and their box
    - project_theta(space, theta): metric projection onto the parameter space
    - simulated_binding(model, n, H, seed): theta -> average auxiliary estimate on
      samples of size n drawn from N(mu, Sigma) with common random numbers
    - solve_fixed_point / indirect_estimate: the projected fixed-point iteration
    - cellboot(data, fit, contrasts, B, H, level, seed): percentile intervals
    - ols_percentile_bootstrap: the classical comparison intervals

Usage:
    Every replicate b and simulated sample h draws from its own generator,
    derived from (seed, component, b, h), so results do not depend on the
    thread count or scheduling.

Example:
    result = cellboot(data, model, slope_contrasts(p, q), B=200, H=20, level=0.9, seed=7)
    for (lower, upper, level) in result.intervals:
        print(lower, upper)
"""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from src.datamodel import DataMatrix
from src.estimators import fastcellcov
from src.estimators.classical import classical_fit
from src.exceptions import CellRegressionError, NonFiniteIterateError
from src.regression import plugin_coefficients
from src.utils import derive_rng, parallel_map

logger = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)
MAX_ITER = 50


def vech_s(sigma):
    """Lower triangle, row by row, off-diagonals scaled by sqrt(2); its norm is the Frobenius norm."""
    sigma = np.asarray(sigma, dtype=float)
    rows, cols = np.tril_indices(sigma.shape[0])
    return np.where(rows == cols, 1.0, SQRT2) * sigma[rows, cols]


def unvech_s(vector, d):
    vector = np.asarray(vector, dtype=float)
    rows, cols = np.tril_indices(d)
    values = vector / np.where(rows == cols, 1.0, SQRT2)
    sigma = np.zeros((d, d))
    sigma[rows, cols] = values
    sigma[cols, rows] = values
    return sigma


@dataclass(frozen=True)
class ThetaVector:
    mu: np.ndarray
    sigma_vechs: np.ndarray

    @classmethod
    def from_moments(cls, mu, sigma):
        return cls(np.asarray(mu, dtype=float), vech_s(sigma))

    @classmethod
    def from_array(cls, array, d):
        array = np.asarray(array, dtype=float)
        return cls(array[:d].copy(), array[d:].copy())

    @property
    def d(self):
        return self.mu.size

    @property
    def sigma(self):
        return unvech_s(self.sigma_vechs, self.d)

    def as_array(self):
        return np.concatenate([self.mu, self.sigma_vechs])

    def norm(self):
        return float(np.linalg.norm(self.as_array()))


@dataclass(frozen=True)
class ThetaSpace:
    """
    Parameters with ||mu|| <= M and eigenvalues of Sigma in [c_lo, c_hi].
    """
    M: float
    c_lo: float
    c_hi: float

    def __post_init__(self):
        if self.M <= 0 or self.c_lo <= 0 or self.c_lo > self.c_hi:
            raise ValueError(f"Invalid parameter space M={self.M}, c=[{self.c_lo}, {self.c_hi}]")

    @classmethod
    def from_estimate(cls, mu, sigma):
        """M = 10(||mu|| + 1), c = lambda_min/100 (at least 1e-6), C = 100 lambda_max."""
        eig = np.linalg.eigvalsh(0.5 * (sigma + np.transpose(sigma)))
        c_hi = 100.0 * max(eig[-1], 1e-6)
        return cls(M=10.0 * (np.linalg.norm(mu) + 1.0), c_lo=min(max(eig[0] / 100.0, 1e-6), c_hi), c_hi=c_hi)

    def contains(self, theta, tol=1e-10):
        eig = np.linalg.eigvalsh(theta.sigma)
        return (np.linalg.norm(theta.mu) <= self.M * (1 + tol)
                and eig[0] >= self.c_lo * (1 - tol) and eig[-1] <= self.c_hi * (1 + tol))


def project_theta(space, theta):
    """Radial clip of mu to the M-ball and eigenvalue clip of Sigma to [c_lo, c_hi]."""
    mu = theta.mu
    norm = np.linalg.norm(mu)
    if norm > space.M:
        mu = mu * (space.M / norm)
    sigma = theta.sigma
    eigvals, eigvecs = np.linalg.eigh(sigma)
    if eigvals[0] < space.c_lo or eigvals[-1] > space.c_hi:
        sigma = (eigvecs * np.clip(eigvals, space.c_lo, space.c_hi)) @ eigvecs.T
    return ThetaVector.from_moments(mu, sigma)


class IndirectResult(NamedTuple):
    theta: ThetaVector
    converged: bool
    iterations: int
    trace: tuple


def solve_fixed_point(pi_hat, space, binding, tol=None, max_iter=MAX_ITER):
    """
    theta_l = Proj(pi_hat + theta_{l-1} - binding(theta_{l-1})), started at Proj(pi_hat).

    Args:
        pi_hat (ThetaVector): Auxiliary estimate on the observed sample.
        space (ThetaSpace): Parameter space.
        binding (callable): theta -> ThetaVector, the mean auxiliary estimate under theta.
        tol (float): Step norm that stops the iteration; default 1e-6 (1 + ||pi_hat||).

    Returns:
        IndirectResult
    """
    d = pi_hat.d
    target = pi_hat.as_array()
    if not np.all(np.isfinite(target)):
        raise NonFiniteIterateError("Auxiliary estimate is not finite")
    tol = 1e-6 * (1.0 + np.linalg.norm(target)) if tol is None else tol
    theta = project_theta(space, pi_hat)  # binding is only defined on the space
    trace = []
    for iteration in range(1, max_iter + 1):
        step = target + theta.as_array() - binding(theta).as_array()
        if not np.all(np.isfinite(step)):
            raise NonFiniteIterateError(f"Indirect inference iterate {iteration} is not finite")
        updated = project_theta(space, ThetaVector.from_array(step, d))
        change = float(np.linalg.norm(updated.as_array() - theta.as_array()))
        trace.append(change)
        logger.debug("indirect inference iteration %d: step %.3g", iteration, change)
        theta = updated
        if change < tol:
            return IndirectResult(theta, True, iteration, tuple(trace))
    return IndirectResult(theta, False, max_iter, tuple(trace))


def simulated_binding(model, n, H, seed, names=None):
    """
    theta -> mean over h of evaluate(model, mu + chol(Sigma) u_h), the draws u_h fixed once.

    Args:
        model (FastCellCovModel): Trained auxiliary estimator.
        n (int): Sample size of each simulated dataset.
        H (int): Number of simulated datasets.
        seed (int): Seed of the common random numbers; the same theta always
            gives the same value.
    """
    if H < 1:
        raise ValueError("H must be at least 1")
    d = model.d
    draws = [derive_rng(seed, "simulate", h).standard_normal((n, d)) for h in range(H)]
    names = names or tuple(f"V{j + 1}" for j in range(d))
    mask = np.ones((n, d), dtype=bool)

    def binding(theta):
        chol = np.linalg.cholesky(theta.sigma)
        total = np.zeros(d + d * (d + 1) // 2)
        for u in draws:
            sample = DataMatrix(theta.mu + u @ chol.T, mask, names)
            est = fastcellcov.evaluate(model, sample)
            total += ThetaVector.from_moments(est.mu_F, est.sigma_F).as_array()
        return ThetaVector.from_array(total / H, d)

    return binding


def indirect_estimate(aux_model, pi_hat, space, H, n, seed, tol=None, max_iter=MAX_ITER):
    """Indirect-inference correction of pi_hat with Gaussian simulations from the auxiliary model."""
    return solve_fixed_point(pi_hat, space, simulated_binding(aux_model, n, H, seed), tol, max_iter)


def coefficient_vector(b, B):
    """(b^T, vec(B)^T)^T with vec stacking the columns of B."""
    return np.concatenate([np.asarray(b, dtype=float), np.asarray(B, dtype=float).ravel(order="F")])


def slope_contrasts(p, q):
    """Unit contrasts picking every slope B[j, l]; labels are (predictor j, response l)."""
    contrasts, labels = [], []
    for l in range(q):
        for j in range(p):
            a = np.zeros(q + p * q)
            a[q + l * p + j] = 1.0
            contrasts.append(a)
            labels.append((j, l))
    return contrasts, labels


def percentile_ranks(B, level):
    """1-based order-statistic ranks ceil(alpha/2 B) and ceil((1 - alpha/2) B)."""
    alpha = 1.0 - level
    lower = int(np.ceil(round(alpha / 2 * B, 9)))
    upper = int(np.ceil(round((1 - alpha / 2) * B, 9)))
    return max(lower, 1), min(max(upper, 1), B)


def percentile_interval(values, level):
    ordered = np.sort(np.asarray(values, dtype=float))
    lower, upper = percentile_ranks(ordered.size, level)
    return float(ordered[lower - 1]), float(ordered[upper - 1])


@dataclass(frozen=True)
class BootstrapResult:
    theta_samples: list
    coef_samples: np.ndarray
    intervals: list
    B: int
    H: int
    seed: int
    level: float
    ranks: tuple
    failures: int = 0
    converged: np.ndarray = field(default=None)

    def summary(self, labels=None):
        labels = labels or [f"contrast_{i}" for i in range(len(self.intervals))]
        return {
            "level": self.level,
            "B": self.B,
            "H": self.H,
            "seed": self.seed,
            "failures": self.failures,
            "ranks": list(self.ranks),
            "intervals": [
                {"contrast": label, "lower": lower, "upper": upper, "level": lvl}
                for label, (lower, upper, lvl) in zip(labels, self.intervals)
            ],
        }


def _bootstrap_replicate(data, fit, model, space, contrasts, H, seed):
    def run(b):
        for attempt in range(2):
            rows = derive_rng(seed, "resample", b, attempt).integers(data.n, size=data.n)
            try:
                est = fastcellcov.evaluate(model, data.subset_rows(rows))
                pi_hat = ThetaVector.from_moments(est.mu_F, est.sigma_F)
                result = indirect_estimate(model, pi_hat, space, H, data.n, _replicate_seed(seed, b, attempt))
                coef = plugin_coefficients(result.theta.mu, result.theta.sigma, fit.lam, fit.p)
            except (CellRegressionError, np.linalg.LinAlgError) as err:
                logger.warning("Bootstrap replicate %d attempt %d failed: %s", b, attempt, err)
                continue
            vector = coefficient_vector(coef.b, coef.B)
            return result.theta, contrasts @ vector, result.converged, attempt
        return None
    return run


def _replicate_seed(seed, b, attempt):
    return int(derive_rng(seed, "replicate-seed", b, attempt).integers(2 ** 63 - 1))


def cellboot(data, fit, contrasts, B=1000, H=50, level=0.9, seed=0, space=None, threads=1, progress=False):
    """
    cellBoot percentile intervals for linear contrasts of (b, vec(B)).

    Each replicate resamples rows (masks included), evaluates the auxiliary
    estimator, corrects it by indirect inference and re-solves the ridge
    plug-in with the original lambda. A failed replicate is redrawn once;
    at most 2B attempts are made in total.

    Args:
        data (DataMatrix): Sample the model was fitted on (predictors first).
        fit (RegressionFit): Fitted model; its aux_model is trained if missing.
        contrasts (list): Vectors of length q + p*q.
        B (int): Bootstrap replicates.
        H (int): Simulated datasets per indirect-inference evaluation.
        level (float): Confidence level in (0, 1).
        seed (int): Top-level seed.
        space (ThetaSpace): Defaults to ThetaSpace.from_estimate on the cellCov estimate.

    Returns:
        BootstrapResult
    """
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    model = fit.aux_model or fastcellcov.train(data, fit.cov)
    space = space or ThetaSpace.from_estimate(fit.cov.mu, fit.cov.sigma)
    contrasts = np.atleast_2d(np.asarray(contrasts, dtype=float))
    if contrasts.shape[1] != fit.q + fit.p * fit.q:
        raise ValueError(f"Contrasts need length q + p*q = {fit.q + fit.p * fit.q}")

    outcomes = parallel_map(_bootstrap_replicate(data, fit, model, space, contrasts, H, seed), range(B),
                            threads=threads, desc="cellBoot", progress=progress)
    failures = sum(2 if o is None else o[3] for o in outcomes)
    kept = [o for o in outcomes if o is not None]
    if not kept:
        raise CellRegressionError("Every bootstrap replicate failed")
    values = np.vstack([o[1] for o in kept])
    intervals = [percentile_interval(values[:, i], level) + (level,) for i in range(values.shape[1])]
    converged = np.array([o[2] for o in kept])
    logger.info("cellBoot: %d replicates, %d failures, %d without II convergence",
                len(kept), failures, int(np.count_nonzero(~converged)))
    return BootstrapResult(
        theta_samples=[o[0] for o in kept],
        coef_samples=values,
        intervals=intervals,
        B=len(kept),
        H=H,
        seed=seed,
        level=level,
        ranks=percentile_ranks(len(kept), level),
        failures=failures,
        converged=converged,
    )


def ols_percentile_bootstrap(data, p, contrasts, B=1000, level=0.9, seed=0, lam=0.0):
    """Row-resampling percentile intervals of the classical plug-in estimator."""
    contrasts = np.atleast_2d(np.asarray(contrasts, dtype=float))
    values = []
    for b in range(B):
        rows = derive_rng(seed, "ols-resample", b).integers(data.n, size=data.n)
        try:
            coef = classical_fit(data.subset_rows(rows), p, lam)
        except CellRegressionError:
            continue
        values.append(contrasts @ coefficient_vector(coef.b, coef.B))
    if not values:
        raise CellRegressionError("Every OLS bootstrap replicate failed")
    values = np.vstack(values)
    return [percentile_interval(values[:, i], level) for i in range(values.shape[1])]
