"""
Module: simulation.py

Monte-Carlo scenarios for cellMR and cellBoot: clean Gaussian regression data,
cellwise / casewise / mixed contamination, optional missing cells, and the
MSE, coverage and indirect-inference bias studies run on them.

Main class / functions:
    - ScenarioConfig: one scenario (sizes, contamination, SNR, seed, reps)
    - generate(cfg, rep): train / test data, the true parameters and the replaced-cell mask
    - run_mse(cfg, methods): average clean-test MSE per method
    - run_coverage(cfg, level, B, H): empirical coverage of cellBoot and OLS percentile intervals
    - run_ii_bias(d, n, H, reps, seed): how often indirect inference moves the auxiliary estimate closer to the truth

Usage:
    Replication r of a scenario draws from generators derived from (seed, stream, r);
    clean data, contamination and missingness use separate streams, so gamma = 0
    reproduces the clean generator bit for bit.

Example:
    cfg = ScenarioConfig(n=100, p=5, q=5, kind="cellwise", gamma=6.0, epsilon=0.2, reps=30)
    table = run_mse(cfg, threads=4)
    print(table)
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np
import pandas as pd

from evaluation.metrics import interval_coverage, mse
from src.datamodel import DataMatrix, standardize
from src.estimators import fastcellcov
from src.estimators.cellcov import cellcov
from src.estimators.classical import classical_fit
from src.exceptions import CellRegressionError, InvalidConfigError
from src.inference import (
    ThetaSpace,
    ThetaVector,
    cellboot,
    indirect_estimate,
    ols_percentile_bootstrap,
    slope_contrasts,
)
from src.regression import cross_validate, default_k_grid, default_lambda_grid, fit as cellmr_fit
from src.utils import derive_rng, parallel_map

logger = logging.getLogger(__name__)

KINDS = ("clean", "cellwise", "casewise", "mixed")
MSE_METHODS = ("ols_ridge", "cellmr")
COVERAGE_METHODS = ("cellboot", "ols_percentile")
PREDICTOR_CORRELATION = -0.4
SLOPE_SD = 0.2
CASEWISE_SHIFT = 0.2


@dataclass(frozen=True)
class ScenarioConfig:
    """
    Args:
        n, p, q (int): Training size, predictors, responses.
        epsilon (float): Contamination fraction in [0, 0.5).
        gamma (float): Contamination position; 0 only for the clean scenario.
        kind (str): clean, cellwise, casewise or mixed.
        na_fraction (float): Fraction of training cells set missing.
        snr (float): Signal-to-noise ratio tr(B' Sigma_x B) / tr(Sigma_eps).
        seed (int): Top-level seed.
        reps (int): Replications.
        n_test (int): Size of the clean test set.
        k, lam: Fixed cellMR rank and ridge penalty; tuned by CV when None.
        ridge_lambda (float): Penalty of the classical baseline.
        folds (int): CV folds when tuning.
    """
    n: int = 100
    p: int = 5
    q: int = 5
    epsilon: float = 0.0
    gamma: float = 0.0
    kind: str = "clean"
    na_fraction: float = 0.0
    snr: float = 10.0
    seed: int = 0
    reps: int = 10
    n_test: int = 200
    k: int = None
    lam: float = None
    ridge_lambda: float = 0.0
    folds: int = 5

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise InvalidConfigError(f"Unknown scenario kind {self.kind!r}; use one of {KINDS}")
        if (self.kind == "clean") != (self.gamma == 0):
            raise InvalidConfigError(f"kind={self.kind!r} with gamma={self.gamma}: gamma is 0 exactly for clean data")
        if not 0 <= self.epsilon < 0.5:
            raise InvalidConfigError(f"epsilon must lie in [0, 0.5), got {self.epsilon}")
        if self.gamma < 0:
            raise InvalidConfigError(f"gamma must be nonnegative, got {self.gamma}")
        if not 0 <= self.na_fraction < 1:
            raise InvalidConfigError(f"na_fraction must lie in [0, 1), got {self.na_fraction}")
        if min(self.n, self.p, self.q, self.reps, self.n_test) < 1 or self.snr <= 0:
            raise InvalidConfigError("Sizes, reps and snr must be positive")

    @classmethod
    def from_dict(cls, payload):
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise InvalidConfigError(f"Unknown scenario fields: {sorted(unknown)}")
        return cls(**payload)

    def to_dict(self):
        return asdict(self)

    @property
    def d(self):
        return self.p + self.q


class Truth(NamedTuple):
    B: np.ndarray
    b: np.ndarray
    sigma_eps: np.ndarray
    sigma_x: np.ndarray
    sigma: np.ndarray


class Scenario(NamedTuple):
    train: DataMatrix
    test: DataMatrix
    truth: Truth
    contaminated_mask: np.ndarray


def predictor_covariance(p):
    index = np.arange(p)
    return PREDICTOR_CORRELATION ** np.abs(index[:, None] - index[None, :])


def joint_covariance(sigma_x, B, sigma_eps):
    """Model-implied covariance of (x, y)."""
    cross = sigma_x @ B
    return np.block([[sigma_x, cross], [cross.T, B.T @ cross + sigma_eps]])


def make_truth(cfg, rep=0):
    sigma_x = predictor_covariance(cfg.p)
    B = SLOPE_SD * derive_rng(cfg.seed, "truth", rep).standard_normal((cfg.p, cfg.q))
    signal = np.trace(B.T @ sigma_x @ B)
    sigma_eps = np.eye(cfg.q) * (signal / cfg.q) / cfg.snr
    return Truth(B, np.zeros(cfg.q), sigma_eps, sigma_x, joint_covariance(sigma_x, B, sigma_eps))


def _regression_sample(truth, n, rng):
    p, q = truth.B.shape
    x = rng.standard_normal((n, p)) @ np.linalg.cholesky(truth.sigma_x).T
    e = rng.standard_normal((n, q)) @ np.linalg.cholesky(truth.sigma_eps).T
    return np.hstack([x, truth.b + x @ truth.B + e])


def casewise_center(sigma, gamma):
    """0.2 gamma d sqrt(d) e / sqrt(e' Sigma^-1 e), e the eigenvector of the smallest eigenvalue."""
    d = sigma.shape[0]
    e = np.linalg.eigh(sigma)[1][:, 0]
    return CASEWISE_SHIFT * gamma * d * np.sqrt(d) * e / np.sqrt(e @ np.linalg.solve(sigma, e))


def _contaminate(values, cfg, truth, rep):
    replaced = np.zeros(values.shape, dtype=bool)
    if cfg.kind == "clean" or cfg.epsilon == 0:
        return values, replaced
    share = cfg.epsilon / 2 if cfg.kind == "mixed" else cfg.epsilon
    if cfg.kind in ("casewise", "mixed"):
        rng = derive_rng(cfg.seed, "contaminate-cases", rep)
        rows = rng.choice(cfg.n, size=int(round(share * cfg.n)), replace=False)
        center = casewise_center(truth.sigma, cfg.gamma)
        values[rows] = center + rng.standard_normal((rows.size, cfg.d)) @ np.linalg.cholesky(truth.sigma).T
        replaced[rows] = True
    if cfg.kind in ("cellwise", "mixed"):
        cells = derive_rng(cfg.seed, "contaminate-cells", rep).random(values.shape) < share
        values[cells] = np.broadcast_to(cfg.gamma * np.diag(truth.sigma), values.shape)[cells]
        replaced |= cells
    return values, replaced


def _missing_mask(cfg, rep):
    """Observed mask with a na_fraction of cells removed; every row keeps at least one cell."""
    rng = derive_rng(cfg.seed, "missing", rep)
    mask = rng.random((cfg.n, cfg.d)) >= cfg.na_fraction
    for i in np.flatnonzero(~mask.any(axis=1)):
        mask[i, rng.integers(cfg.d)] = True
    return mask


def generate(cfg, rep=0):
    """
    Draw one replication of a scenario.

    Returns:
        Scenario: contaminated training DataMatrix (with missing cells), clean
        test DataMatrix, the true parameters, and the mask of replaced cells.
    """
    cfg.validate()
    truth = make_truth(cfg, rep)
    values = _regression_sample(truth, cfg.n, derive_rng(cfg.seed, "clean", rep))
    values, replaced = _contaminate(values, cfg, truth, rep)
    mask = _missing_mask(cfg, rep) if cfg.na_fraction > 0 else np.ones(values.shape, dtype=bool)
    names = [f"x{j + 1}" for j in range(cfg.p)] + [f"y{l + 1}" for l in range(cfg.q)]
    test = _regression_sample(truth, cfg.n_test, derive_rng(cfg.seed, "test", rep))
    return Scenario(
        train=DataMatrix(values, mask, tuple(names)),
        test=DataMatrix.from_array(test, names),
        truth=truth,
        contaminated_mask=replaced,
    )


def tune_cellmr(train, cfg, threads=1):
    """(k, lambda) from the config, or robust CV over the default grids when unset."""
    if cfg.k is not None and cfg.lam is not None:
        return cfg.k, cfg.lam
    k_grid = [cfg.k] if cfg.k is not None else default_k_grid(train.d)
    if cfg.lam is not None:
        lambda_grid = [cfg.lam]
    else:
        _, standardizer = standardize(train.select_columns(range(cfg.p)))
        lambda_grid = default_lambda_grid(np.diag(standardizer.scales ** 2))
    report = cross_validate(train, cfg.p, k_grid, lambda_grid, folds=cfg.folds, seed=cfg.seed, threads=threads)
    return report.chosen


def _check_methods(methods, known):
    unknown = [m for m in methods if m not in known]
    if unknown or not methods:
        raise InvalidConfigError(f"Unknown methods {unknown}; use any of {known}")


def _fit_method(method, train, cfg):
    if method == "ols_ridge":
        return classical_fit(train, cfg.p, cfg.ridge_lambda)
    k, lam = tune_cellmr(train, cfg)
    return cellmr_fit(train, cfg.p, k, lam)


def _summary_rows(cfg, metric_values, metric, failures):
    rows = []
    for method, values in metric_values.items():
        values = np.asarray(values, dtype=float)
        for name, value in ((metric, np.mean(values) if values.size else np.nan),
                            (f"{metric}_median", np.median(values) if values.size else np.nan)):
            rows.append({
                "scenario": cfg.kind,
                "gamma": cfg.gamma,
                "method": method,
                "metric": name,
                "value": float(value),
                "reps": int(values.size),
                "failures": failures[method],
            })
    return pd.DataFrame(rows, columns=["scenario", "gamma", "method", "metric", "value", "reps", "failures"])


def run_mse(cfg, methods=MSE_METHODS, threads=1, progress=False):
    """
    Clean-test MSE (1/n_test) sum ||y - b - B'x||^2 per method, over cfg.reps replications.

    A failed replication is excluded for that method and counted in `failures`.
    """
    _check_methods(methods, MSE_METHODS)

    def one(rep):
        scenario = generate(cfg, rep)
        test = scenario.test.values
        out = {}
        for method in methods:
            try:
                coef = _fit_method(method, scenario.train, cfg)
            except CellRegressionError as err:
                logger.warning("%s failed on replication %d: %s", method, rep, err)
                out[method] = None
                continue
            out[method] = mse(test[:, cfg.p:], coef.b + test[:, :cfg.p] @ coef.B)
        return out

    results = parallel_map(one, range(cfg.reps), threads=threads, desc=f"MSE {cfg.kind}", progress=progress)
    values = {m: [r[m] for r in results if r[m] is not None] for m in methods}
    failures = {m: sum(r[m] is None for r in results) for m in methods}
    return _summary_rows(cfg, values, "mse", failures)


def run_coverage(cfg, level=0.9, B=200, H=20, methods=COVERAGE_METHODS, threads=1, progress=False):
    """
    Empirical coverage of slope intervals: the fraction of (replication, slope entry)
    pairs whose interval contains the true B[j, l].
    """
    _check_methods(methods, COVERAGE_METHODS)
    contrasts, labels = slope_contrasts(cfg.p, cfg.q)

    def one(rep):
        scenario = generate(cfg, rep)
        truth = np.array([scenario.truth.B[j, l] for j, l in labels])
        rep_seed = int(derive_rng(cfg.seed, "coverage-seed", rep).integers(2 ** 31))
        out = {}
        for method in methods:
            try:
                if method == "cellboot":
                    k, lam = tune_cellmr(scenario.train, cfg)
                    model = cellmr_fit(scenario.train, cfg.p, k, lam)
                    result = cellboot(scenario.train, model, contrasts, B=B, H=H, level=level, seed=rep_seed)
                    intervals = [(lo, hi) for lo, hi, _ in result.intervals]
                else:
                    intervals = ols_percentile_bootstrap(scenario.train, cfg.p, contrasts, B=B, level=level,
                                                         seed=rep_seed, lam=cfg.ridge_lambda)
            except CellRegressionError as err:
                logger.warning("%s failed on replication %d: %s", method, rep, err)
                out[method] = None
                continue
            out[method] = interval_coverage(intervals, truth)
        return out

    results = parallel_map(one, range(cfg.reps), threads=threads, desc=f"coverage {cfg.kind}", progress=progress)
    values = {m: [r[m] for r in results if r[m] is not None] for m in methods}
    failures = {m: sum(r[m] is None for r in results) for m in methods}
    table = _summary_rows(cfg, values, "coverage", failures)
    table["level"] = level
    return table


def run_ii_bias(d=4, n=200, H=20, reps=50, k=1, seed=0, threads=1, progress=False):
    """
    Per replication, whether ||theta_II - theta_0|| < ||pi_hat - theta_0|| on clean
    N(0, Sigma_0) data, with Sigma_0 the (-0.4)^|j-l| matrix.

    Returns:
        pd.DataFrame: rep, aux_error, ii_error, improved, converged.
    """
    sigma0 = predictor_covariance(d)
    theta0 = ThetaVector.from_moments(np.zeros(d), sigma0)
    names = tuple(f"V{j + 1}" for j in range(d))

    def one(rep):
        values = derive_rng(seed, "ii-bias", rep).standard_normal((n, d)) @ np.linalg.cholesky(sigma0).T
        sample = DataMatrix(values, np.ones((n, d), dtype=bool), names)
        cov = cellcov(sample, k)
        model = fastcellcov.train(sample, cov)
        est = fastcellcov.evaluate(model, sample)
        pi_hat = ThetaVector.from_moments(est.mu_F, est.sigma_F)
        space = ThetaSpace.from_estimate(cov.mu, cov.sigma)
        result = indirect_estimate(model, pi_hat, space, H, n, int(derive_rng(seed, "ii-simulate", rep).integers(2 ** 31)))
        aux_error = float(np.linalg.norm(pi_hat.as_array() - theta0.as_array()))
        ii_error = float(np.linalg.norm(result.theta.as_array() - theta0.as_array()))
        return {"rep": rep, "aux_error": aux_error, "ii_error": ii_error,
                "improved": ii_error < aux_error, "converged": result.converged}

    return pd.DataFrame(parallel_map(one, range(reps), threads=threads, desc="II bias", progress=progress))
