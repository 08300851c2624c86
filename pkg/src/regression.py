"""
Module: regression.py

Cellwise robust multivariate regression (cellMR): ridge plug-in coefficients
from any location/scatter estimate, the cellCov-based fit, prediction with
imputation of outlying or missing predictor cells, and (k, lambda) selection
by robustly weighted K-fold cross-validation.

Main classes / functions:
    - RegressionFit, CvReport
    - plugin_coefficients(mu, sigma, lam, p) / plugin_fit(cov, lam, p, q)
    - fit(data, p, k, lam)
    - predict(fit, x_star) / predict_matrix(fit, values)
    - cross_validate(data, p, k_grid, lambda_grid, folds, seed)

Usage:
    The first p columns of the data are the predictors, the remaining q the
    responses. Rank k and penalty lambda are fixed for a fit; use
    cross_validate to choose them.

Example:
    report = cross_validate(data, p=3, k_grid=[1, 2], lambda_grid=[0.0, 0.1], folds=5, seed=1)
    model = fit(data, p=3, k=report.chosen[0], lam=report.chosen[1])
    y_hat = predict(model, x_new)
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd

from src.estimators import cellpca
from src.estimators.cellcov import CellCovOptions, CovEstimate, cellcov
from src.estimators.mkernel import TanhRho, mscale
from src.exceptions import (
    AllMissingPointError,
    CellRegressionError,
    DegenerateColumnError,
    DimensionMismatchError,
    FoldTooSmallError,
    SingularSystemError,
)
from src.utils import derive_rng, parallel_map

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CONDITION_LIMIT = 1e12
# lambda = 0 is added to the default grid when cond(Sigma_x) stays below this
ZERO_LAMBDA_CONDITION = 1e5
MIN_FOLD_SIZE = 2


class PluginCoefficients(NamedTuple):
    B: np.ndarray
    b: np.ndarray
    sigma_eps: np.ndarray


@dataclass(frozen=True)
class RegressionFit:
    """
    Fitted cellMR model.

    Args:
        B (np.ndarray): p x q slopes.
        b (np.ndarray): q intercepts.
        sigma_eps (np.ndarray): q x q error covariance.
        lam (float): Ridge penalty.
        k (int): cellPCA rank of the joint fit.
        p (int), q (int): Predictor and response counts.
        cov (CovEstimate): Joint cellCov estimate the coefficients come from.
        predictor_model (CellPcaFit): cellPCA on the standardized predictors, used to impute.
        column_names (tuple): Predictor names followed by response names.
        aux_model: Optional FastCellCovModel trained on the same data (bootstrap input).
    """
    B: np.ndarray
    b: np.ndarray
    sigma_eps: np.ndarray
    lam: float
    k: int
    p: int
    q: int
    cov: CovEstimate
    predictor_model: Optional[cellpca.CellPcaFit] = None
    column_names: tuple = ()
    aux_model: object = None

    @property
    def predictor_standardizer(self):
        return self.cov.standardizer.subset(range(self.p))

    def with_aux_model(self, aux_model):
        return RegressionFit(self.B, self.b, self.sigma_eps, self.lam, self.k, self.p, self.q,
                             self.cov, self.predictor_model, self.column_names, aux_model)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "B": self.B.tolist(),
            "b": self.b.tolist(),
            "sigma_eps": self.sigma_eps.tolist(),
            "lambda": self.lam,
            "k": self.k,
            "p": self.p,
            "q": self.q,
            "column_names": list(self.column_names),
            "cov": self.cov.to_dict(),
            "predictor_model": None if self.predictor_model is None else self.predictor_model.to_dict(),
            "aux_model": None if self.aux_model is None else self.aux_model.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload):
        from src.estimators.fastcellcov import FastCellCovModel

        version = payload.get("schema_version")
        if version != SCHEMA_VERSION:
            raise DimensionMismatchError(f"Unsupported model schema version {version}")
        p, q = int(payload["p"]), int(payload["q"])
        return cls(
            B=np.asarray(payload["B"], dtype=float).reshape(p, q),
            b=np.asarray(payload["b"], dtype=float),
            sigma_eps=np.asarray(payload["sigma_eps"], dtype=float).reshape(q, q),
            lam=float(payload["lambda"]),
            k=int(payload["k"]),
            p=p,
            q=q,
            cov=CovEstimate.from_dict(payload["cov"]),
            predictor_model=None if payload.get("predictor_model") is None
            else cellpca.CellPcaFit.from_dict(payload["predictor_model"]),
            column_names=tuple(payload.get("column_names", ())),
            aux_model=None if payload.get("aux_model") is None
            else FastCellCovModel.from_dict(payload["aux_model"]),
        )


@dataclass(frozen=True)
class CvReport:
    grid: list
    cv_values: np.ndarray
    chosen: tuple
    fold_assignment: np.ndarray
    fold_values: np.ndarray = field(default=None)

    def to_frame(self):
        return pd.DataFrame({
            "k": [g[0] for g in self.grid],
            "lambda": [g[1] for g in self.grid],
            "cv": self.cv_values,
            "chosen": [g == self.chosen for g in self.grid],
        })


def _split_check(d, p):
    if not 1 <= p < d:
        raise DimensionMismatchError(f"Need 1 <= p < d, got p={p}, d={d}")


def plugin_coefficients(mu, sigma, lam, p):
    """
    Ridge plug-in: B = (Sigma_x + lam I)^-1 Sigma_xy, b = mu_y - B^T mu_x,
    Sigma_eps = Sigma_y - Sigma_yx (Sigma_x + lam I)^-1 Sigma_xy.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    _split_check(mu.size, p)
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    sigma_x = sigma[:p, :p] + lam * np.eye(p)
    sigma_xy = sigma[:p, p:]
    condition = np.linalg.cond(sigma_x)
    if not np.isfinite(condition) or condition > CONDITION_LIMIT:
        raise SingularSystemError(f"Sigma_x + lambda*I has condition number {condition:.3g}")
    B = np.linalg.solve(sigma_x, sigma_xy)
    b = mu[p:] - B.T @ mu[:p]
    sigma_eps = sigma[p:, p:] - sigma_xy.T @ B
    return PluginCoefficients(B, b, 0.5 * (sigma_eps + sigma_eps.T))


def plugin_fit(cov, lam, p, q):
    """Coefficients only; the returned fit has no predictor model and cannot impute."""
    if cov.mu.size != p + q:
        raise DimensionMismatchError(f"cov has dimension {cov.mu.size}, expected p + q = {p + q}")
    coef = plugin_coefficients(cov.mu, cov.sigma, lam, p)
    return RegressionFit(coef.B, coef.b, coef.sigma_eps, float(lam), cov.k, p, q, cov)


def fit(data, p, k, lam, options=None):
    """
    cellMR fit: cellCov on the joint data, ridge plug-in, and a separate
    cellPCA on the predictors for prediction.

    Args:
        data (DataMatrix): Predictors in the first p columns, responses after.
        p (int): Number of predictors.
        k (int): cellPCA rank of the joint fit.
        lam (float): Ridge penalty.
        options (CellCovOptions): Estimator settings.

    Returns:
        RegressionFit
    """
    options = options or CellCovOptions()
    _split_check(data.d, p)
    cov, predictor_model = _fit_components(data, p, k, lam, options)
    coef = plugin_coefficients(cov.mu, cov.sigma, lam, p)
    return RegressionFit(coef.B, coef.b, coef.sigma_eps, float(lam), int(k), p, data.d - p, cov,
                         predictor_model, data.column_names)


def _fit_components(data, p, k, lam, options):
    try:
        cov = cellcov(data, k, options)
    except DegenerateColumnError as err:
        if err.column < p and lam == 0:
            raise SingularSystemError(f"Predictor column {err.column} has no robust spread; Sigma_x is singular") from err
        raise
    x_data = cov.standardizer.subset(range(p)).apply(data.select_columns(range(p)))
    return cov, cellpca.fit(x_data, min(k, p - 1), options.pca)


def _impute(standardizer, predictor_model, values, mask, options):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape[1] != standardizer.d:
        raise DimensionMismatchError(f"Expected {standardizer.d} predictor columns, got {values.shape[1]}")
    mask = np.isfinite(values) if mask is None else np.atleast_2d(np.asarray(mask, dtype=bool)) & np.isfinite(values)
    if not np.all(mask.any(axis=1)):
        raise AllMissingPointError("A predictor row has no observed cells")
    imputed = cellpca.impute_rows(predictor_model, values / standardizer.scales, mask, options)
    return imputed * standardizer.scales


def impute_predictors(fit, values, mask=None, options=None):
    """Keep inlying observed predictor cells, replace missing and outlying ones by their cellPCA fit."""
    return _impute(fit.predictor_standardizer, fit.predictor_model, values, mask, options)


def predict_matrix(fit, values, mask=None, options=None):
    x_imp = impute_predictors(fit, values, mask, options)
    return fit.b + x_imp @ fit.B


def predict(fit, x_star, mask=None, options=None):
    """
    Predict the responses of one predictor vector.

    Args:
        fit (RegressionFit): Fitted model with a predictor model.
        x_star (array-like): p predictor values, NaN for missing cells.
        mask (array-like): Optional observed mask.

    Returns:
        np.ndarray: q predicted responses b + B^T x_imp.
    """
    x_star = np.asarray(x_star, dtype=float).ravel()
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).ravel()[None, :]
    return predict_matrix(fit, x_star[None, :], mask, options)[0]


def fold_weights(residuals, mask, rho=None):
    """
    Cross-validation weights m * w_case * w_cell**2 of one fold's response residuals.

    Args:
        residuals (np.ndarray): n_h x q residuals y - y_hat (any value at missing cells).
        mask (np.ndarray): n_h x q observed mask of the responses.
        rho: Weight kernel, defaults to TanhRho().

    Returns:
        np.ndarray: n_h x q weights.
    """
    rho = rho or TanhRho()
    mask = np.asarray(mask, dtype=bool)
    R = np.where(mask, residuals, 0.0)
    tiny = np.finfo(float).tiny
    scales = np.array([
        max(mscale(R[mask[:, j], j]).scale, tiny) if mask[:, j].any() else 1.0
        for j in range(R.shape[1])
    ])
    with np.errstate(over="ignore", invalid="ignore"):
        w_cell = rho.weight(R / scales) * mask
    denom = w_cell.sum(axis=1)
    d = np.full(R.shape[0], np.inf)
    np.divide((w_cell * R ** 2).sum(axis=1), denom, out=d, where=denom > 0)
    finite = np.isfinite(d)
    case_scale = max(mscale(d[finite]).scale, tiny) if finite.any() else 1.0
    with np.errstate(over="ignore", invalid="ignore"):
        w_case = np.where(finite, rho.weight(np.where(finite, d, 0.0) / case_scale), 0.0)
    return mask * w_case[:, None] * w_cell ** 2


def weighted_fold_mse(residuals, weights):
    """Per-column weighted mean of squared residuals; NaN where a column has no weight."""
    R = np.where(weights > 0, residuals, 0.0)
    total = weights.sum(axis=0)
    out = np.full(R.shape[1], np.nan)
    np.divide((weights * R ** 2).sum(axis=0), total, out=out, where=total > 0)
    return out


def fold_assignment(n, folds, seed):
    """Seeded shuffle of the rows cut into `folds` contiguous blocks."""
    permutation = derive_rng(seed, "cv-folds").permutation(n)
    assignment = np.empty(n, dtype=int)
    for h, block in enumerate(np.array_split(permutation, folds)):
        assignment[block] = h
    return assignment


def default_k_grid(d):
    return list(range(1, min(10, d - 1) + 1))


def default_lambda_grid(sigma_x):
    """Ten log-spaced penalties 1e-4..1e2 times tr(Sigma_x)/p, plus 0 for well-conditioned Sigma_x."""
    sigma_x = np.atleast_2d(sigma_x)
    grid = list(np.logspace(-4, 2, 10) * np.trace(sigma_x) / sigma_x.shape[0])
    if np.linalg.cond(sigma_x) < ZERO_LAMBDA_CONDITION:
        grid = [0.0] + grid
    return grid


def _fold_task(data, p, assignment, lambda_grid, options):
    def run(task):
        h, k = task
        train = data.subset_rows(np.flatnonzero(assignment != h))
        test_rows = np.flatnonzero(assignment == h)
        # rows without any observed predictor cannot be predicted
        test = data.subset_rows(test_rows[data.mask[test_rows, :p].any(axis=1)])
        y_mask = test.mask[:, p:]
        y = test.observed_values()[:, p:]
        try:
            cov, predictor_model = _fit_components(train, p, k, lambda_grid[0], options)
            x_imp = _impute(cov.standardizer.subset(range(p)), predictor_model,
                            test.values[:, :p], test.mask[:, :p], options.pca)
        except CellRegressionError as err:
            if isinstance(err, ValueError):
                raise
            # a degenerate training split drops out of the fold average
            logger.warning("Skipping fold %d for k=%d: %s", h, k, err)
            return np.full((len(lambda_grid), data.d - p), np.nan)
        values = []
        for lam in lambda_grid:
            try:
                coef = plugin_coefficients(cov.mu, cov.sigma, lam, p)
            except SingularSystemError:
                values.append(np.full(data.d - p, np.nan))
                continue
            residuals = y - (coef.b + x_imp @ coef.B)
            values.append(weighted_fold_mse(residuals, fold_weights(residuals, y_mask, options.pca.rho_cell)))
        return np.vstack(values)
    return run


def cross_validate(data, p, k_grid, lambda_grid, folds=10, seed=0, options=None, threads=1, progress=False):
    """
    Robust K-fold cross-validation over a (k, lambda) grid.

    CV(k, lambda) averages the weighted fold MSE over folds and response
    columns. The minimum wins; ties go to the smaller k, then the smaller lambda.

    Returns:
        CvReport
    """
    options = options or CellCovOptions()
    _split_check(data.d, p)
    k_grid = sorted(int(k) for k in k_grid)
    lambda_grid = sorted(float(lam) for lam in lambda_grid)
    if folds < 2 or not k_grid or not lambda_grid:
        raise ValueError("cross_validate needs folds >= 2 and nonempty grids")
    assignment = fold_assignment(data.n, folds, seed)
    sizes = np.bincount(assignment, minlength=folds)
    if sizes.min() < MIN_FOLD_SIZE:
        raise FoldTooSmallError(f"Smallest fold has {sizes.min()} rows; need at least {MIN_FOLD_SIZE}")

    tasks = [(h, k) for k in k_grid for h in range(folds)]
    results = parallel_map(_fold_task(data, p, assignment, lambda_grid, options), tasks,
                           threads=threads, desc="cross-validation", progress=progress)
    table = np.empty((len(k_grid), folds, len(lambda_grid), data.d - p))
    for (h, k), value in zip(tasks, results):
        table[k_grid.index(k), h] = value

    with warnings.catch_warnings():
        # all-NaN slices come from skipped folds and singular lambdas
        warnings.simplefilter("ignore", RuntimeWarning)
        per_pair = np.nanmean(np.nanmean(table, axis=1), axis=2)
    grid, cv_values = [], []
    for a, k in enumerate(k_grid):
        for c, lam in enumerate(lambda_grid):
            grid.append((k, lam))
            cv_values.append(per_pair[a, c])
    cv_values = np.asarray(cv_values)
    if not np.isfinite(cv_values).any():
        raise CellRegressionError("No (k, lambda) pair could be fitted on any fold")
    finite = np.where(np.isfinite(cv_values), cv_values, np.inf)
    chosen = grid[int(np.argmin(finite))]
    logger.info("Cross-validation chose k=%d, lambda=%.6g", chosen[0], chosen[1])
    return CvReport(grid, cv_values, chosen, assignment, table)
