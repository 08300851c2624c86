"""
Module: diagnostics.py

Outlier map and cellmap quantities of a fitted cellMR model, emitted as
plot-ready tables (rendering happens elsewhere).

Main class / functions:
    - DiagnosticsReport
    - distances(fit, data): residual and predictor distances, cutoffs, case classes
    - cellmaps(fit, data, rows): standardized cell residuals and their flags
    - simulate_t_cutoff(n, d, k, n_sim, seed): 99th percentile of the total deviation on clean data

Example:
    report = distances(model, data, seed=1)
    report.outlier_frame().to_csv("outlier_map.csv", index=False)
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy import linalg, stats

from src.datamodel import DataMatrix, standardize
from src.estimators import cellpca
from src.estimators.cellcov import CellCovOptions, cellcov
from src.estimators.mkernel import mscale
from src.exceptions import SingularCovarianceError
from src.regression import impute_predictors
from src.utils import derive_rng, parallel_map

logger = logging.getLogger(__name__)

QUANTILE = 0.99
CELL_CUTOFF = float(np.sqrt(stats.chi2.ppf(QUANTILE, 1)))
SHADE_WIDTH = 0.5
MIN_SIMULATIONS = 100

CASE_CLASSES = ("regular", "good_leverage", "vertical_outlier", "bad_leverage")
FLAG_LABELS = {-1: "low", 0: "regular", 1: "high"}


def chi_cutoff(dim):
    return float(np.sqrt(stats.chi2.ppf(QUANTILE, dim)))


class CellMap(NamedTuple):
    stdres: np.ndarray
    flags: np.ndarray
    names: tuple


@dataclass(frozen=True)
class DiagnosticsReport:
    rd: np.ndarray
    pd: np.ndarray
    cutoff_rd: float
    cutoff_pd: float
    cutoff_t: float
    case_class: np.ndarray
    point_size: np.ndarray
    case_shade: np.ndarray
    total_dev: np.ndarray
    damped: bool = False
    cellmap_X: CellMap = None
    cellmap_Y: CellMap = None

    def outlier_frame(self, ids=None):
        ids = np.arange(self.rd.size) if ids is None else ids
        return pd.DataFrame({
            "id": ids,
            "rd": self.rd,
            "pd": self.pd,
            "size": self.point_size,
            "shade": self.case_shade,
            "class": self.case_class,
        })


def classify(rd, pd_, cutoff_rd, cutoff_pd):
    """Quadrant rule: distances on the cutoff count as inside."""
    high_rd = np.asarray(rd) > cutoff_rd
    high_pd = np.asarray(pd_) > cutoff_pd
    labels = np.array(CASE_CLASSES, dtype=object)
    return labels[2 * high_rd.astype(int) + high_pd.astype(int)]


def cell_flags(stdres):
    """-1/0/+1 by the closed threshold |r| <= c_cell; missing cells keep 0 and a NaN residual."""
    stdres = np.asarray(stdres, dtype=float)
    flags = np.zeros(stdres.shape, dtype=int)
    observed = ~np.isnan(stdres)
    outlying = observed & (np.abs(np.where(observed, stdres, 0.0)) > CELL_CUTOFF)
    flags[outlying] = np.sign(stdres[outlying]).astype(int)
    return flags


def flag_labels(cellmap):
    labels = np.vectorize(FLAG_LABELS.get, otypes=[object])(cellmap.flags)
    labels[np.isnan(cellmap.stdres)] = "missing"
    return labels


def cellmap_frame(cellmap, ids=None):
    n, m = cellmap.stdres.shape
    ids = np.arange(n) if ids is None else np.asarray(ids)
    return pd.DataFrame({
        "id": np.repeat(ids, m),
        "variable": np.tile(np.asarray(cellmap.names, dtype=object), n),
        "stdres": cellmap.stdres.ravel(),
        "flag": flag_labels(cellmap).ravel(),
    })


def _factor(matrix, what):
    """Cholesky factor, ridge-damped by 1e-8 tr/dim when needed. Returns (factor, damped)."""
    matrix = 0.5 * (matrix + matrix.T)
    try:
        return linalg.cho_factor(matrix, lower=True), False
    except linalg.LinAlgError:
        pass
    ridge = 1e-8 * max(np.trace(matrix) / matrix.shape[0], 1e-12)
    logger.warning("%s is not positive definite; damping the diagonal by %.3g", what, ridge)
    try:
        return linalg.cho_factor(matrix + ridge * np.eye(matrix.shape[0]), lower=True), True
    except linalg.LinAlgError as err:
        raise SingularCovarianceError(f"{what} stays singular after ridge damping") from err


def _mahalanobis(deviations, matrix, what):
    factor, damped = _factor(matrix, what)
    solved = linalg.cho_solve(factor, deviations.T).T
    return np.sqrt(np.maximum(np.sum(deviations * solved, axis=1), 0.0)), damped


def _impute_block(fit, data, options):
    """Imputed predictors for every row; rows with no observed predictor take the robust center."""
    x = data.values[:, :fit.p]
    x_mask = data.mask[:, :fit.p]
    x_imp = np.tile(fit.cov.mu[:fit.p], (data.n, 1))
    rows = x_mask.any(axis=1)
    if rows.any():
        x_imp[rows] = impute_predictors(fit, x[rows], x_mask[rows], options.pca)
    return x_imp


def _residual_distances(fit, data, y_hat):
    """RD over the observed response coordinates of each row."""
    y = data.values[:, fit.p:]
    y_mask = data.mask[:, fit.p:]
    rd = np.zeros(data.n)
    damped = False
    for pattern in np.unique(y_mask, axis=0):
        if not pattern.any():
            continue
        rows = np.flatnonzero(np.all(y_mask == pattern, axis=1))
        block = fit.sigma_eps[np.ix_(pattern, pattern)]
        rd[rows], flag = _mahalanobis((y[rows] - y_hat[rows])[:, pattern], block, "Sigma_eps")
        damped = damped or flag
    return rd, damped


def simulate_t_cutoff(n, d, k, n_sim=200, seed=0, options=None, threads=1, progress=False):
    """
    Monte-Carlo 99th percentile of the cellPCA total deviation t_i under clean N(0, I) data.

    Pools t_i over ceil(n_sim / n) simulated n x d datasets fitted with rank k.
    """
    if n_sim < MIN_SIMULATIONS:
        raise ValueError(f"n_sim must be at least {MIN_SIMULATIONS}, got {n_sim}")
    options = options or cellpca.CellPcaOptions()
    names = tuple(f"V{j + 1}" for j in range(d))

    def one(r):
        values = derive_rng(seed, "t-cutoff", r).standard_normal((n, d))
        z, _ = standardize(DataMatrix(values, np.ones((n, d), dtype=bool), names))
        return cellpca.fit(z, k, options).total_dev

    pooled = np.concatenate(parallel_map(one, range(int(np.ceil(n_sim / n))), threads=threads,
                                         desc="t cutoff", progress=progress))
    return float(np.quantile(pooled, QUANTILE))


def distances(fit, data, cutoff_t=None, n_sim=200, seed=0, options=None, threads=1):
    """
    Outlier-map distances and case classes.

    Args:
        fit (RegressionFit): Fitted model with a predictor model.
        data (DataMatrix): Rows to diagnose, predictors first.
        cutoff_t (float): Cutoff of the total deviation; simulated when None.
        n_sim (int): Simulated deviations for the cutoff.
        seed (int): Seed of the cutoff simulation.
        options (CellCovOptions): Settings of the predictor-block cellCov.

    Returns:
        DiagnosticsReport
    """
    options = options or CellCovOptions()
    p = fit.p
    x_imp = _impute_block(fit, data, options)
    y_hat = fit.b + x_imp @ fit.B
    rd, damped_rd = _residual_distances(fit, data, y_hat)

    x_cov = cellcov(data.select_columns(range(p)), min(fit.k, p - 1), options)
    x_filled = np.where(data.mask[:, :p], data.values[:, :p], x_imp)
    pd_, damped_pd = _mahalanobis(x_filled - x_cov.mu, x_cov.sigma, "Sigma_x")

    joint = fit.cov.pca_fit
    z = fit.cov.standardizer.apply(data)
    scored = cellpca.score_rows(joint, z.values, z.mask, options.pca)
    point_size = 1.0 - np.sum(scored.cell_weights * z.mask, axis=1) / data.d
    if cutoff_t is None:
        cutoff_t = simulate_t_cutoff(data.n, data.d, joint.k, n_sim, seed, options.pca, threads)
    shade = np.clip((scored.total_dev - cutoff_t) / (SHADE_WIDTH * cutoff_t), 0.0, 1.0)

    cutoff_rd, cutoff_pd = chi_cutoff(fit.q), chi_cutoff(p)
    classes = classify(rd, pd_, cutoff_rd, cutoff_pd)
    logger.info("Outlier map: %s", {c: int(np.count_nonzero(classes == c)) for c in CASE_CLASSES})
    return DiagnosticsReport(
        rd=rd,
        pd=pd_,
        cutoff_rd=cutoff_rd,
        cutoff_pd=cutoff_pd,
        cutoff_t=float(cutoff_t),
        case_class=classes,
        point_size=point_size,
        case_shade=shade,
        total_dev=scored.total_dev,
        damped=damped_rd or damped_pd,
    )


def predictor_residual_scales(fit):
    """M-scale of each predictor's training residuals, in original units."""
    model = fit.predictor_model
    scales = fit.predictor_standardizer.scales
    out = np.empty(fit.p)
    for j in range(fit.p):
        column = model.residuals[model.mask[:, j], j] * scales[j]
        out[j] = mscale(column).scale if column.size else np.nan
    return out


def cellmaps(fit, data, rows=None, options=None):
    """
    Standardized cell residuals of the predictors (against their cellPCA fit) and
    of the responses (against the regression prediction), with trit flags.

    Args:
        fit (RegressionFit): Fitted model with a predictor model.
        data (DataMatrix): Data, predictors first.
        rows (array-like): Row indices to map; all rows when None.

    Returns:
        tuple: (CellMap for X, CellMap for Y)
    """
    options = options or CellCovOptions()
    rows = np.arange(data.n) if rows is None else np.asarray(rows, dtype=int)
    data = data.subset_rows(rows)
    p = fit.p
    x, x_mask = data.values[:, :p], data.mask[:, :p]
    y, y_mask = data.values[:, p:], data.mask[:, p:]
    standardizer = fit.predictor_standardizer

    x_hat = np.tile(fit.cov.mu[:p], (data.n, 1))
    observed_rows = x_mask.any(axis=1)
    if observed_rows.any():
        scored = cellpca.score_rows(fit.predictor_model, x[observed_rows] / standardizer.scales,
                                    x_mask[observed_rows], options.pca)
        x_hat[observed_rows] = scored.fitted * standardizer.scales
    stdres_x = np.where(x_mask, (x - x_hat) / predictor_residual_scales(fit), np.nan)

    y_hat = fit.b + _impute_block(fit, data, options) @ fit.B
    d_eps = np.sqrt(np.clip(np.diag(fit.sigma_eps), np.finfo(float).tiny, None))
    stdres_y = np.where(y_mask, (y - y_hat) / d_eps, np.nan)

    names = data.column_names
    return (CellMap(stdres_x, cell_flags(stdres_x), names[:p]),
            CellMap(stdres_y, cell_flags(stdres_y), names[p:]))


def diagnose(fit, data, cutoff_t=None, n_sim=200, seed=0, options=None, threads=1):
    """distances plus cellmaps over every row."""
    report = distances(fit, data, cutoff_t, n_sim, seed, options, threads)
    maps = cellmaps(fit, data, options=options)
    return DiagnosticsReport(**{**report.__dict__, "cellmap_X": maps[0], "cellmap_Y": maps[1]})
