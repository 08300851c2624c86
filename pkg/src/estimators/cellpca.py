"""
Module: cellpca.py

Cellwise and casewise robust PCA with missing cells. The fit minimizes a
doubly robustified reconstruction loss by iteratively reweighted alternating
least squares, and fitted models can score and impute new rows.

Main class / functions:
    - CellPcaFit: center, loadings, scores, scales, residuals and weights
    - fit(data, k, options): run the solver on standardized data
    - loss(candidate, data, options): value of the robust objective
    - total_deviation(fit, row): casewise total deviation of one row
    - score_rows / impute_rows / impute_point: use a fitted model on new rows

Usage:
    Feed standardized data (see datamodel.standardize). Missing cells never
    enter a solve; their residuals are stored as NaN and their weights as 0.

Example:
    z, standardizer = standardize(data)
    pca = fit(z, k=2)
    x_imp = impute_point(pca, z.values[0], z.mask[0])
"""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from src.estimators.mkernel import TanhRho, mscale, mscale_columns
from src.exceptions import AllMissingPointError, DimensionMismatchError, RankTooLargeError, ScaleZeroError

logger = logging.getLogger(__name__)

# numerical zero for scales of standardized data
ABSOLUTE_SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class CellPcaOptions:
    """
    Solver settings.

    Args:
        rho_cell: Kernel damping single cells (needs rho/weight).
        rho_case: Kernel damping whole rows.
        tol (float): Relative loss change that stops the outer iteration.
        max_iter (int): Maximum number of outer iterations.
        scale_floor_ratio (float): Scales are floored at this fraction of the median cell scale.
        score_ridge (float): Ridge added to score systems with fewer than k usable cells.
        winsor_limit (float): Initialization clips cells at median +- this many robust SDs.
        point_max_iter (int): IRLS iterations when scoring new rows.
        point_tol (float): Score change that stops the new-row IRLS.
    """
    rho_cell: object = field(default_factory=TanhRho)
    rho_case: object = field(default_factory=TanhRho)
    tol: float = 1e-8
    max_iter: int = 100
    scale_floor_ratio: float = 1e-3
    score_ridge: float = 1e-8
    winsor_limit: float = 3.0
    point_max_iter: int = 100
    point_tol: float = 1e-12


class Candidate(NamedTuple):
    """Parameters the loss can be evaluated at."""
    mu_z: np.ndarray
    V: np.ndarray
    U: np.ndarray
    sigma1: np.ndarray
    sigma2: float


@dataclass(frozen=True)
class CellPcaFit:
    mu_z: np.ndarray
    V: np.ndarray
    U: np.ndarray
    k: int
    sigma1: np.ndarray
    sigma2: float
    residuals: np.ndarray
    total_dev: np.ndarray
    cell_weights: np.ndarray
    case_weights: np.ndarray
    converged: bool
    loss_trace: tuple
    mask: np.ndarray
    iterations: int = 0

    @property
    def d(self):
        return self.mu_z.size

    def fitted_values(self):
        return self.mu_z + self.U @ self.V.T

    def to_dict(self):
        return {
            "k": int(self.k),
            "mu_z": self.mu_z.tolist(),
            "V": self.V.tolist(),
            "U": self.U.tolist(),
            "sigma1": self.sigma1.tolist(),
            "sigma2": float(self.sigma2),
            "residuals": np.where(self.mask, self.residuals, 0.0).tolist(),
            "total_dev": self.total_dev.tolist(),
            "cell_weights": self.cell_weights.tolist(),
            "case_weights": self.case_weights.tolist(),
            "converged": bool(self.converged),
            "loss_trace": [float(v) for v in self.loss_trace],
            "mask": self.mask.astype(int).tolist(),
            "iterations": int(self.iterations),
        }

    @classmethod
    def from_dict(cls, payload):
        k = int(payload["k"])
        mu_z = np.asarray(payload["mu_z"], dtype=float)
        mask = np.asarray(payload["mask"], dtype=bool).reshape(-1, mu_z.size)
        residuals = np.asarray(payload["residuals"], dtype=float).reshape(mask.shape)
        return cls(
            mu_z=mu_z,
            V=np.asarray(payload["V"], dtype=float).reshape(mu_z.size, k),
            U=np.asarray(payload["U"], dtype=float).reshape(mask.shape[0], k),
            k=k,
            sigma1=np.asarray(payload["sigma1"], dtype=float),
            sigma2=float(payload["sigma2"]),
            residuals=np.where(mask, residuals, np.nan),
            total_dev=np.asarray(payload["total_dev"], dtype=float),
            cell_weights=np.asarray(payload["cell_weights"], dtype=float).reshape(mask.shape),
            case_weights=np.asarray(payload["case_weights"], dtype=float),
            converged=bool(payload["converged"]),
            loss_trace=tuple(payload["loss_trace"]),
            mask=mask,
            iterations=int(payload.get("iterations", 0)),
        )


class ScoredRows(NamedTuple):
    scores: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    cell_weights: np.ndarray
    case_weights: np.ndarray
    total_dev: np.ndarray


def _total_dev(R, M, sigma1, rho_cell):
    counts = M.sum(axis=1)
    contrib = M * sigma1 ** 2 * rho_cell.rho(R / sigma1)
    return np.sqrt(contrib.sum(axis=1) / counts)


def _refresh_scales(R, M, options):
    raw = mscale_columns(R, M)
    floor = max(options.scale_floor_ratio * float(np.median(raw)), ABSOLUTE_SCALE_FLOOR)
    sigma1 = np.maximum(raw, floor)
    t = _total_dev(R, M, sigma1, options.rho_cell)
    sigma2 = max(mscale(t).scale, floor)
    return sigma1, sigma2, t


def _loss_value(t, M, sigma2, rho_case):
    counts = M.sum(axis=1)
    return float(sigma2 ** 2 / M.sum() * np.sum(counts * rho_case.rho(t / sigma2)))


def loss(candidate, data, options=None):
    """
    Robust PCA objective at the given parameters.

    Args:
        candidate: Anything with mu_z, V, U, sigma1, sigma2 (a Candidate or a CellPcaFit).
        data (DataMatrix): The (standardized) data the candidate refers to.
        options (CellPcaOptions): Kernels to use.

    Returns:
        float: Nonnegative loss value.
    """
    options = options or CellPcaOptions()
    sigma1 = np.asarray(candidate.sigma1, dtype=float)
    if np.any(sigma1 <= 0) or candidate.sigma2 <= 0:
        raise ScaleZeroError("loss needs strictly positive scales")
    M = data.mask.astype(float)
    R = (data.observed_values() - candidate.mu_z - np.asarray(candidate.U) @ np.asarray(candidate.V).T) * M
    t = _total_dev(R, M, sigma1, options.rho_cell)
    return _loss_value(t, M, candidate.sigma2, options.rho_case)


def _solve_scores(Zc, W, V, ridge):
    n, k = Zc.shape[0], V.shape[1]
    if k == 0:
        return np.zeros((n, 0))
    A = np.einsum("ij,jk,jl->ikl", W, V, V)
    rhs = np.einsum("ij,jk->ik", W * Zc, V)
    sparse_rows = np.count_nonzero(W > 0, axis=1) < k
    A[sparse_rows] += ridge * np.eye(k)
    try:
        return np.linalg.solve(A, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return np.linalg.solve(A + ridge * np.eye(k), rhs[..., None])[..., 0]


def _solve_loadings(Z, W, U):
    """Weighted least squares of every column on [1, U]: returns (mu_z, V)."""
    n, d = Z.shape
    design = np.hstack([np.ones((n, 1)), U])
    G = np.einsum("ij,ia,ib->jab", W, design, design)
    rhs = np.einsum("ij,ia->ja", W * Z, design)
    try:
        coef = np.linalg.solve(G, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        coef = np.vstack([np.linalg.lstsq(G[j], rhs[j], rcond=None)[0] for j in range(d)])
    return coef[:, 0], coef[:, 1:]


def _initialize(Z, M, k, options):
    """Median fill, winsorize, then rank-k SVD of the centered matrix."""
    filled = Z.copy()
    for j in range(Z.shape[1]):
        observed = Z[M[:, j] > 0, j]
        center = np.median(observed)
        spread = mscale(observed - center).scale
        filled[M[:, j] == 0, j] = center
        if spread > 0:
            limit = options.winsor_limit * spread
            filled[:, j] = np.clip(filled[:, j], center - limit, center + limit)
    mu = filled.mean(axis=0)
    centered = filled - mu
    if k == 0:
        return mu, np.zeros((Z.shape[1], 0)), np.zeros((Z.shape[0], 0))
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    V = vt[:k].T
    return mu, V, centered @ V


def _canonicalize(U, V):
    """Orthonormal loadings with a fixed sign convention; U V^T is unchanged."""
    k = V.shape[1]
    if k == 0:
        return U, V
    left, s, vt = np.linalg.svd(U @ V.T, full_matrices=False)
    V = vt[:k].T
    U = left[:, :k] * s[:k]
    pivots = np.abs(V).argmax(axis=0)
    signs = np.sign(V[pivots, np.arange(k)])
    signs[signs == 0] = 1.0
    return U * signs, V * signs


def fit(data, k, options=None):
    """
    Fit cellwise robust PCA of rank k.

    Args:
        data (DataMatrix): Standardized data.
        k (int): Rank, 0 <= k < min(n, d). k = 0 fits the center only.
        options (CellPcaOptions): Solver settings.

    Returns:
        CellPcaFit: The converged fit, or the lowest-loss iterate with
        converged=False when max_iter is reached.
    """
    options = options or CellPcaOptions()
    n, d = data.n, data.d
    if k < 0 or (k > 0 and k >= min(n, d)):
        raise RankTooLargeError(f"Rank k={k} must satisfy 0 <= k < min(n, d) = {min(n, d)}")
    Z = data.observed_values()
    M = data.mask.astype(float)

    mu, V, U = _initialize(Z, M, k, options)
    R = (Z - mu - U @ V.T) * M
    sigma1, sigma2, t = _refresh_scales(R, M, options)
    previous = _loss_value(t, M, sigma2, options.rho_case)
    trace = [previous]
    best = (previous, mu, V, U, sigma1, sigma2)
    converged = False
    iterations = 0

    for iterations in range(1, options.max_iter + 1):
        w_cell = options.rho_cell.weight(R / sigma1) * M
        w_case = options.rho_case.weight(t / sigma2)
        # the case weight is constant within a row and cancels in its score solve
        U = _solve_scores(Z - mu, w_cell, V, options.score_ridge)
        mu, V = _solve_loadings(Z, w_cell * w_case[:, None], U)
        R = (Z - mu - U @ V.T) * M
        sigma1, sigma2, t = _refresh_scales(R, M, options)
        value = _loss_value(t, M, sigma2, options.rho_case)
        trace.append(value)
        logger.debug("cellPCA iteration %d: loss %.10g", iterations, value)
        if value < best[0]:
            best = (value, mu, V, U, sigma1, sigma2)
        if abs(previous - value) <= options.tol * max(abs(previous), np.finfo(float).tiny):
            converged = True
            break
        previous = value

    if not converged:
        logger.warning("cellPCA did not converge in %d iterations; returning the lowest-loss iterate",
                       options.max_iter)
        _, mu, V, U, sigma1, sigma2 = best

    U, V = _canonicalize(U, V)
    R = (Z - mu - U @ V.T) * M
    t = _total_dev(R, M, sigma1, options.rho_cell)
    return CellPcaFit(
        mu_z=mu,
        V=V,
        U=U,
        k=int(k),
        sigma1=sigma1,
        sigma2=float(sigma2),
        residuals=np.where(M > 0, R, np.nan),
        total_dev=t,
        cell_weights=options.rho_cell.weight(R / sigma1) * M,
        case_weights=options.rho_case.weight(t / sigma2),
        converged=converged,
        loss_trace=tuple(trace),
        mask=data.mask.copy(),
        iterations=iterations,
    )


def total_deviation(fit, row, options=None):
    """
    Casewise total deviation of one row.

    Args:
        fit (CellPcaFit): Supplies the cell scales.
        row: Row index into the fit, or a residual vector with NaN at missing cells.
    """
    options = options or CellPcaOptions()
    if isinstance(row, (int, np.integer)):
        residuals = fit.residuals[row]
    else:
        residuals = np.asarray(row, dtype=float)
    observed = np.isfinite(residuals)
    R = np.where(observed, residuals, 0.0)[None, :]
    return float(_total_dev(R, observed[None, :].astype(float), fit.sigma1, options.rho_cell)[0])


def score_rows(fit, values, mask=None, options=None):
    """
    Score rows against a fitted model with the model's center, loadings and scales held fixed.

    Args:
        fit (CellPcaFit): Fitted model, same column space as `values`.
        values (np.ndarray): m x d rows (standardized like the training data).
        mask (np.ndarray): Observed-cell mask; defaults to the finite cells.

    Returns:
        ScoredRows
    """
    options = options or CellPcaOptions()
    values = np.atleast_2d(np.asarray(values, dtype=float))
    mask = np.isfinite(values) if mask is None else np.atleast_2d(np.asarray(mask, dtype=bool)) & np.isfinite(values)
    if values.shape[1] != fit.d:
        raise DimensionMismatchError(f"Rows have {values.shape[1]} columns, model has {fit.d}")
    if not np.all(mask.any(axis=1)):
        raise AllMissingPointError("Cannot score a row without observed cells")
    Z = np.where(mask, values, 0.0)
    M = mask.astype(float)
    W = M
    U = _solve_scores(Z - fit.mu_z, W, fit.V, options.score_ridge)
    for _ in range(options.point_max_iter if fit.k else 0):
        R = (Z - fit.mu_z - U @ fit.V.T) * M
        W = options.rho_cell.weight(R / fit.sigma1) * M
        updated = _solve_scores(Z - fit.mu_z, W, fit.V, options.score_ridge)
        change = np.max(np.abs(updated - U))
        U = updated
        if change <= options.point_tol * (1.0 + np.max(np.abs(U))):
            break
    fitted = fit.mu_z + U @ fit.V.T
    R = (Z - fitted) * M
    w_cell = options.rho_cell.weight(R / fit.sigma1) * M
    t = _total_dev(R, M, fit.sigma1, options.rho_cell)
    return ScoredRows(
        scores=U,
        fitted=fitted,
        residuals=np.where(mask, R, np.nan),
        cell_weights=w_cell,
        case_weights=options.rho_case.weight(t / fit.sigma2),
        total_dev=t,
    )


def impute_rows(fit, values, mask=None, options=None):
    """Keep observed cells in proportion to their cell weight, fill the rest from the fit."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    scored = score_rows(fit, values, mask, options)
    observed = ~np.isnan(scored.residuals)
    Z = np.where(observed, values, 0.0)
    keep = scored.cell_weights * observed
    return scored.fitted + keep * (Z - scored.fitted)


def impute_point(model, x_star, mask=None, options=None):
    x_star = np.asarray(x_star, dtype=float).ravel()
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).ravel()
    return impute_rows(model, x_star[None, :], None if mask is None else mask[None, :], options)[0]
