"""
Module: mcd.py

Deterministic Minimum Covariance Determinant estimator for the low-dimensional
score vectors of a cellPCA fit.

Main class / functions:
    - McdEstimate
    - mcd_fit(points, alpha): best h-subset over deterministic starts
    - c_step(points, subset): one concentration step

Usage:
    Starts are built from six robust initial scatters (tanh correlation,
    Spearman, normal scores, spatial signs, half-sample closest to the median,
    identity), plus nearest-neighbour subsets when n is small. Every start is
    concentrated with C-steps until the subset stops changing. No random
    subsampling is used, so repeated calls return the same subset.

Example:
    est = mcd_fit(scores, alpha=0.75)
    print(est.mu, est.sigma, est.subset)
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from src.exceptions import SingularSubsetError, TooFewPointsError

logger = logging.getLogger(__name__)

NEIGHBOUR_STARTS_MAX_N = 50
MAX_CSTEPS = 200
# eigenvalue ratio below which a subset covariance counts as singular
SINGULAR_RATIO = 1e-12


@dataclass(frozen=True)
class McdEstimate:
    mu: np.ndarray
    sigma: np.ndarray
    subset: np.ndarray
    alpha: float
    c_alpha: float
    log_determinant: float
    singular: bool = False

    def to_dict(self):
        return {
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "subset": self.subset.tolist(),
            "alpha": self.alpha,
            "c_alpha": self.c_alpha,
            "log_determinant": self.log_determinant,
            "singular": self.singular,
        }

    @classmethod
    def from_dict(cls, payload):
        mu = np.asarray(payload["mu"], dtype=float)
        return cls(
            mu=mu,
            sigma=np.asarray(payload["sigma"], dtype=float).reshape(mu.size, mu.size),
            subset=np.asarray(payload["subset"], dtype=int),
            alpha=float(payload["alpha"]),
            c_alpha=float(payload["c_alpha"]),
            log_determinant=float(payload["log_determinant"]),
            singular=bool(payload["singular"]),
        )


def subset_size(n, alpha):
    return int(np.ceil(alpha * n - 1e-9))


def consistency_factor(alpha, k):
    """alpha / F_{chi2, k+2}(chi2_{k, alpha}); equals 1 at alpha = 1."""
    if alpha >= 1:
        return 1.0
    quantile = stats.chi2.ppf(alpha, k)
    return float(alpha / stats.chi2.cdf(quantile, k + 2))


def _moments(points, subset):
    selected = points[subset]
    mu = selected.mean(axis=0)
    centered = selected - mu
    return mu, centered.T @ centered / selected.shape[0]


def _is_singular(cov):
    eig = np.linalg.eigvalsh(cov)
    return not np.all(np.isfinite(eig)) or eig[-1] <= 0 or eig[0] <= SINGULAR_RATIO * eig[-1]


def _sq_distances(points, mu, cov):
    factor = linalg.cho_factor(cov, lower=True)
    centered = points - mu
    return np.einsum("ij,ij->i", centered, linalg.cho_solve(factor, centered.T).T)


def c_step(points, subset, h=None):
    """
    Concentration step: keep the h points closest to the subset's own mean/covariance.

    Args:
        points (np.ndarray): n x k points.
        subset (array-like): Current row indices.
        h (int): Size of the returned subset, defaults to len(subset).

    Returns:
        np.ndarray: Sorted row indices of the new subset.
    """
    points = np.asarray(points, dtype=float)
    subset = np.sort(np.asarray(subset, dtype=int))
    h = len(subset) if h is None else int(h)
    mu, cov = _moments(points, subset)
    if _is_singular(cov):
        raise SingularSubsetError(f"Subset of {len(subset)} points has a singular covariance")
    d2 = _sq_distances(points, mu, cov)
    return np.sort(np.argsort(d2, kind="stable")[:h])


def _log_det(points, subset):
    _, cov = _moments(points, subset)
    sign, logdet = np.linalg.slogdet(cov)
    return logdet if sign > 0 else -np.inf


def _robust_standardize(points):
    center = np.median(points, axis=0)
    spread = stats.median_abs_deviation(points, axis=0, scale="normal")
    fallback = points.std(axis=0)
    spread = np.where(spread > 0, spread, np.where(fallback > 0, fallback, 1.0))
    return (points - center) / spread


def _initial_scatters(X):
    n, k = X.shape
    ranks = stats.rankdata(X, axis=0)
    norms = np.linalg.norm(X, axis=1)
    signs = np.divide(X, norms[:, None], out=np.zeros_like(X), where=norms[:, None] > 0)
    closest = np.argsort(norms, kind="stable")[: int(np.ceil(n / 2))]
    closest_centered = X[closest] - X[closest].mean(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        candidates = [
            np.corrcoef(np.tanh(X), rowvar=False),
            np.corrcoef(ranks, rowvar=False),
            np.corrcoef(stats.norm.ppf((ranks - 1.0 / 3.0) / (n + 1.0 / 3.0)), rowvar=False),
            signs.T @ signs / n,
            closest_centered.T @ closest_centered / closest.size,
            np.eye(k),
        ]
    for scatter in candidates:
        scatter = np.atleast_2d(scatter)
        if np.all(np.isfinite(scatter)):
            yield scatter


def _start_from_scatter(X, scatter, h0):
    """Robust eigen-coordinates of the scatter give an initial half-subset."""
    _, vectors = np.linalg.eigh(scatter)
    projected = X @ vectors
    spread = stats.median_abs_deviation(projected, axis=0, scale="normal")
    spread = np.where(spread > 0, spread, 1.0)
    center = np.median(projected / spread, axis=0)
    d2 = np.sum((projected / spread - center) ** 2, axis=1)
    return np.sort(np.argsort(d2, kind="stable")[:h0])


def _starts(X, h):
    n = X.shape[0]
    h0 = int(np.ceil(n / 2))
    for scatter in _initial_scatters(X):
        yield _start_from_scatter(X, scatter, h0)
    if n <= NEIGHBOUR_STARTS_MAX_N:
        for i in range(n):
            distance = np.linalg.norm(X - X[i], axis=1)
            yield np.sort(np.argsort(distance, kind="stable")[:h])


def _concentrate(points, subset, h):
    subset = c_step(points, subset, h)
    for _ in range(MAX_CSTEPS):
        updated = c_step(points, subset, h)
        if np.array_equal(updated, subset):
            break
        subset = updated
    return subset


def mcd_fit(points, alpha=0.75):
    """
    Raw MCD location and consistency-corrected scatter.

    Args:
        points (np.ndarray): n x k finite points.
        alpha (float): Coverage fraction in (0.5, 1].

    Returns:
        McdEstimate
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    n, k = points.shape
    if not 0.5 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0.5, 1], got {alpha}")
    if not np.all(np.isfinite(points)):
        raise ValueError("MCD points must be finite")
    if n * alpha <= k + 1:
        raise TooFewPointsError(f"n*alpha = {n * alpha:g} must exceed k + 1 = {k + 1}")
    h = subset_size(n, alpha)
    c_alpha = consistency_factor(alpha, k)

    if h >= n:
        best_subset = np.arange(n)
        best_logdet = _log_det(points, best_subset)
    else:
        standardized = _robust_standardize(points)
        best_subset, best_logdet = None, np.inf
        for start in _starts(standardized, h):
            try:
                subset = _concentrate(points, start, h)
            except SingularSubsetError:
                continue
            logdet = _log_det(points, subset)
            if logdet < best_logdet:
                best_subset, best_logdet = subset, logdet
        if best_subset is None:
            # every start hit an exact fit; keep the h points nearest the coordinatewise median
            norms = np.linalg.norm(standardized, axis=1)
            best_subset = np.sort(np.argsort(norms, kind="stable")[:h])
            best_logdet = _log_det(points, best_subset)

    mu, cov = _moments(points, best_subset)
    singular = bool(_is_singular(cov))
    if singular:
        ridge = 1e-8 * max(np.trace(cov) / k, 1e-12)
        logger.warning("MCD subset covariance is singular; adding ridge %.3g", ridge)
        cov = cov + ridge * np.eye(k)
    return McdEstimate(
        mu=mu,
        sigma=c_alpha * cov,
        subset=best_subset,
        alpha=float(alpha),
        c_alpha=c_alpha,
        log_determinant=float(best_logdet),
        singular=singular,
    )
