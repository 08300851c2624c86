"""
Module: fastcellcov.py

One-step approximation to cellCov for bootstrap and simulated samples. Training
caches everything that is expensive or unstable to recompute (standardization,
subspace, robust correlations and slopes between columns, residual scales and
the MCD of the scores) from the cellCov fit of the original sample; evaluation
then filters, predicts, imputes and projects a new sample in one pass and
returns weighted mean/covariance estimates.

Main classes / functions:
    - FastCellCovModel: the trained model (the tuning vector of the auxiliary estimator)
    - FastCovEstimate, FastCovWeights
    - train(data, cov): build the model from a cellCov estimate
    - evaluate(model, sample): fast robust location/scatter of a sample
    - shrink_slope(observed, predicted): robust no-intercept slope
    - weighted_moments: the final weighted mean/covariance assembly

Usage:
    The model is immutable; evaluate is a pure function of (model, sample) and
    may be called from many threads at once.

Example:
    model = train(data, cellcov(data, k=2))
    est = evaluate(model, data.subset_rows(rng.integers(data.n, size=data.n)))
"""

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import linalg, stats

from src.datamodel import Standardizer, destandardize_cov
from src.estimators.mkernel import TanhRho, mscale
from src.exceptions import DimensionMismatchError

logger = logging.getLogger(__name__)

CORRELATION_THRESHOLD = 0.5
DELTA_FLOOR = 0.01
SCALE_FLOOR = 1e-8


class ShrinkResult(NamedTuple):
    slope: float
    fallback: bool


@dataclass(frozen=True)
class FastCellCovModel:
    standardizer: Standardizer
    mu_z: np.ndarray
    V: np.ndarray
    S_hat: np.ndarray
    slopes: np.ndarray
    corrs: np.ndarray
    neighbor_sets: tuple
    shrink: np.ndarray
    resid_scales: np.ndarray
    sigma1_star: np.ndarray
    sigma2_star: float
    mcd_mu: np.ndarray
    mcd_sigma: np.ndarray
    delta_floor: float = DELTA_FLOOR
    rho: TanhRho = field(default_factory=TanhRho)
    # per-column factors matching the training scatter diagonal to cellCov
    consistency: np.ndarray = None

    @property
    def d(self):
        return self.mu_z.size

    @property
    def k(self):
        return self.V.shape[1]

    @property
    def V_proj(self):
        return self.V @ self.V.T

    def subspace_rho(self):
        """Tanh psi stretched to the chi2_k 0.99 and 0.999 quantiles of squared distances."""
        return TanhRho.rescaled(stats.chi2.ppf(0.99, self.k), stats.chi2.ppf(0.999, self.k), self.rho)

    def consistency_factors(self):
        return np.ones(self.d) if self.consistency is None else self.consistency

    def to_dict(self):
        return {
            "standardizer": self.standardizer.to_dict(),
            "mu_z": self.mu_z.tolist(),
            "V": self.V.tolist(),
            "S_hat": self.S_hat.tolist(),
            "slopes": self.slopes.tolist(),
            "corrs": self.corrs.tolist(),
            "neighbor_sets": [list(s) for s in self.neighbor_sets],
            "shrink": self.shrink.tolist(),
            "resid_scales": self.resid_scales.tolist(),
            "sigma1_star": self.sigma1_star.tolist(),
            "sigma2_star": self.sigma2_star,
            "mcd_mu": self.mcd_mu.tolist(),
            "mcd_sigma": self.mcd_sigma.tolist(),
            "delta_floor": self.delta_floor,
            "consistency": self.consistency_factors().tolist(),
        }

    @classmethod
    def from_dict(cls, payload):
        mu_z = np.asarray(payload["mu_z"], dtype=float)
        d = mu_z.size
        mcd_mu = np.asarray(payload["mcd_mu"], dtype=float)
        k = mcd_mu.size
        return cls(
            standardizer=Standardizer.from_dict(payload["standardizer"]),
            mu_z=mu_z,
            V=np.asarray(payload["V"], dtype=float).reshape(d, k),
            S_hat=np.asarray(payload["S_hat"], dtype=float),
            slopes=np.asarray(payload["slopes"], dtype=float).reshape(d, d),
            corrs=np.asarray(payload["corrs"], dtype=float).reshape(d, d),
            neighbor_sets=tuple(tuple(int(h) for h in s) for s in payload["neighbor_sets"]),
            shrink=np.asarray(payload["shrink"], dtype=float),
            resid_scales=np.asarray(payload["resid_scales"], dtype=float),
            sigma1_star=np.asarray(payload["sigma1_star"], dtype=float),
            sigma2_star=float(payload["sigma2_star"]),
            mcd_mu=mcd_mu,
            mcd_sigma=np.asarray(payload["mcd_sigma"], dtype=float).reshape(k, k),
            delta_floor=float(payload["delta_floor"]),
            consistency=np.asarray(payload["consistency"], dtype=float),
        )


@dataclass(frozen=True)
class FastCovWeights:
    filter: np.ndarray
    resid: np.ndarray
    cell: np.ndarray
    case: np.ndarray
    sub: np.ndarray
    c_mu: np.ndarray
    c_sigma: np.ndarray


@dataclass(frozen=True)
class FastCovEstimate:
    mu_F: np.ndarray
    sigma_F: np.ndarray
    weights: FastCovWeights


class _Pass(NamedTuple):
    Z: np.ndarray
    M: np.ndarray
    z_s: np.ndarray
    w_filter: np.ndarray
    w_resid: np.ndarray
    z_hat: np.ndarray
    r_hat: np.ndarray


def shrink_slope(observed, predicted, rho=None):
    """
    Robust no-intercept slope of observed on predicted.

    The weighted ratio sum(w z z_hat) / sum(w z_hat**2) is taken with weights of
    the standardized residuals of a median-ratio pilot, then recomputed once with
    weights of its own residuals.

    Returns:
        ShrinkResult: (slope, fallback); fallback=True with slope 1 when fewer
        than two predictions are nonzero.
    """
    rho = rho or TanhRho()
    observed = np.asarray(observed, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    nonzero = predicted != 0
    if np.count_nonzero(nonzero) < 2:
        return ShrinkResult(1.0, True)
    z, z_hat = observed[nonzero], predicted[nonzero]
    slope = float(np.median(z / z_hat))
    for _ in range(2):
        residuals = z - slope * z_hat
        scale = mscale(residuals)
        if scale.degenerate:
            break
        w = rho.weight(residuals / scale.scale)
        denom = np.sum(w * z_hat ** 2)
        if denom <= 0:
            break
        slope = float(np.sum(w * z * z_hat) / denom)
    return ShrinkResult(slope, False)


def wrapped_correlation(z_s, mask, rho=None):
    """Pearson correlations of psi-wrapped standardized columns over pairwise observed cells."""
    rho = rho or TanhRho()
    wrapped = rho.psi(z_s)
    d = z_s.shape[1]
    corrs = np.eye(d)
    for j in range(d):
        for h in range(j + 1, d):
            both = mask[:, j] & mask[:, h]
            if np.count_nonzero(both) < 3:
                continue
            a, b = wrapped[both, j], wrapped[both, h]
            if a.std() == 0 or b.std() == 0:
                continue
            corrs[j, h] = corrs[h, j] = np.clip(np.corrcoef(a, b)[0, 1], -1.0, 1.0)
    return corrs


def _neighbour_predictions(z_s, w_filter, slopes, corrs, neighbor_sets):
    """|corr| * filter-weighted mean of slope-scaled neighbour cells; 0 without usable neighbours."""
    pred = np.zeros_like(z_s)
    for j, neighbours in enumerate(neighbor_sets):
        if not neighbours:
            continue
        H = list(neighbours)
        weights = np.abs(corrs[j, H]) * w_filter[:, H]
        num = (weights * slopes[j, H] * z_s[:, H]).sum(axis=1)
        den = weights.sum(axis=1)
        np.divide(num, den, out=pred[:, j], where=den > 0)
    return pred


def _impute_and_project(model, sample):
    z = model.standardizer.apply(sample)
    Z = z.observed_values()
    M = z.mask.astype(float)
    z_s = (Z - model.mu_z) / model.S_hat * M
    w_filter = model.rho.weight(z_s) * M
    pred = _neighbour_predictions(z_s, w_filter, model.slopes, model.corrs, model.neighbor_sets) * model.shrink
    w_resid = model.rho.weight((z_s - pred) / model.resid_scales) * M
    keep = w_filter * w_resid
    z_imp = keep * Z + (1.0 - keep) * (model.S_hat * pred + model.mu_z)
    z_hat = model.mu_z + (z_imp - model.mu_z) @ model.V_proj
    return _Pass(Z, M, z_s, w_filter, w_resid, z_hat, (Z - z_hat) * M)


def _imputed_deviation(r_hat, w_cell):
    """Cell-weighted mean squared residual per row; inf when no cell carries weight."""
    den = w_cell.sum(axis=1)
    out = np.full(r_hat.shape[0], np.inf)
    np.divide((w_cell * r_hat ** 2).sum(axis=1), den, out=out, where=den > 0)
    return out


def _floored_mscale(values, floor):
    values = values[np.isfinite(values)]
    return max(mscale(values).scale, floor) if values.size else floor


def _column_scales(values, mask):
    raw = np.array([mscale(values[mask[:, j], j]).scale if mask[:, j].any() else 0.0
                    for j in range(values.shape[1])])
    floor = max(1e-3 * float(np.median(raw)), SCALE_FLOOR)
    return np.maximum(raw, floor)


def train(data, cov, delta_floor=DELTA_FLOOR, correlation_threshold=CORRELATION_THRESHOLD, rho=None):
    """
    Cache the structure of a cellCov fit for fast re-estimation.

    Args:
        data (DataMatrix): The sample the cellCov estimate was computed on.
        cov (CovEstimate): Its cellCov estimate (with cellPCA fit and MCD).
        delta_floor (float): Denominators are floored at n * delta_floor.
        correlation_threshold (float): |corr| needed for a column to act as a neighbour.

    Returns:
        FastCellCovModel
    """
    rho = rho or TanhRho()
    pca = cov.pca_fit
    d, k = pca.d, pca.k
    if data.d != d:
        raise DimensionMismatchError(f"cellCov has dimension {d}, data has {data.d}")
    z = cov.standardizer.apply(data)
    Z = z.observed_values()
    mask = z.mask
    S_hat = np.maximum(np.sqrt(np.clip(np.diag(cov.sigma_std), 0.0, None)), SCALE_FLOOR)
    z_s = (Z - pca.mu_z) / S_hat * mask

    corrs = wrapped_correlation(z_s, mask, rho)
    slopes = corrs.copy()
    neighbor_sets = tuple(
        tuple(h for h in range(d) if h != j and abs(corrs[j, h]) >= correlation_threshold) for j in range(d)
    )

    w_filter = rho.weight(z_s) * mask
    raw_pred = _neighbour_predictions(z_s, w_filter, slopes, corrs, neighbor_sets)
    shrink = np.ones(d)
    for j in range(d):
        result = shrink_slope(z_s[mask[:, j], j], raw_pred[mask[:, j], j], rho)
        shrink[j] = result.slope
        if result.fallback and neighbor_sets[j]:
            logger.warning("Shrink slope of column %d fell back to 1", j)
    resid_scales = _column_scales(z_s - raw_pred * shrink, mask)

    mcd_mu = cov.mcd.mu if cov.mcd is not None else np.zeros(0)
    mcd_sigma = cov.mcd.sigma if cov.mcd is not None else np.zeros((0, 0))
    model = FastCellCovModel(
        standardizer=cov.standardizer, mu_z=pca.mu_z, V=pca.V, S_hat=S_hat, slopes=slopes, corrs=corrs,
        neighbor_sets=neighbor_sets, shrink=shrink, resid_scales=resid_scales,
        sigma1_star=np.ones(d), sigma2_star=1.0, mcd_mu=mcd_mu, mcd_sigma=mcd_sigma,
        delta_floor=float(delta_floor), rho=rho,
    )
    # the training pass fixes the scales of the imputed-and-projected residuals
    first = _impute_and_project(model, data)
    sigma1_star = _column_scales(first.r_hat, mask)
    w_cell = rho.weight(first.r_hat / sigma1_star) * first.M
    sigma2_star = _floored_mscale(_imputed_deviation(first.r_hat, w_cell), SCALE_FLOOR)
    model = replace(model, sigma1_star=sigma1_star, sigma2_star=float(sigma2_star))

    # on the training sample diag(Sigma_F) reproduces the cellCov diagonal
    _, sigma_t, _ = _standardized_moments(model, data)
    raw, target = np.diag(sigma_t), np.diag(cov.sigma_std)
    consistency = np.ones(d)
    usable = (raw > SCALE_FLOOR) & (target > 0)
    consistency[usable] = np.sqrt(target[usable] / raw[usable])
    return replace(model, consistency=consistency)


def weighted_moments(Z, W, case_weights, center, delta_floor):
    """
    Weighted mean and covariance with elementwise denominators floored at n * delta_floor.

    Args:
        Z (np.ndarray): n x d standardized values (anything at zero-weight cells).
        W (np.ndarray): n x d cell weights, 0 at missing cells.
        case_weights (np.ndarray): n row weights.
        center (np.ndarray): Covariance centre.

    Returns:
        tuple: (mu, sigma, c_mu, c_sigma)
    """
    n = Z.shape[0]
    floor = n * delta_floor
    Zw = np.where(W > 0, Z, 0.0)
    c_mu = np.maximum(case_weights @ W, floor)
    mu = case_weights @ (W * Zw) / c_mu
    A = W * (Zw - center)
    c_sigma = np.maximum((W * case_weights[:, None]).T @ W, floor)
    sigma = (A * case_weights[:, None]).T @ A / c_sigma
    return mu, 0.5 * (sigma + sigma.T), c_mu, c_sigma


def _standardized_moments(model, sample):
    run = _impute_and_project(model, sample)
    w_cell = model.rho.weight(run.r_hat / model.sigma1_star) * run.M
    deviation = _imputed_deviation(run.r_hat, w_cell)
    finite = np.isfinite(deviation)
    w_case = np.zeros(sample.n)
    w_case[finite] = model.rho.weight(deviation[finite] / model.sigma2_star)

    if model.k > 0:
        scores = (run.z_hat - model.mu_z) @ model.V - model.mcd_mu
        factor = linalg.cho_factor(model.mcd_sigma, lower=True)
        d2 = np.einsum("ij,ij->i", scores, linalg.cho_solve(factor, scores.T).T)
        w_sub = model.subspace_rho().weight(d2)
    else:
        w_sub = np.ones(sample.n)

    mu_t, sigma_t, c_mu, c_sigma = weighted_moments(run.Z, w_cell, w_case * w_sub, model.mu_z, model.delta_floor)
    weights = FastCovWeights(run.w_filter, run.w_resid, w_cell, w_case, np.atleast_1d(w_sub), c_mu, c_sigma)
    return mu_t, sigma_t, weights


def evaluate(model, sample):
    """
    Fast robust location/scatter of a sample with the trained structure.

    Args:
        model (FastCellCovModel): Trained model.
        sample (DataMatrix): Same columns as the training data.

    Returns:
        FastCovEstimate: in original units.
    """
    if sample.d != model.d:
        raise DimensionMismatchError(f"Model has {model.d} columns, sample has {sample.d}")
    mu_t, sigma_t, weights = _standardized_moments(model, sample)
    factors = model.consistency_factors()
    mu_F, sigma_F = destandardize_cov(model.standardizer, mu_t, sigma_t * np.outer(factors, factors))
    return FastCovEstimate(mu_F, sigma_F, weights)
