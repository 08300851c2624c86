"""
Module: cellcov.py

Robust location/scatter built from a cellPCA fit: MCD scatter of the scores
inside the principal subspace plus a cell- and case-weighted scatter of the
residuals in its orthogonal complement, mapped back to original units.

Main class / functions:
    - CovEstimate
    - cellcov(data, k, options): full pipeline on raw data
    - orth_scatter(fit, data): weighted residual scatter
    - repair_psd(sigma): symmetrize and clip negative eigenvalues

Example:
    est = cellcov(data, k=2)
    print(est.mu, est.sigma)
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from src.datamodel import Standardizer, destandardize_cov, standardize
from src.estimators import cellpca
from src.estimators.mcd import McdEstimate, mcd_fit
from src.exceptions import NormalizerZeroError

logger = logging.getLogger(__name__)

PSD_LOG_THRESHOLD = 1e-8


@dataclass(frozen=True)
class CellCovOptions:
    pca: cellpca.CellPcaOptions = field(default_factory=cellpca.CellPcaOptions)
    alpha: float = 0.75


@dataclass(frozen=True)
class CovEstimate:
    """
    cellCov estimate.

    mu and sigma are in original units; mu_std, sigma_sub, sigma_orth and
    sigma_std live in the standardized space of `standardizer`.
    """
    mu: np.ndarray
    sigma: np.ndarray
    sigma_sub: np.ndarray
    sigma_orth: np.ndarray
    normalizer_b: float
    standardizer: Standardizer
    mu_std: np.ndarray
    sigma_std: np.ndarray
    pca_fit: cellpca.CellPcaFit
    mcd: McdEstimate = None

    @property
    def k(self):
        return self.pca_fit.k

    def to_dict(self):
        return {
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "sigma_sub": self.sigma_sub.tolist(),
            "sigma_orth": self.sigma_orth.tolist(),
            "normalizer_b": self.normalizer_b,
            "standardizer": self.standardizer.to_dict(),
            "mu_std": self.mu_std.tolist(),
            "sigma_std": self.sigma_std.tolist(),
            "pca_fit": self.pca_fit.to_dict(),
            "mcd": None if self.mcd is None else self.mcd.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload):
        matrix = lambda key: np.atleast_2d(np.asarray(payload[key], dtype=float))
        return cls(
            mu=np.asarray(payload["mu"], dtype=float),
            sigma=matrix("sigma"),
            sigma_sub=matrix("sigma_sub"),
            sigma_orth=matrix("sigma_orth"),
            normalizer_b=float(payload["normalizer_b"]),
            standardizer=Standardizer.from_dict(payload["standardizer"]),
            mu_std=np.asarray(payload["mu_std"], dtype=float),
            sigma_std=matrix("sigma_std"),
            pca_fit=cellpca.CellPcaFit.from_dict(payload["pca_fit"]),
            mcd=None if payload.get("mcd") is None else McdEstimate.from_dict(payload["mcd"]),
        )


def orth_normalizer(fit, data):
    """b = sum_i w_case_i (sum_j m_ij w_cell_ij)**2 / d**2."""
    W = fit.cell_weights * data.mask
    return float(np.sum(fit.case_weights * W.sum(axis=1) ** 2) / data.d ** 2)


def orth_scatter(fit, data):
    """
    Weighted scatter of the residuals z_i - zhat_i around the fitted subspace.

    Missing cells carry weight 0 and contribute nothing.

    Returns:
        np.ndarray: d x d matrix.
    """
    b = orth_normalizer(fit, data)
    if b < 1e-12:
        raise NormalizerZeroError("All cases are downweighted; the orthogonal scatter is undefined")
    weighted = fit.cell_weights * data.mask * np.where(data.mask, fit.residuals, 0.0)
    return (weighted * fit.case_weights[:, None]).T @ weighted / b


def repair_psd(sigma):
    sym = 0.5 * (sigma + sigma.T)
    eigvals, eigvecs = np.linalg.eigh(sym)
    if eigvals.min() >= 0:
        return sym
    if -eigvals.min() > PSD_LOG_THRESHOLD:
        logger.warning("Clipping negative eigenvalue %.3g of the scatter estimate", eigvals.min())
    return (eigvecs * np.clip(eigvals, 0.0, None)) @ eigvecs.T


def cellcov(data, k, options=None):
    """
    Robust location and scatter of raw data through a rank-k cellPCA fit.

    Args:
        data (DataMatrix): Raw data with missing cells.
        k (int): cellPCA rank (0 <= k < min(n, d)).
        options (CellCovOptions): Kernels, solver settings and MCD coverage.

    Returns:
        CovEstimate
    """
    options = options or CellCovOptions()
    z, standardizer = standardize(data)
    fit = cellpca.fit(z, k, options.pca)

    if fit.k > 0:
        mcd = mcd_fit(fit.U, options.alpha)
        mu_std = fit.mu_z + fit.V @ mcd.mu
        sigma_sub = fit.V @ mcd.sigma @ fit.V.T
    else:
        mcd = None
        mu_std = fit.mu_z.copy()
        sigma_sub = np.zeros((data.d, data.d))

    sigma_orth = orth_scatter(fit, z)
    sigma_std = repair_psd(sigma_sub + sigma_orth)
    mu, sigma = destandardize_cov(standardizer, mu_std, sigma_std)
    return CovEstimate(
        mu=mu,
        sigma=sigma,
        sigma_sub=sigma_sub,
        sigma_orth=sigma_orth,
        normalizer_b=orth_normalizer(fit, z),
        standardizer=standardizer,
        mu_std=mu_std,
        sigma_std=sigma_std,
        pca_fit=fit,
        mcd=mcd,
    )
