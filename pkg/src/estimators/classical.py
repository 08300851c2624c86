"""
Module: classical.py

Classical (non-robust) moments and the ridge/OLS plug-in built on them. Used
as the baseline in the simulation studies and for OLS percentile intervals.

Example:
    mu, sigma = classical_moments(train)
    coef = classical_fit(train, p=5, lam=0.0)
"""

import numpy as np

from src.regression import plugin_coefficients


def classical_moments(data):
    """Column means and pairwise-complete covariance (divisor n_jl - 1) over observed cells."""
    frame = data.to_frame()
    mu = frame.mean(axis=0, skipna=True).to_numpy()
    sigma = frame.cov(min_periods=2).to_numpy()
    return mu, np.nan_to_num(sigma, nan=0.0)


def classical_fit(data, p, lam=0.0):
    mu, sigma = classical_moments(data)
    return plugin_coefficients(mu, sigma, lam, p)
