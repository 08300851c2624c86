"""
Module: mkernel.py

Hyperbolic-tangent rho/psi/weight functions, the redescending chi function of
the M-scale, and the univariate M-scale solver every estimator relies on.

Main classes / functions:
    - TanhRho: bounded loss whose weight is exactly 1 on [-b, b] and 0 beyond c
    - QuadraticRho: rho(z) = z**2, reduces the robust fits to classical ones
    - TanhChi: redescending chi function defining the M-scale
    - mscale: outermost root of mean(chi(z / sigma)) = 0

Usage:
    All kernels are immutable and vectorized: pass scalars or numpy arrays.
    mscale never centers its input; pass residuals that are already centered.

Example:
    rho = TanhRho()
    w = rho.weight(residuals / scale)
    sigma = mscale(residuals).scale
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy import integrate, optimize, stats

from src.exceptions import EmptyInputError, NonFiniteInputError

logger = logging.getLogger(__name__)

# Two-decimal constants commonly quoted for b=1.5, c=4. q1 is re-derived from
# continuity of psi at b, which gives 1.5412 instead of 1.54.
NOMINAL_Q1 = 1.54
NOMINAL_Q2 = 0.86


def _scalar_or_array(out):
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class TanhRho:
    """
    Tanh rho function: quadratic on [-b, b], tanh-shaped bridge, flat beyond c.

    Args:
        b (float): Edge of the linear psi region.
        c (float): Rejection point, psi is 0 for |z| >= c.
        q2 (float): Steepness of the tanh bridge. q1 and the plateau value
            d_const are derived so that psi and rho are continuous.
    """
    b: float = 1.5
    c: float = 4.0
    q2: float = NOMINAL_Q2
    q1: float = field(init=False)
    d_const: float = field(init=False)

    def __post_init__(self):
        if not (0 < self.b < self.c) or self.q2 <= 0:
            raise ValueError(f"Invalid tanh rho constants b={self.b}, c={self.c}, q2={self.q2}")
        span = self.q2 * (self.c - self.b)
        q1 = self.b / np.tanh(span)
        d_const = self.b ** 2 / 2 + (q1 / self.q2) * np.log(np.cosh(span))
        object.__setattr__(self, "q1", float(q1))
        object.__setattr__(self, "d_const", float(d_const))

    @classmethod
    def rescaled(cls, b, c, reference=None):
        """Same family with new edges; q2 scaled so q2 * (c - b) matches the reference."""
        reference = reference or cls()
        span = reference.q2 * (reference.c - reference.b)
        return cls(b=float(b), c=float(c), q2=span / (float(c) - float(b)))

    def rho(self, z):
        z = np.asarray(z, dtype=float)
        a = np.abs(z)
        bridge = self.d_const - (self.q1 / self.q2) * np.log(np.cosh(self.q2 * (self.c - np.minimum(a, self.c))))
        out = np.where(a <= self.b, 0.5 * a ** 2, np.where(a < self.c, bridge, self.d_const))
        return _scalar_or_array(out)

    def psi(self, z):
        z = np.asarray(z, dtype=float)
        a = np.abs(z)
        bridge = self.q1 * np.tanh(self.q2 * (self.c - np.minimum(a, self.c))) * np.sign(z)
        out = np.where(a <= self.b, z, np.where(a < self.c, bridge, 0.0))
        return _scalar_or_array(out)

    def weight(self, z):
        """psi(z) / z with the convention weight(0) = 1."""
        z = np.asarray(z, dtype=float)
        psi = np.asarray(self.psi(z))
        out = np.ones_like(z)
        nonzero = z != 0
        np.divide(psi, z, out=out, where=nonzero)
        return _scalar_or_array(out)


@dataclass(frozen=True)
class QuadraticRho:
    """rho(z) = z**2. Constant weight 2; only meant for classical-reduction checks."""

    def rho(self, z):
        z = np.asarray(z, dtype=float)
        return _scalar_or_array(z ** 2)

    def psi(self, z):
        z = np.asarray(z, dtype=float)
        return _scalar_or_array(2.0 * z)

    def weight(self, z):
        z = np.asarray(z, dtype=float)
        return _scalar_or_array(np.full_like(z, 2.0))


@dataclass(frozen=True)
class TanhChi:
    """
    Redescending chi function of the M-scale.

    chi(x) = x**2 - 1 + a_const on |x| <= b, a tanh bridge on (b, c) and 0 beyond c.
    With A and k fixed, B is solved so that E[chi(Z)] = 0 for standard normal Z,
    which makes the M-scale consistent for the standard deviation at the normal.
    a_const then follows from continuity at b.
    """
    b: float = 1.5
    c: float = 4.0
    A: float = 0.75
    k: float = 4.5
    B: float = field(init=False)
    a_const: float = field(init=False)
    root: float = field(init=False)

    def __post_init__(self):
        if not (0 < self.b < self.c) or self.A <= 0 or self.k <= 1:
            raise ValueError("Invalid tanh chi constants")
        B = optimize.brentq(self._normal_mean, 1e-3, 50.0, xtol=1e-14)
        object.__setattr__(self, "B", float(B))
        object.__setattr__(self, "a_const", float(self._a_for(B)))
        object.__setattr__(self, "root", float(np.sqrt(1.0 - self.a_const)))

    def _height(self):
        return np.sqrt(self.A * (self.k - 1.0))

    def _rate(self, B):
        return 0.5 * np.sqrt((self.k - 1.0) * B ** 2 / self.A)

    def _a_for(self, B):
        return self._height() * np.tanh(self._rate(B) * np.log(self.c / self.b)) - (self.b ** 2 - 1.0)

    def _chi_with(self, x, B, a_const):
        a = np.abs(np.asarray(x, dtype=float))
        log_ratio = np.log(self.c) - np.log(np.clip(a, self.b, self.c))
        bridge = self._height() * np.tanh(self._rate(B) * log_ratio)
        return np.where(a <= self.b, a ** 2 - 1.0 + a_const, np.where(a < self.c, bridge, 0.0))

    def _normal_mean(self, B):
        a_const = self._a_for(B)
        integrand = lambda x: float(self._chi_with(x, B, a_const)) * stats.norm.pdf(x)
        value, _ = integrate.quad(integrand, 0.0, self.c, points=[self.b], limit=200)
        return 2.0 * value

    def chi(self, x):
        return _scalar_or_array(np.asarray(self._chi_with(x, self.B, self.a_const)))


@lru_cache(maxsize=None)
def default_chi():
    return TanhChi()


class MScale(NamedTuple):
    scale: float
    degenerate: bool


def mscale(values, chi=None):
    """
    Univariate M-scale: the outermost root sigma of mean(chi(z_i / sigma)) = 0.

    Args:
        values (array-like): Nonempty finite sample, already centered.
        chi (TanhChi): chi function, defaults to the Fisher-consistent tanh chi.

    Returns:
        MScale: (scale, degenerate). A degenerate result has scale 0 and arises
        when more than half of the values are exactly 0 or no sign change is found.
    """
    z = np.abs(np.asarray(values, dtype=float).ravel())
    if z.size == 0:
        raise EmptyInputError("mscale needs at least one value")
    if not np.all(np.isfinite(z)):
        raise NonFiniteInputError("mscale received non-finite values")
    chi = chi or default_chi()
    if np.count_nonzero(z == 0) > z.size / 2:
        return MScale(0.0, True)

    top = float(z.max())

    def mean_chi(sigma):
        return float(np.mean(chi.chi(z / sigma)))

    hi = 10.0 * top
    while mean_chi(hi) >= 0:
        hi *= 10.0
        if hi > 1e12 * top:
            return MScale(0.0, True)

    # scan downward for the outermost sign change; mean_chi redescends below it
    floor = np.finfo(float).eps * top
    lo = hi
    found = False
    while lo > floor:
        candidate = lo * 0.8
        if mean_chi(candidate) > 0:
            found = True
            lo, hi = candidate, lo
            break
        lo = candidate
    if not found:
        return MScale(0.0, True)

    sigma = optimize.brentq(mean_chi, lo, hi, xtol=np.finfo(float).tiny, rtol=1e-14, maxiter=500)
    return MScale(float(sigma), False)


def mscale_columns(values, mask, chi=None):
    """Per-column M-scales over observed cells. Degenerate columns give 0."""
    values = np.asarray(values, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    scales = np.zeros(values.shape[1])
    for j in range(values.shape[1]):
        column = values[mask[:, j], j]
        if column.size:
            scales[j] = mscale(column, chi).scale
    return scales
