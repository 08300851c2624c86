"""
Module: sensitivity.py

Empirical casewise and cellwise influence of a point of contamination on any
scalar functional of a fit. The values are finite-epsilon difference quotients,
finite-sample surrogates of the population influence functions.

Main class / functions:
    - ContaminationSpec
    - empirical_if(base, functional, spec): (T(contaminated) - T(base)) / epsilon
    - if_surface(base, functional, kind, grid): the quotient over a 2-D grid of points
    - cellmr_slope_functional, ols_slope_functional: slope of the bivariate showcase
    - bivariate_base_sample(n, seed): y = 0.9 x + e, e ~ N(0, 0.19)

Example:
    base = bivariate_base_sample(200, seed=3)
    spec = ContaminationSpec("casewise", np.array([6.0, -6.0]), epsilon=0.02, seed=1)
    print(empirical_if(base, cellmr_slope_functional(), spec))
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from src.datamodel import DataMatrix
from src.estimators.classical import classical_fit
from src.exceptions import InvalidConfigError
from src.regression import fit as cellmr_fit
from src.utils import derive_rng, parallel_map

logger = logging.getLogger(__name__)

KINDS = ("casewise", "cellwise")
SURROGATE_LABEL = "finite-sample surrogate"
BIVARIATE_SLOPE = 0.9
BIVARIATE_ERROR_VAR = 0.19


@dataclass(frozen=True)
class ContaminationSpec:
    """
    Args:
        kind (str): "casewise" replaces whole rows, "cellwise" replaces single cells.
        c_point (np.ndarray): Contamination point, one value per column.
        epsilon (float): Contamination fraction in (0, 0.1].
        seed (int): Seed of the contamination draws.
        draws (int): Contaminated datasets averaged per quotient.
    """
    kind: str
    c_point: np.ndarray
    epsilon: float = 0.02
    seed: int = 0
    draws: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfigError(f"Unknown contamination kind {self.kind!r}; use one of {KINDS}")
        if not 0 < self.epsilon <= 0.1:
            raise InvalidConfigError(f"epsilon must lie in (0, 0.1], got {self.epsilon}")
        if self.draws < 1:
            raise InvalidConfigError("draws must be at least 1")
        object.__setattr__(self, "c_point", np.asarray(self.c_point, dtype=float).ravel())


def contaminate(base, spec, draw):
    """One contaminated copy of `base`; returns the data and the mask of replaced cells."""
    if spec.c_point.size != base.d:
        raise InvalidConfigError(f"c_point has {spec.c_point.size} entries, data has {base.d} columns")
    rng = derive_rng(spec.seed, "contaminate", draw)
    values = np.array(base.values)
    mask = np.array(base.mask)
    replaced = np.zeros(values.shape, dtype=bool)
    if spec.kind == "casewise":
        rows = rng.choice(base.n, size=int(np.ceil(spec.epsilon * base.n)), replace=False)
        replaced[rows] = True
    else:
        replaced = rng.random(values.shape) < spec.epsilon
    values[replaced] = np.broadcast_to(spec.c_point, values.shape)[replaced]
    mask |= replaced
    return DataMatrix(values, mask, base.column_names), replaced


def empirical_if(base, functional, spec, base_value=None):
    """
    Difference quotient of a scalar functional under point contamination.

    Args:
        base (DataMatrix): Uncontaminated sample.
        functional (callable): DataMatrix -> float.
        spec (ContaminationSpec): Contamination scheme.
        base_value (float): T(base) when already known.

    Returns:
        float: mean over draws of (T(contaminated) - T(base)) / epsilon.
    """
    base_value = functional(base) if base_value is None else base_value
    quotients = [
        (functional(contaminate(base, spec, draw)[0]) - base_value) / spec.epsilon
        for draw in range(spec.draws)
    ]
    return float(np.mean(quotients))


def default_grid(limit=10.0, points=21):
    return np.linspace(-limit, limit, points)


def if_surface(base, functional, kind, grid=None, epsilon=0.02, seed=0, draws=5, threads=1, progress=False):
    """
    Empirical influence over the 2-D grid of contamination points (c1, c2).

    Every grid point reuses the same contamination draws, so the surface is
    smooth in c and deterministic given the seed.

    Returns:
        pd.DataFrame: columns c1, c2, if_value.
    """
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    if base.d != 2:
        raise InvalidConfigError(f"if_surface needs bivariate data, got {base.d} columns")
    base_value = functional(base)
    points = [(c1, c2) for c1 in grid for c2 in grid]

    def one(point):
        spec = ContaminationSpec(kind, np.array(point), epsilon, seed, draws)
        return empirical_if(base, functional, spec, base_value)

    values = parallel_map(one, points, threads=threads, desc=f"{kind} influence", progress=progress)
    return pd.DataFrame({
        "c1": [c[0] for c in points],
        "c2": [c[1] for c in points],
        "if_value": values,
    })


def cellmr_slope_functional(k=1, lam=0.0, options=None):
    """T(data) = cellMR slope of the second column on the first."""
    def functional(data):
        return float(cellmr_fit(data, 1, k, lam, options).B[0, 0])
    return functional


def ols_slope_functional(lam=0.0):
    def functional(data):
        return float(classical_fit(data, 1, lam).B[0, 0])
    return functional


def bivariate_base_sample(n=200, seed=0):
    """x ~ N(0, 1), y = 0.9 x + e with e ~ N(0, 0.19), so y has unit variance."""
    rng = derive_rng(seed, "bivariate")
    x = rng.standard_normal(n)
    y = BIVARIATE_SLOPE * x + np.sqrt(BIVARIATE_ERROR_VAR) * rng.standard_normal(n)
    return DataMatrix.from_array(np.column_stack([x, y]), column_names=["x", "y"])
