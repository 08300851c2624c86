"""
Module: datamodel.py

Data containers with per-cell missingness, robust column standardization and
CSV input/output shared by all estimators.

Main classes / functions:
    - DataMatrix: n x d values, boolean observed-mask, column names
    - Standardizer: column medians and M-scales (the diagonal of D)
    - standardize, destandardize_cov, read_csv, write_csv

Usage:
    Missing cells hold NaN in `values` and False in `mask`; numeric code reads
    values only through `observed_values()` (missing cells as 0) or the mask.

Example:
    data = read_csv("data/example.csv")
    z, standardizer = standardize(data)
    mu, sigma = destandardize_cov(standardizer, mu_z, sigma_z)
"""

from dataclasses import dataclass

import numpy as np
import pandas as pd

from src.estimators.mkernel import mscale
from src.exceptions import (
    AllMissingRowError,
    DegenerateColumnError,
    DimensionMismatchError,
    EmptyInputError,
)

MISSING_TOKENS = ["NA", "nan", "NaN", ""]


@dataclass(frozen=True)
class DataMatrix:
    """
    Numeric data matrix with a per-cell observed mask.

    Args:
        values (np.ndarray): n x d floats; NaN at missing cells.
        mask (np.ndarray): n x d booleans, True where the cell is observed.
        column_names (tuple): d column labels.
    """
    values: np.ndarray
    mask: np.ndarray
    column_names: tuple

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 2 or values.shape != mask.shape:
            raise DimensionMismatchError(f"values {values.shape} and mask {mask.shape} must be equal 2-D shapes")
        if values.shape[0] == 0 or values.shape[1] == 0:
            raise EmptyInputError("DataMatrix needs at least one row and one column")
        names = tuple(str(c) for c in self.column_names)
        if len(names) != values.shape[1]:
            raise DimensionMismatchError(f"{len(names)} column names for {values.shape[1]} columns")
        mask &= np.isfinite(values)
        empty = np.flatnonzero(~mask.any(axis=1))
        if empty.size:
            raise AllMissingRowError(int(empty[0]))
        values[~mask] = np.nan
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "column_names", names)

    @classmethod
    def from_array(cls, values, column_names=None):
        """Non-finite entries become missing cells."""
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if column_names is None:
            column_names = [f"V{j + 1}" for j in range(values.shape[1])]
        return cls(values, np.isfinite(values), tuple(column_names))

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]

    def observed_values(self):
        """Values with missing cells replaced by 0, safe for arithmetic with the mask."""
        return np.where(self.mask, self.values, 0.0)

    def subset_rows(self, rows):
        rows = np.asarray(rows, dtype=int)
        return DataMatrix(self.values[rows], self.mask[rows], self.column_names)

    def select_columns(self, columns):
        columns = list(columns)
        return DataMatrix(self.values[:, columns], self.mask[:, columns],
                          tuple(self.column_names[j] for j in columns))

    def to_frame(self):
        return pd.DataFrame(self.values, columns=list(self.column_names))


@dataclass(frozen=True)
class Standardizer:
    """Column medians m_j and robust scales (diagonal of D)."""
    medians: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        scales = np.asarray(self.scales, dtype=float)
        if np.any(~np.isfinite(scales)) or np.any(scales <= 0):
            raise ValueError("Standardizer scales must be strictly positive")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "medians", np.asarray(self.medians, dtype=float))

    @property
    def d(self):
        return self.scales.size

    def apply(self, data):
        """Divide every observed cell by its column scale (medians are not subtracted)."""
        if data.d != self.d:
            raise DimensionMismatchError(f"Standardizer for {self.d} columns applied to {data.d}")
        return DataMatrix(data.values / self.scales, data.mask, data.column_names)

    def subset(self, columns):
        columns = list(columns)
        return Standardizer(self.medians[columns], self.scales[columns])

    def to_dict(self):
        return {"medians": self.medians.tolist(), "scales": self.scales.tolist()}

    @classmethod
    def from_dict(cls, payload):
        return cls(np.asarray(payload["medians"], dtype=float), np.asarray(payload["scales"], dtype=float))


def standardize(data):
    """
    Robustly standardize each column by the M-scale of its median-centered cells.

    Args:
        data (DataMatrix): Raw data.

    Returns:
        tuple: (standardized DataMatrix, Standardizer)
    """
    medians = np.zeros(data.d)
    scales = np.zeros(data.d)
    for j in range(data.d):
        column = data.values[data.mask[:, j], j]
        if np.unique(column).size < 2:
            raise DegenerateColumnError(j, data.column_names[j])
        medians[j] = np.median(column)
        result = mscale(column - medians[j])
        if result.degenerate:
            raise DegenerateColumnError(j, data.column_names[j])
        scales[j] = result.scale
    standardizer = Standardizer(medians, scales)
    return standardizer.apply(data), standardizer


def destandardize_cov(standardizer, mu, sigma):
    """Map a location/scatter pair back to original units: (D mu, D sigma D)."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    scales = standardizer.scales
    if mu.shape != (scales.size,) or sigma.shape != (scales.size, scales.size):
        raise DimensionMismatchError(
            f"Expected ({scales.size},) and {(scales.size, scales.size)}, got {mu.shape} and {sigma.shape}")
    return scales * mu, sigma * np.outer(scales, scales)


def read_csv(path, columns=None):
    """
    Read a headered numeric CSV. "NA", "nan" and empty fields are missing cells.

    Args:
        path (str): UTF-8 CSV file, '.' decimal separator.
        columns (list): Optional subset and order of columns to keep.
    """
    frame = pd.read_csv(path, keep_default_na=False, na_values=MISSING_TOKENS, encoding="utf-8")
    if columns is not None:
        missing = [c for c in columns if c not in frame.columns]
        if missing:
            raise DimensionMismatchError(f"Columns not found in {path}: {missing}")
        frame = frame[list(columns)]
    frame = frame.apply(pd.to_numeric, errors="raise")
    return DataMatrix.from_array(frame.to_numpy(dtype=float), column_names=list(frame.columns))


def write_csv(data, path):
    data.to_frame().to_csv(path, index=False, na_rep="NA", encoding="utf-8")
