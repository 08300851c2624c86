"""
Module: exceptions.py

Error hierarchy shared by every estimator, the inference layer and the CLI.

Main class:
    - CellRegressionError (base of everything raised on purpose)

Usage:
    Library code raises the specific subclass; callers that only care about
    "the data or model is unusable" catch CellRegressionError. Subclasses that
    signal a bad argument also derive from ValueError.

Example:
    try:
        fit = regression.fit(data, p=2, k=1, lam=0.0)
    except SingularSystemError as err:
        print(f"Try a positive ridge penalty: {err}")
"""


class CellRegressionError(Exception):
    """Base class of all errors raised by this package."""


class EmptyInputError(CellRegressionError, ValueError):
    pass


class NonFiniteInputError(CellRegressionError, ValueError):
    pass


class DimensionMismatchError(CellRegressionError, ValueError):
    pass


class InvalidConfigError(CellRegressionError, ValueError):
    pass


class DegenerateColumnError(CellRegressionError):
    """A column has no robust spread (its M-scale is degenerate)."""

    def __init__(self, column, name=None):
        self.column = column
        label = f"{column} ({name})" if name is not None else f"{column}"
        super().__init__(f"Column {label} has zero robust scale")


class AllMissingRowError(CellRegressionError):
    def __init__(self, row):
        self.row = row
        super().__init__(f"Row {row} has no observed cells")


class AllMissingPointError(CellRegressionError):
    pass


class ScaleZeroError(CellRegressionError):
    pass


class RankTooLargeError(CellRegressionError, ValueError):
    pass


class TooFewPointsError(CellRegressionError):
    pass


class SingularSubsetError(CellRegressionError):
    pass


class NormalizerZeroError(CellRegressionError):
    pass


class SingularSystemError(CellRegressionError):
    pass


class SingularCovarianceError(CellRegressionError):
    pass


class FoldTooSmallError(CellRegressionError):
    pass


class NonFiniteIterateError(CellRegressionError):
    pass
