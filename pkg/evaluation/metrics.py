import numpy as np


def mse(y_true, y_pred):
    """Mean over rows of the squared Euclidean prediction error."""
    residuals = np.atleast_2d(np.asarray(y_true, dtype=float) - np.asarray(y_pred, dtype=float))
    if residuals.shape[0] == 1 and np.ndim(y_true) == 1:
        residuals = residuals.T
    return float(np.mean(np.sum(residuals ** 2, axis=1)))


def trim_rmse(residuals, alpha=0.75):
    """
    Trimmed RMSE: root mean of the ceil(alpha n) smallest squared residuals
    of every column, pooled over the q columns.

    Args:
        residuals (np.ndarray): n x q residual matrix (a vector is one column).
        alpha (float): Kept fraction in (0, 1].
    """
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    residuals = np.asarray(residuals, dtype=float)
    if residuals.ndim == 1:
        residuals = residuals[:, None]
    h = int(np.ceil(round(alpha * residuals.shape[0], 9)))
    squared = np.sort(residuals ** 2, axis=0)[:h]
    return float(np.sqrt(squared.mean()))


def interval_coverage(intervals, truth):
    """Fraction of (lower, upper) intervals containing their true value, bounds included."""
    intervals = np.asarray(intervals, dtype=float).reshape(-1, 2)
    truth = np.asarray(truth, dtype=float).ravel()
    if intervals.shape[0] != truth.size:
        raise ValueError(f"{intervals.shape[0]} intervals for {truth.size} true values")
    inside = (intervals[:, 0] <= truth) & (truth <= intervals[:, 1])
    return float(np.mean(inside))
