"""Input validation helpers shared by the estimators and functional API."""

import numbers

import numpy as np
from sklearn.utils.validation import check_array, column_or_1d


def check_alpha(alpha, name="alpha"):
    if not isinstance(alpha, numbers.Real) or not 0.0 < alpha < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {alpha!r}")
    return float(alpha)


def check_rank(rank, shape):
    if not isinstance(rank, numbers.Integral) or rank < 1:
        raise ValueError(f"rank must be a positive integer, got {rank!r}")
    if rank > min(shape):
        raise ValueError(f"rank {rank} exceeds min(d1, d2) = {min(shape)}")
    return int(rank)


def check_shape(shape):
    if shape is None or len(shape) != 2:
        raise ValueError(f"shape must be a pair (d1, d2), got {shape!r}")
    d1, d2 = (int(s) for s in shape)
    if d1 < 1 or d2 < 1:
        raise ValueError(f"matrix dimensions must be positive, got {shape!r}")
    return d1, d2


def check_indices(X, shape=None):
    """Validate an ``(n, 2)`` array of ``(row, col)`` coordinates.

    When ``shape`` is None the dimensions are inferred as ``max + 1``.
    """
    X = check_array(X, dtype=None, ensure_2d=True)
    if X.shape[1] != 2:
        raise ValueError(f"coordinates must have two columns, got {X.shape[1]}")
    if not np.issubdtype(X.dtype, np.integer) and not np.all(np.equal(np.mod(X, 1), 0)):
        raise ValueError("coordinates must be integers")
    X = X.astype(np.int64)
    if np.any(X < 0):
        raise ValueError("coordinates must be non-negative")
    if shape is None:
        shape = (int(X[:, 0].max()) + 1, int(X[:, 1].max()) + 1)
    d1, d2 = check_shape(shape)
    if np.any(X[:, 0] >= d1) or np.any(X[:, 1] >= d2):
        raise ValueError(f"coordinates fall outside a {d1}x{d2} matrix")
    return X, (d1, d2)


def check_observations(X, y, shape=None):
    """Turn sklearn-style ``(X, y)`` into an :class:`ObservationSet`."""
    from .completion import ObservationSet

    X, (d1, d2) = check_indices(X, shape)
    y = column_or_1d(y, warn=True).astype(np.float64)
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]} values")
    if not np.all(np.isfinite(y)):
        raise ValueError("observed values must be finite")
    return ObservationSet(d1, d2, X[:, 0], X[:, 1], y)


def check_orthonormal(Q, name="factor", atol=1e-8):
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array")
    gram = Q.T @ Q
    if np.max(np.abs(gram - np.eye(Q.shape[1])), initial=0.0) > atol:
        raise ValueError(f"{name} columns are not orthonormal")
    return Q
