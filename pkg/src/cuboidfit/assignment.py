"""Soft point-to-cuboid assignment: column softmax, coverage, labels, existence.

The assignment matrix W is (M, N): rows are cuboids, columns are points, and
each column is a probability distribution over the M cuboids.
"""

import numpy as np

from .errors import InvalidInputError


def softmax_columns(logits):
    """Column-wise softmax of an (M, N) logit matrix (max-shifted for stability)."""
    logits = np.asarray(logits, dtype=float)
    if logits.ndim != 2:
        raise InvalidInputError("assignment logits must be a 2-D (M, N) array")
    if not np.all(np.isfinite(logits)):
        raise InvalidInputError("assignment logits must be finite")
    shifted = logits - logits.max(axis=0, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=0, keepdims=True)


def validate_assignment(w_matrix, atol=1e-9):
    """Raise unless every column of W is a probability distribution."""
    w_matrix = np.asarray(w_matrix, dtype=float)
    if w_matrix.ndim != 2:
        raise InvalidInputError("assignment matrix must be 2-D")
    if np.any(w_matrix < -atol) or np.any(w_matrix > 1.0 + atol):
        raise InvalidInputError("assignment entries must lie in [0, 1]")
    colsums = w_matrix.sum(axis=0)
    if np.any(np.abs(colsums - 1.0) > atol):
        raise InvalidInputError("assignment columns must sum to 1")
    return w_matrix


def coverage(w_matrix):
    """Coverage vector w_m = mean over points of W_{m,n}; sums to 1."""
    return np.asarray(w_matrix, dtype=float).mean(axis=1)


def hard_labels(w_matrix):
    """Per-point argmax cuboid index; ties resolve to the lowest index."""
    return np.argmax(np.asarray(w_matrix, dtype=float), axis=0)


def existence_targets(coverage_vec, eps_ext=0.05):
    """Binary existence flags: 1 where coverage strictly exceeds eps_ext."""
    if not 0.0 < eps_ext < 1.0:
        raise InvalidInputError("eps_ext must lie in (0, 1)")
    return (np.asarray(coverage_vec, dtype=float) > eps_ext).astype(int)
