"""Input validation helpers shared by the public entry points.

All helpers either return a validated (possibly converted) value or raise a
toolkit error; they never mutate their argument.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError, ShapeError

__all__ = [
    "as_matrix",
    "as_vector",
    "check_square",
    "check_symmetric",
    "check_token_ids",
    "check_positive",
]


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Return ``x`` as a finite 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={a.ndim}")
    if a.size and not np.isfinite(a).all():
        raise InputError(f"{name} contains non-finite values")
    return a


def as_vector(x, name: str = "vector") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got ndim={a.ndim}")
    if a.size and not np.isfinite(a).all():
        raise InputError(f"{name} contains non-finite values")
    return a


def check_square(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {a.shape}")
    return a


def check_symmetric(a: np.ndarray, name: str = "matrix", tol: float = 1e-8) -> np.ndarray:
    check_square(a, name)
    if a.size and not np.allclose(a, a.T, rtol=0.0, atol=tol * max(1.0, float(np.abs(a).max()))):
        raise InputError(f"{name} is not symmetric")
    return a


def check_token_ids(tokens, vocab: int, name: str = "tokens") -> np.ndarray:
    """Return token ids as an int64 array, rejecting out-of-range ids."""
    t = np.asarray(tokens, dtype=np.int64)
    if t.ndim != 1:
        raise ShapeError(f"{name} must be a 1-D id sequence")
    if t.size and (t.min() < 0 or t.max() >= vocab):
        bad = int(t[(t < 0) | (t >= vocab)][0])
        raise InputError(f"{name}: id {bad} out of range for vocab {vocab}")
    return t


def check_positive(value: float, name: str) -> float:
    if not value > 0:
        raise InputError(f"{name} must be > 0, got {value}")
    return float(value)
