"""Dense real-matrix kernels shared by every other module.

All functions are pure: they validate, allocate a fresh result and never
touch shared state, so concurrent calls are safe. Reductions go through
numpy/LAPACK with a fixed schedule, which is reproducible bit-for-bit on a
given platform.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import NumericalError, ShapeError, SingularHessianError
from .validation import as_matrix, check_symmetric

__all__ = [
    "matmul",
    "cholesky_lower",
    "damped_inverse",
    "softmax_rows",
    "l2_norm_cols",
]


def matmul(a, b) -> np.ndarray:
    """Matrix product a @ b with a shape check on the inner dimension."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def cholesky_lower(h, name: str = "matrix") -> np.ndarray:
    """Lower-triangular L with L @ L.T == h, for symmetric positive-definite h."""
    h = check_symmetric(as_matrix(h, name), name)
    try:
        return scipy.linalg.cholesky(h, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(f"{name} is not positive-definite: {exc}") from exc


def damped_inverse(h, eps_frac: float, name: str = "hessian") -> np.ndarray:
    """Inverse of h + eps_frac * mean(diag(h)) * I, via Cholesky.

    The damping term keeps small calibration Hessians invertible; eps_frac=0
    inverts h itself. A fully dead layer (zero diagonal mean, e.g. all-zero
    activations) falls back to absolute damping eps_frac * I so pruning can
    still proceed there. The result is symmetrized exactly. A matrix that
    stays indefinite after damping raises SingularHessianError carrying
    ``name`` (callers pass the layer label).
    """
    h = check_symmetric(as_matrix(h, name), name)
    if eps_frac < 0:
        raise ValueError(f"eps_frac must be >= 0, got {eps_frac}")
    damped = h.copy()
    if eps_frac > 0:
        mean_diag = float(np.mean(np.diag(h)))
        damp = eps_frac * mean_diag if mean_diag > 0 else eps_frac
        damped[np.diag_indices_from(damped)] += damp
    try:
        cf = scipy.linalg.cho_factor(damped, lower=True)
        inv = scipy.linalg.cho_solve(cf, np.eye(h.shape[0]))
    except scipy.linalg.LinAlgError as exc:
        raise SingularHessianError(
            f"{name}: Hessian not positive-definite after damping (eps_frac={eps_frac})"
        ) from exc
    return (inv + inv.T) / 2.0


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for overflow safety."""
    m = as_matrix(m, "m")
    if m.shape[1] == 0:
        return m.copy()
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def l2_norm_cols(m) -> np.ndarray:
    """Per-column Euclidean norms."""
    m = as_matrix(m, "m")
    return np.sqrt(np.einsum("ij,ij->j", m, m))
