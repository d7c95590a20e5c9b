"""Weight compensation and the sequential column-block pruning sweep.

The update path walks columns left to right in blocks. Entering a block it
(re)scores the current weights, picks that block's keep mask, then zeroes
each pruned column while spreading the induced error over all not-yet-frozen
columns through the Cholesky factor of the damped inverse Hessian: with
H^-1 = U^T U (U upper triangular), U[j,j]^2 is exactly the (q,q) entry of the
inverse Hessian of the still-unprocessed coordinate set, and U[j, j:] its
leading row, so each column update is the exact single-constraint
least-squares compensation given everything already frozen.

Unstructured selection keeps a running plan: entering a block, every
not-yet-processed column of a row is ranked by its current score and the
lowest still-unpruned-budget of them are planned for pruning; only the
block's columns are committed, the rest are re-planned at the next block
from the freshly compensated scores. The committed total per row is exactly
ceil((1-p)*cols) for any block size, and at block=1 the choice still follows
the saliency ranking. n:m groups are selected the moment the sweep reaches
them; the effective block size is rounded up to a multiple of m so groups
never straddle blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import LayerStats, scaled_norm
from .errors import ConfigError, InputError, NumericalError
from .linalg import cholesky_lower, damped_inverse
from .scoring import (
    DualParams,
    dual_activation_term,
    score_d2,
    score_magnitude,
    score_sparsegpt,
    score_wanda,
)
from .sparsity import PruneMask, SparsityPattern, keep_count, select_mask, top_keep
from .validation import as_matrix, as_vector

DEFAULT_BLOCK = 16
DEFAULT_DAMPING = 0.01

SCORE_METHODS = ("magnitude", "wanda", "sparsegpt", "d2")

__all__ = [
    "DEFAULT_BLOCK",
    "DEFAULT_DAMPING",
    "SCORE_METHODS",
    "LayerPruneResult",
    "compensate_column",
    "prune_layer",
]


@dataclass
class LayerPruneResult:
    updated_weight: np.ndarray
    mask: PruneMask
    recon_error: float
    updated: bool
    name: str = "layer"


def compensate_column(w_row, q: int, hinv) -> np.ndarray:
    """Zero coordinate q of a weight row, spreading the error via H^-1.

    Returns w + delta_w where delta_w = -(w_q / hinv_qq) * hinv[:, q]; the
    pruned coordinate comes back exactly zero.
    """
    w = as_vector(w_row, "w_row").copy()
    hinv = as_matrix(hinv, "hinv")
    if not 0 <= q < w.shape[0]:
        raise InputError(f"column index {q} out of range for dim {w.shape[0]}")
    pivot = hinv[q, q]
    if pivot <= 0:
        raise NumericalError(f"nonpositive inverse-Hessian pivot at column {q}")
    w -= (w[q] / pivot) * hinv[:, q]
    w[q] = 0.0
    return w


def _full_scores(w: np.ndarray, stats: LayerStats, method: str, params: DualParams,
                 damping: float, name: str) -> np.ndarray:
    if method == "magnitude":
        return score_magnitude(w).scores
    if method == "wanda":
        return score_wanda(w, stats).scores
    if method == "sparsegpt":
        hinv = damped_inverse(stats.hessian, damping, name=name)
        return score_sparsegpt(w, hinv).scores
    if method == "d2":
        return score_d2(w, stats, params, "noupdate").scores
    raise ConfigError(f"unknown score method {method!r}")


def _sweep_scores(w: np.ndarray, inv_diag: np.ndarray, stats: LayerStats, method: str,
                  params: DualParams) -> np.ndarray:
    """Scores from current weights against the current inverse-Hessian diagonal.

    ``inv_diag[j]`` must hold diag((H_FF)^-1) of the not-yet-frozen coordinate
    set F, so the weight term is the documented removal cost for every column
    still in play.
    """
    if method == "magnitude":
        return np.abs(w)
    if method == "wanda":
        return np.abs(w) * stats.in_norms[None, :]
    sw = 0.5 * w**2 / inv_diag[None, :]
    if method == "sparsegpt":
        return sw
    if method == "d2":
        in_scaled = scaled_norm(stats.in_norms, params.scale, stats.n_tokens)
        out_scaled = scaled_norm(stats.out_norms, params.scale, stats.n_tokens)
        return dual_activation_term(w, in_scaled, out_scaled, params) + sw
    raise ConfigError(f"unknown score method {method!r}")


def _quadratic_error(delta: np.ndarray, h: np.ndarray) -> float:
    return float(np.einsum("ri,ij,rj->", delta, h, delta))


def _relative_recon_error(w_dense: np.ndarray, w_pruned: np.ndarray, h: np.ndarray) -> float:
    """Frobenius error of pruned vs dense outputs on the calibration activations,
    normalized by the dense output norm; computable from H = X X^T alone."""
    num = _quadratic_error(w_pruned - w_dense, h)
    den = _quadratic_error(w_dense, h)
    if den <= 0.0:
        return 0.0 if num <= 0.0 else float("inf")
    return float(np.sqrt(max(num, 0.0) / den))


def _as_override(mask_override, shape) -> np.ndarray | None:
    if mask_override is None:
        return None
    keep = mask_override.keep if isinstance(mask_override, PruneMask) else np.asarray(mask_override)
    keep = keep.astype(bool)
    if keep.shape != shape:
        raise InputError(f"mask override shape {keep.shape} != weight shape {shape}")
    return keep


def prune_layer(
    w,
    stats: LayerStats,
    method: str,
    pattern: SparsityPattern,
    params: DualParams | None = None,
    do_update: bool = True,
    block: int = DEFAULT_BLOCK,
    damping: float = DEFAULT_DAMPING,
    mask_override=None,
    group: str = "row",
    name: str = "layer",
) -> LayerPruneResult:
    """Prune one linear layer, with or without OBS compensation.

    do_update=False zeroes the masked entries and leaves survivors untouched;
    do_update=True runs the sequential block sweep described in the module
    docstring. ``mask_override`` forces the keep mask (so update strategies
    can be compared on identical masks); scoring is skipped in that case.
    """
    w_dense = as_matrix(w, "w")
    if params is None:
        params = DualParams()
    if block < 1:
        raise InputError(f"block must be >= 1, got {block}")
    if stats.n_tokens <= 0:
        raise ConfigError(f"{name}: zero calibration tokens")
    if stats.hessian.shape[0] != w_dense.shape[1]:
        raise ConfigError(
            f"{name}: Hessian dim {stats.hessian.shape[0]} != weight input dim {w_dense.shape[1]}"
        )
    rows, cols = w_dense.shape
    if pattern.kind == "nm" and cols % pattern.m != 0:
        raise InputError(f"{name}: input dim {cols} not divisible by {pattern.m}")
    override = _as_override(mask_override, w_dense.shape)

    if not do_update:
        if override is not None:
            keep = override
        else:
            scores = _full_scores(w_dense, stats, method, params, damping, name)
            keep = select_mask(scores, pattern, group=group).keep
        w_new = np.where(keep, w_dense, 0.0)
        return LayerPruneResult(
            updated_weight=w_new,
            mask=PruneMask(keep=keep, pattern=pattern),
            recon_error=_relative_recon_error(w_dense, w_new, stats.hessian),
            updated=False,
            name=name,
        )

    hinv = damped_inverse(stats.hessian, damping, name=name)
    u = cholesky_lower(hinv, name=f"{name} inverse Hessian").T
    # usq_cumsum[j, j] - usq_cumsum[i-1, j] = diag((H_FF)^-1)[j] for F = {i..n-1},
    # because (H_FF)^-1 = U_FF^T U_FF for the trailing submatrix of U.
    usq_cumsum = np.cumsum(u**2, axis=0)
    full_diag = np.diag(usq_cumsum).copy()
    u_diag_sq = np.diag(u) ** 2

    def remaining_inv_diag(start: int) -> np.ndarray:
        if start == 0:
            return full_diag
        d = full_diag - usq_cumsum[start - 1, :]
        # mathematically d[j] >= U[j,j]^2 > 0 for j >= start; repair fp cancellation
        d = np.maximum(d, u_diag_sq)
        d[:start] = 1.0
        return d

    eff_block = block
    if pattern.kind == "nm":
        eff_block = -(-block // pattern.m) * pattern.m

    w_cur = w_dense.copy()
    keep = np.zeros((rows, cols), dtype=bool)
    prune_target = cols - keep_count(pattern.p, cols)
    pruned_so_far = np.zeros(rows, dtype=int)
    for i1 in range(0, cols, eff_block):
        i2 = min(i1 + eff_block, cols)
        count = i2 - i1
        if override is not None:
            keep[:, i1:i2] = override[:, i1:i2]
        elif pattern.kind == "unstructured":
            scores = _sweep_scores(w_cur, remaining_inv_diag(i1), stats, method, params)
            for r in range(rows):
                remaining = scores[r, i1:]
                keep_rem = remaining.shape[0] - (prune_target - int(pruned_so_far[r]))
                planned = top_keep(remaining, keep_rem)
                keep[r, i1:i2] = planned[:count]
                pruned_so_far[r] += count - int(planned[:count].sum())
        err_block = np.zeros((rows, count))
        for c in range(count):
            j = i1 + c
            if override is None and pattern.kind == "nm" and j % pattern.m == 0:
                scores = _sweep_scores(w_cur, remaining_inv_diag(j), stats, method, params)
                keep_n = pattern.m - pattern.n
                for r in range(rows):
                    keep[r, j : j + pattern.m] = top_keep(scores[r, j : j + pattern.m], keep_n)
            pivot = u[j, j]
            if pivot <= 0:
                raise NumericalError(f"{name}: nonpositive sweep pivot at column {j}")
            col = w_cur[:, j]
            q_col = np.where(keep[:, j], col, 0.0)
            err = (col - q_col) / pivot
            w_cur[:, j + 1 : i2] -= np.outer(err, u[j, j + 1 : i2])
            w_cur[:, j] = q_col
            err_block[:, c] = err
        if i2 < cols:
            w_cur[:, i2:] -= err_block @ u[i1:i2, i2:]

    return LayerPruneResult(
        updated_weight=w_cur,
        mask=PruneMask(keep=keep, pattern=pattern),
        recon_error=_relative_recon_error(w_dense, w_cur, stats.hessian),
        updated=True,
        name=name,
    )
