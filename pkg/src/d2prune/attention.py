"""Attention-fidelity metrics and the Q/K/V update-configuration searches.

A pruned attention map is compared to the dense one row by row (each causal
prefix is a probability distribution) with KL divergence, and the attention
block outputs with RMSE. Which of q/k/v to leave un-updated is chosen either
by evaluating the three uniform freeze candidates on perplexity (uniform
search) or per layer from dense-weight outlier ratios without any forward
pass (non-uniform search).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .container_io import write_tensor_file
from .errors import InputError
from .model import ForwardTrace, WeightContainer
from .validation import as_matrix

KL_FLOOR = 1e-12

CANDIDATE_ORDER = ("q", "k", "v")
FROZEN_CHOICES = ("none", "q", "k", "v", "all")

__all__ = [
    "KL_FLOOR",
    "CANDIDATE_ORDER",
    "FROZEN_CHOICES",
    "QkvUpdateConfig",
    "AttnFidelity",
    "kl_divergence",
    "attn_kl",
    "outlier_ratio",
    "argmin_candidate",
    "search_uniform",
    "search_nonuniform",
    "export_attention_surfaces",
]


@dataclass(frozen=True)
class QkvUpdateConfig:
    """Per-layer record of which attention projection is frozen (not updated).

    "none" updates all of q/k/v, "all" freezes all three; the output
    projection and MLP weights are always on the update path.
    """

    frozen: tuple[str, ...]

    def __post_init__(self):
        for f in self.frozen:
            if f not in FROZEN_CHOICES:
                raise InputError(f"invalid frozen choice {f!r}")

    @classmethod
    def uniform(cls, frozen: str, n_layers: int) -> "QkvUpdateConfig":
        return cls(frozen=(frozen,) * n_layers)

    @property
    def is_uniform(self) -> bool:
        return len(set(self.frozen)) <= 1

    def frozen_sublayers(self, layer: int) -> frozenset[str]:
        f = self.frozen[layer]
        if f == "none":
            return frozenset()
        if f == "all":
            return frozenset({"wq", "wk", "wv"})
        return frozenset({f"w{f}"})


@dataclass
class AttnFidelity:
    """Row-wise attention KL (nats) and attention-output RMSE vs dense."""

    per_layer_kl: list[float]
    per_layer_rmse: list[float]
    kl: float
    rmse: float


def kl_divergence(p, q, floor: float = KL_FLOOR) -> float:
    """KL(p || q) in nats with an additive floor and renormalization."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InputError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    pf = p + floor
    qf = q + floor
    pf = pf / pf.sum()
    qf = qf / qf.sum()
    return float(np.sum(pf * np.log(pf / qf)))


def attn_kl(dense: ForwardTrace, pruned: ForwardTrace) -> AttnFidelity:
    """Attention fidelity of a pruned trace against the dense one.

    Both traces must come from identical inputs on identically shaped models,
    captured with taps. KL is averaged over rows, heads and layers; RMSE is
    taken over the attention-block output tensors.
    """
    if len(dense.layers) != len(pruned.layers) or not dense.layers:
        raise InputError("traces must be captured with taps on models of equal depth")
    per_layer_kl: list[float] = []
    per_layer_rmse: list[float] = []
    all_kl: list[float] = []
    sq_sum = 0.0
    sq_n = 0
    for d_layer, p_layer in zip(dense.layers, pruned.layers):
        if d_layer.attn_probs.shape != p_layer.attn_probs.shape:
            raise InputError("attention shapes differ between traces")
        rows_kl: list[float] = []
        n_heads, t_len, _ = d_layer.attn_probs.shape
        for h in range(n_heads):
            for t in range(t_len):
                rows_kl.append(
                    kl_divergence(d_layer.attn_probs[h, t, : t + 1], p_layer.attn_probs[h, t, : t + 1])
                )
        d_out = d_layer.sublayers["wo"].y
        p_out = p_layer.sublayers["wo"].y
        if d_out.shape != p_out.shape:
            raise InputError("attention output shapes differ between traces")
        diff_sq = float(np.sum((d_out - p_out) ** 2))
        per_layer_kl.append(math.fsum(rows_kl) / len(rows_kl))
        per_layer_rmse.append(math.sqrt(diff_sq / d_out.size))
        all_kl.extend(rows_kl)
        sq_sum += diff_sq
        sq_n += d_out.size
    return AttnFidelity(
        per_layer_kl=per_layer_kl,
        per_layer_rmse=per_layer_rmse,
        kl=math.fsum(all_kl) / len(all_kl),
        rmse=math.sqrt(sq_sum / sq_n),
    )


def outlier_ratio(w) -> float:
    """Fraction of entries whose magnitude strictly exceeds the mean magnitude."""
    w = as_matrix(w, "w")
    if w.size == 0:
        raise InputError("outlier_ratio needs a nonempty matrix")
    mag = np.abs(w)
    mu = mag.mean()
    return float(np.count_nonzero(mag > mu)) / mag.size


def argmin_candidate(table: dict[str, float]) -> str:
    """Lowest-perplexity candidate among q/k/v, ties broken in that fixed order."""
    best = None
    best_ppl = math.inf
    for cand in CANDIDATE_ORDER:
        if cand not in table:
            raise InputError(f"candidate table missing {cand!r}")
        if table[cand] < best_ppl:
            best = cand
            best_ppl = table[cand]
    return best


def search_uniform(model: WeightContainer, corpus, settings, include_refs: bool = False,
                   stats=None) -> tuple[QkvUpdateConfig, dict[str, float]]:
    """Evaluate the three uniform freeze candidates and return the argmin.

    Each candidate prunes the frozen projection without weight update and
    everything else with compensation, then scores perplexity on the held-out
    evaluation stream. With ``include_refs`` the "none" and "all" reference
    rows are evaluated too, but never win the selection.
    """
    from .pipeline import evaluate_candidate

    table: dict[str, float] = {}
    for cand in CANDIDATE_ORDER:
        table[cand] = evaluate_candidate(model, corpus, settings, cand, stats=stats)
    winner = argmin_candidate(table)
    if include_refs:
        for ref in ("none", "all"):
            table[ref] = evaluate_candidate(model, corpus, settings, ref, stats=stats)
    return QkvUpdateConfig.uniform(winner, model.config.n_layers), table


def search_nonuniform(model: WeightContainer) -> QkvUpdateConfig:
    """Freeze, per layer, the dense projection with the highest outlier ratio.

    Requires no forward passes; ties freeze the earliest of q, k, v.
    """
    frozen = []
    for layer in range(model.config.n_layers):
        ratios = [outlier_ratio(model.weight(layer, f"w{c}")) for c in CANDIDATE_ORDER]
        frozen.append(CANDIDATE_ORDER[int(np.argmax(ratios))])
    return QkvUpdateConfig(frozen=tuple(frozen))


def export_attention_surfaces(path, trace: ForwardTrace) -> None:
    """Dump per-layer per-head post-softmax attention maps for external plotting."""
    if not trace.layers:
        raise InputError("trace has no captured attention surfaces")
    tensors = {}
    for li, layer in enumerate(trace.layers):
        for h in range(layer.attn_probs.shape[0]):
            tensors[f"attn.L{li}.h{h}"] = layer.attn_probs[h]
    write_tensor_file(path, {"kind": "attn"}, tensors)
