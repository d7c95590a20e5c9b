"""Synthetic calibration corpora, activation capture and statistic accumulation.

The Hessian of a linear sublayer is the Gram matrix of its input activations
(H = X X^T summed over every calibration token); in/out norms are the
per-dimension L2 norms over the same tokens. Per-sample partial sums come
from dense matrix products; combining them across samples uses exact (fsum)
accumulation, so statistics are bit-exactly invariant to sample ordering and
doubling the calibration set doubles H elementwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .container_io import read_tensor_file, write_tensor_file
from .errors import ConfigError, InputError, MetadataError
from .model import SUBLAYERS, WeightContainer, forward

DEFAULT_SCALE = 1500.0
SEQLEN_SCALE_THRESHOLD = 1024

__all__ = [
    "Corpus",
    "gen_corpus",
    "LayerStats",
    "CalibStats",
    "accumulate",
    "block_stats",
    "ScaleSpec",
    "default_scale",
    "scaled_norm",
    "fit_activation_shift",
    "activation_shift_report",
    "save_stats",
    "load_stats",
]


@dataclass(frozen=True)
class Corpus:
    """A deterministic synthetic token stream."""

    vocab: int
    tokens: np.ndarray
    seed: int
    generator: str

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


def _markov2_row(seed: int, a: int, b: int, vocab: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), 0xC0, int(a), int(b)])
    weights = rng.gamma(0.3, size=vocab) + 1e-12
    return weights / weights.sum()


def gen_corpus(vocab: int, length: int, seed: int, generator: str = "markov2") -> Corpus:
    """Generate a token stream.

    markov2 draws each token from a seeded order-2 transition table, giving
    the toy model inputs with nonuniform statistics; uniform draws i.i.d.
    """
    if vocab < 2:
        raise InputError(f"vocab must be >= 2, got {vocab}")
    if length < 0:
        raise InputError(f"length must be >= 0, got {length}")
    if generator == "uniform":
        rng = np.random.default_rng([int(seed), 0xC1])
        tokens = rng.integers(0, vocab, size=length, dtype=np.int64)
    elif generator == "markov2":
        rng = np.random.default_rng([int(seed), 0xC1])
        tokens = np.empty(length, dtype=np.int64)
        rows: dict[tuple[int, int], np.ndarray] = {}
        for i in range(length):
            if i < 2:
                tokens[i] = rng.integers(0, vocab)
                continue
            key = (int(tokens[i - 2]), int(tokens[i - 1]))
            if key not in rows:
                rows[key] = _markov2_row(seed, key[0], key[1], vocab)
            tokens[i] = rng.choice(vocab, p=rows[key])
    else:
        raise InputError(f"unknown generator {generator!r}")
    tokens.setflags(write=False)
    return Corpus(vocab=vocab, tokens=tokens, seed=int(seed), generator=generator)


@dataclass
class LayerStats:
    """Accumulated input statistics for one linear sublayer."""

    hessian: np.ndarray  # (d_in, d_in)
    in_norms: np.ndarray  # (d_in,)
    out_norms: np.ndarray  # (d_out,)
    n_tokens: int


@dataclass
class CalibStats:
    """Per-sublayer statistics keyed by tensor name (e.g. "blocks.0.wq")."""

    layers: dict[str, LayerStats] = field(default_factory=dict)
    n_tokens: int = 0

    def for_layer(self, name: str) -> LayerStats:
        if name not in self.layers:
            raise ConfigError(f"no calibration statistics for sublayer {name!r}")
        return self.layers[name]


def _fsum_stack(parts: list[np.ndarray]) -> np.ndarray:
    """Exact elementwise sum of equally shaped arrays (order-independent)."""
    if len(parts) == 1:
        return parts[0].astype(np.float64)
    stack = np.stack(parts)
    flat = stack.reshape(stack.shape[0], -1)
    out = np.array([math.fsum(flat[:, k]) for k in range(flat.shape[1])])
    return out.reshape(parts[0].shape)


def sample_slices(corpus: Corpus, n_samples: int, seq_len: int) -> list[np.ndarray]:
    """Split the leading corpus tokens into n_samples sequences of seq_len."""
    if n_samples < 1 or seq_len < 1:
        raise InputError("n_samples and seq_len must be >= 1")
    needed = n_samples * seq_len
    if needed > len(corpus):
        raise InputError(
            f"corpus too short: need {needed} tokens ({n_samples} x {seq_len}), have {len(corpus)}"
        )
    return [corpus.tokens[s * seq_len : (s + 1) * seq_len] for s in range(n_samples)]


def _stats_from_taps(xs: list[np.ndarray], ys: list[np.ndarray]) -> LayerStats:
    grams = [x @ x.T for x in xs]
    in_sq = [np.einsum("ij,ij->i", x, x) for x in xs]
    out_sq = [np.einsum("ij,ij->i", y, y) for y in ys]
    hessian = _fsum_stack(grams)
    return LayerStats(
        hessian=(hessian + hessian.T) / 2.0,
        in_norms=np.sqrt(_fsum_stack(in_sq)),
        out_norms=np.sqrt(_fsum_stack(out_sq)),
        n_tokens=sum(x.shape[1] for x in xs),
    )


def accumulate(model: WeightContainer, corpus: Corpus, n_samples: int, seq_len: int) -> CalibStats:
    """Dense one-shot capture: statistics for every sublayer from one pass.

    Output norms are taken from the same dense pass, before any pruning.
    """
    if seq_len > model.config.max_seq:
        raise InputError(f"seq_len {seq_len} exceeds model max_seq {model.config.max_seq}")
    if corpus.vocab != model.config.vocab:
        raise InputError(f"corpus vocab {corpus.vocab} != model vocab {model.config.vocab}")
    samples = sample_slices(corpus, n_samples, seq_len)
    taps: dict[str, tuple[list[np.ndarray], list[np.ndarray]]] = {}
    for ids in samples:
        trace = forward(model, ids, capture=True)
        for li, layer in enumerate(trace.layers):
            for sub in SUBLAYERS:
                tap = layer.sublayers[sub]
                xs, ys = taps.setdefault(f"blocks.{li}.{sub}", ([], []))
                xs.append(tap.x)
                ys.append(tap.y)
    stats = CalibStats()
    for name, (xs, ys) in taps.items():
        stats.layers[name] = _stats_from_taps(xs, ys)
    stats.n_tokens = len(samples) * samples[0].shape[0]
    return stats


def block_stats(model: WeightContainer, samples: list[np.ndarray], layer: int) -> dict[str, LayerStats]:
    """Statistics for one transformer block under the model's current weights."""
    taps: dict[str, tuple[list[np.ndarray], list[np.ndarray]]] = {
        sub: ([], []) for sub in SUBLAYERS
    }
    for ids in samples:
        trace = forward(model, ids, capture=True)
        for sub in SUBLAYERS:
            tap = trace.layers[layer].sublayers[sub]
            taps[sub][0].append(tap.x)
            taps[sub][1].append(tap.y)
    return {sub: _stats_from_taps(xs, ys) for sub, (xs, ys) in taps.items()}


@dataclass(frozen=True)
class ScaleSpec:
    """Magnitude scaling applied to activation norms inside saliency scores."""

    s: float = DEFAULT_SCALE
    mode: str = "fixed"  # "fixed" | "seqlen"

    def __post_init__(self):
        if self.mode not in ("fixed", "seqlen"):
            raise InputError(f"unknown scale mode {self.mode!r}")
        if not self.s > 0:
            raise InputError(f"scale s must be > 0, got {self.s}")


def default_scale(seq_len: int) -> ScaleSpec:
    """Fixed s=1500 at desk scale; seqlen mode once sequences reach 1024 tokens."""
    if seq_len >= SEQLEN_SCALE_THRESHOLD:
        return ScaleSpec(s=float(seq_len), mode="seqlen")
    return ScaleSpec()


def scaled_norm(norm, spec: ScaleSpec, n_tokens: int | None = None):
    """(norm^2 / s)^(1/2); seqlen mode substitutes the accumulated token count for s.

    Accepts scalars or arrays; monotone increasing in norm for any fixed spec.
    """
    norm = np.asarray(norm, dtype=np.float64)
    if np.any(norm < 0):
        raise InputError("norms must be nonnegative")
    if spec.mode == "seqlen":
        if n_tokens is None or n_tokens < 1:
            raise ConfigError("seqlen scale mode needs the accumulated token count")
        s = float(n_tokens)
    else:
        s = spec.s
    out = np.sqrt(norm**2 / s)
    return float(out) if out.ndim == 0 else out


def fit_activation_shift(base, delta) -> tuple[float, float | None]:
    """Linear-shift fit of delta against base.

    The slope comes from the through-origin least-squares fit (the modeled
    relationship passes through zero); goodness of fit is the squared
    correlation between base and delta, which lives in [0, 1]. A zero-variance
    side makes R^2 undefined and is reported as None, never an error.
    """
    base = np.asarray(base, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if base.shape != delta.shape or base.ndim != 1 or base.size == 0:
        raise InputError("base and delta must be equal-length nonempty vectors")
    denom = math.fsum(base * base)
    lam = math.fsum(base * delta) / denom if denom > 0 else 0.0
    base_c = base - math.fsum(base) / base.size
    delta_c = delta - math.fsum(delta) / delta.size
    sxx = math.fsum(base_c * base_c)
    syy = math.fsum(delta_c * delta_c)
    sxy = math.fsum(base_c * delta_c)
    if sxx == 0.0 or syy == 0.0:
        return lam, None
    return lam, min(1.0, (sxy * sxy) / (sxx * syy))


@dataclass
class ShiftFit:
    layer: int
    lam_hat: float
    r2: float | None
    n_points: int


def _layer_input_rms(model: WeightContainer, corpus: Corpus, n_samples: int, seq_len: int) -> list[np.ndarray]:
    """Per layer: per-dimension RMS of each distinct sublayer input, concatenated."""
    stats = accumulate(model, corpus, n_samples, seq_len)
    out = []
    for li in range(model.config.n_layers):
        parts = []
        for sub in ("wq", "wo", "wup", "wdown"):
            ls = stats.for_layer(f"blocks.{li}.{sub}")
            parts.append(ls.in_norms / np.sqrt(ls.n_tokens))
        out.append(np.concatenate(parts))
    return out


def activation_shift_report(
    model: WeightContainer,
    corpus_a: Corpus,
    corpus_b: Corpus,
    n_samples: int | None = None,
    seq_len: int | None = None,
) -> list[ShiftFit]:
    """Per-layer linearity measurement of activation-magnitude shift.

    For each transformer layer, fits delta-RMS (corpus B minus corpus A)
    against the corpus-A RMS across the layer's input dimensions and reports
    the slope and goodness of fit.
    """
    if seq_len is None:
        seq_len = min(model.config.max_seq, len(corpus_a), len(corpus_b))
    if n_samples is None:
        n_samples = min(len(corpus_a), len(corpus_b)) // seq_len
    rms_a = _layer_input_rms(model, corpus_a, n_samples, seq_len)
    rms_b = _layer_input_rms(model, corpus_b, n_samples, seq_len)
    report = []
    for li, (a, b) in enumerate(zip(rms_a, rms_b)):
        lam, r2 = fit_activation_shift(a, b - a)
        report.append(ShiftFit(layer=li, lam_hat=lam, r2=r2, n_points=a.size))
    return report


def save_stats(stats: CalibStats, path) -> None:
    """Cache statistics in the tensor container format (float32 at rest)."""
    metadata = {"kind": "stats", "n_tokens": str(stats.n_tokens)}
    tensors: dict[str, np.ndarray] = {}
    for name in sorted(stats.layers):
        ls = stats.layers[name]
        tensors[f"stats.{name}.hessian"] = ls.hessian
        tensors[f"stats.{name}.in_norms"] = ls.in_norms
        tensors[f"stats.{name}.out_norms"] = ls.out_norms
        tensors[f"stats.{name}.n_tokens"] = np.array([ls.n_tokens], dtype=np.float64)
    write_tensor_file(path, metadata, tensors)


def load_stats(path) -> CalibStats:
    metadata, tensors = read_tensor_file(path)
    if metadata.get("kind") != "stats":
        raise MetadataError(f"not a statistics cache (kind={metadata.get('kind')!r})")
    stats = CalibStats(n_tokens=int(metadata.get("n_tokens", "0")))
    names = sorted({k.split(".", 1)[1].rsplit(".", 1)[0] for k in tensors})
    for name in names:
        try:
            stats.layers[name] = LayerStats(
                hessian=tensors[f"stats.{name}.hessian"].astype(np.float64),
                in_norms=tensors[f"stats.{name}.in_norms"].astype(np.float64),
                out_norms=tensors[f"stats.{name}.out_norms"].astype(np.float64),
                n_tokens=int(tensors[f"stats.{name}.n_tokens"][0]),
            )
        except KeyError as exc:
            raise MetadataError(f"statistics cache missing tensor for {name!r}: {exc}") from exc
    return stats
