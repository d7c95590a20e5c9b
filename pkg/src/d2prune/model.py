"""Configurable toy decoder-only transformer with activation taps.

The architecture is pre-norm: LayerNorm feeds both the multi-head attention
block and the two-layer GELU MLP, and each block's output is added back to
the residual stream. Position information comes from fixed sinusoidal
encodings so the weight container holds exactly the named parameter tensors
and nothing else. Activations flow as columns (feature dim x tokens).

Weight containers serialize bit-exactly through the D2PW format
(container_io); tensors are float32 at rest, forward math runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .container_io import read_tensor_file, write_tensor_file
from .errors import InputError, MetadataError, ShapeError
from .linalg import softmax_rows
from .validation import check_token_ids

LN_EPS = 1e-5
_MASK_VALUE = -1e30

# Prunable linear sublayers of one transformer block, in sweep order.
SUBLAYERS = ("wq", "wk", "wv", "wo", "wup", "wdown")
ATTN_SUBLAYERS = ("wq", "wk", "wv", "wo")
MLP_SUBLAYERS = ("wup", "wdown")

_CONFIG_KEYS = ("n_layers", "n_heads", "d_model", "d_ff", "vocab", "max_seq")

__all__ = [
    "ModelConfig",
    "WeightContainer",
    "SublayerTap",
    "LayerTrace",
    "ForwardTrace",
    "SUBLAYERS",
    "ATTN_SUBLAYERS",
    "MLP_SUBLAYERS",
    "sublayer_shapes",
    "generate_weights",
    "forward",
    "save",
    "load",
]


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    vocab: int
    max_seq: int

    def __post_init__(self):
        for name in _CONFIG_KEYS:
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise InputError(f"ModelConfig.{name} must be a positive integer, got {v!r}")
        if self.d_model % self.n_heads != 0:
            raise InputError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_metadata(self) -> dict[str, str]:
        return {k: str(getattr(self, k)) for k in _CONFIG_KEYS}

    @classmethod
    def from_metadata(cls, metadata: dict[str, str]) -> "ModelConfig":
        values = {}
        for k in _CONFIG_KEYS:
            if k not in metadata:
                raise MetadataError(f"metadata missing config key {k!r}")
            try:
                values[k] = int(metadata[k])
            except ValueError as exc:
                raise MetadataError(f"config key {k!r} is not an integer: {metadata[k]!r}") from exc
        try:
            return cls(**values)
        except InputError as exc:
            raise MetadataError(str(exc)) from exc


def sublayer_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """(d_out, d_in) for each prunable sublayer of one block."""
    d, f = config.d_model, config.d_ff
    return {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d), "wup": (f, d), "wdown": (d, f)}


def _expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = config.d_model
    shapes: dict[str, tuple[int, ...]] = {"embed": (config.vocab, d)}
    per_block = sublayer_shapes(config)
    for i in range(config.n_layers):
        shapes[f"blocks.{i}.ln1.g"] = (d,)
        shapes[f"blocks.{i}.ln1.b"] = (d,)
        shapes[f"blocks.{i}.ln2.g"] = (d,)
        shapes[f"blocks.{i}.ln2.b"] = (d,)
        for sub in SUBLAYERS:
            shapes[f"blocks.{i}.{sub}"] = per_block[sub]
    shapes["head"] = (config.vocab, d)
    return shapes


@dataclass
class WeightContainer:
    """All tensors of a toy transformer plus its architecture metadata."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = _expected_shapes(self.config)
        if set(self.tensors) != set(expected):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeError(f"tensor set mismatch: missing={missing} extra={extra}")
        for name, arr in self.tensors.items():
            if tuple(arr.shape) != expected[name]:
                raise ShapeError(
                    f"tensor {name!r} has shape {tuple(arr.shape)}, expected {expected[name]}"
                )
            self.tensors[name] = np.ascontiguousarray(arr, dtype=np.float32)

    def tensor(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def weight(self, layer: int, sub: str) -> np.ndarray:
        return self.tensors[f"blocks.{layer}.{sub}"]

    def replaced(self, updates: dict[str, np.ndarray]) -> "WeightContainer":
        """New container with the named tensors swapped out."""
        tensors = dict(self.tensors)
        for name, arr in updates.items():
            if name not in tensors:
                raise ShapeError(f"unknown tensor {name!r}")
            tensors[name] = arr
        return WeightContainer(self.config, tensors)

    def copy(self) -> "WeightContainer":
        return WeightContainer(self.config, {k: v.copy() for k, v in self.tensors.items()})


@dataclass
class SublayerTap:
    """Input/output activations of one linear sublayer, columns = tokens."""

    x: np.ndarray  # (d_in, T)
    y: np.ndarray  # (d_out, T)


@dataclass
class LayerTrace:
    sublayers: dict[str, SublayerTap]
    attn_probs: np.ndarray  # (n_heads, T, T), rows sum to 1 over the causal prefix


@dataclass
class ForwardTrace:
    logits: np.ndarray  # (T, vocab)
    layers: list[LayerTrace] = field(default_factory=list)


def _position_encoding(n_pos: int, d_model: int) -> np.ndarray:
    """Fixed sinusoidal table, shape (d_model, n_pos)."""
    pos = np.arange(n_pos, dtype=np.float64)
    dim = np.arange(d_model, dtype=np.float64)
    angle = pos[None, :] / np.power(10000.0, (2.0 * (dim[:, None] // 2)) / d_model)
    table = np.where(dim[:, None] % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=0, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=0, keepdims=True)
    return (x - mean) / np.sqrt(var + LN_EPS) * g[:, None] + b[:, None]


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def forward(w: WeightContainer, tokens, capture: bool = False) -> ForwardTrace:
    """Run the model over a token sequence.

    Causal masking restricts position i to attend to positions j <= i. With
    ``capture`` on, the trace records every linear sublayer's input/output
    activations and the post-softmax attention maps; off, only the logits.
    """
    cfg = w.config
    ids = check_token_ids(tokens, cfg.vocab)
    t_len = ids.shape[0]
    if t_len == 0:
        raise InputError("token sequence is empty")
    if t_len > cfg.max_seq:
        raise InputError(f"sequence length {t_len} exceeds max_seq {cfg.max_seq}")

    embed = w.tensor("embed").astype(np.float64)
    h = embed[ids].T + _position_encoding(t_len, cfg.d_model)

    mask = np.triu(np.full((t_len, t_len), _MASK_VALUE), k=1)
    layers: list[LayerTrace] = []
    d_head = cfg.d_head

    for i in range(cfg.n_layers):
        ln1 = _layer_norm(
            h,
            w.tensor(f"blocks.{i}.ln1.g").astype(np.float64),
            w.tensor(f"blocks.{i}.ln1.b").astype(np.float64),
        )
        q = w.weight(i, "wq").astype(np.float64) @ ln1
        k = w.weight(i, "wk").astype(np.float64) @ ln1
        v = w.weight(i, "wv").astype(np.float64) @ ln1

        probs = np.empty((cfg.n_heads, t_len, t_len))
        context = np.empty_like(q)
        for head in range(cfg.n_heads):
            rows = slice(head * d_head, (head + 1) * d_head)
            scores = (q[rows].T @ k[rows]) / np.sqrt(d_head) + mask
            p = softmax_rows(scores)
            probs[head] = p
            context[rows] = v[rows] @ p.T
        attn_out = w.weight(i, "wo").astype(np.float64) @ context
        h = h + attn_out

        ln2 = _layer_norm(
            h,
            w.tensor(f"blocks.{i}.ln2.g").astype(np.float64),
            w.tensor(f"blocks.{i}.ln2.b").astype(np.float64),
        )
        up = w.weight(i, "wup").astype(np.float64) @ ln2
        act = _gelu(up)
        down = w.weight(i, "wdown").astype(np.float64) @ act
        h = h + down

        if capture:
            layers.append(
                LayerTrace(
                    sublayers={
                        "wq": SublayerTap(ln1, q),
                        "wk": SublayerTap(ln1, k),
                        "wv": SublayerTap(ln1, v),
                        "wo": SublayerTap(context, attn_out),
                        "wup": SublayerTap(ln2, up),
                        "wdown": SublayerTap(act, down),
                    },
                    attn_probs=probs,
                )
            )

    logits = (w.tensor("head").astype(np.float64) @ h).T
    return ForwardTrace(logits=logits, layers=layers)


def generate_weights(config: ModelConfig, seed: int, structure: str = "random") -> WeightContainer:
    """Deterministic synthetic weights.

    structure="random" draws dense Gaussians scaled by 1/sqrt(d_in).
    structure="lowrank" builds each linear weight as a rank-ceil(min_dim/8)
    product plus 5% Gaussian noise, so magnitude and saliency rankings have
    real structure instead of being i.i.d.
    """
    if structure not in ("random", "lowrank"):
        raise InputError(f"unknown structure {structure!r}")
    rng = np.random.default_rng([int(seed), 0xD2])
    tensors: dict[str, np.ndarray] = {}
    tensors["embed"] = rng.normal(0.0, 1.0, (config.vocab, config.d_model))

    def linear(shape):
        d_out, d_in = shape
        target_std = 1.0 / np.sqrt(d_in)
        if structure == "random":
            return rng.normal(0.0, target_std, (d_out, d_in))
        rank = -(-min(d_out, d_in) // 8)
        a = rng.normal(0.0, 1.0, (d_out, rank))
        b = rng.normal(0.0, 1.0, (rank, d_in))
        core = (a @ b) * (target_std / np.sqrt(rank))
        noise = rng.normal(0.0, 0.05 * target_std, (d_out, d_in))
        return core + noise

    per_block = sublayer_shapes(config)
    for i in range(config.n_layers):
        tensors[f"blocks.{i}.ln1.g"] = np.ones(config.d_model)
        tensors[f"blocks.{i}.ln1.b"] = np.zeros(config.d_model)
        tensors[f"blocks.{i}.ln2.g"] = np.ones(config.d_model)
        tensors[f"blocks.{i}.ln2.b"] = np.zeros(config.d_model)
        for sub in SUBLAYERS:
            tensors[f"blocks.{i}.{sub}"] = linear(per_block[sub])
    tensors["head"] = rng.normal(0.0, 1.0 / np.sqrt(config.d_model), (config.vocab, config.d_model))
    return WeightContainer(config, tensors)


def save(w: WeightContainer, path) -> None:
    metadata = {"kind": "model", **w.config.to_metadata()}
    # Fixed tensor order: the canonical expected-shape order, for byte stability.
    ordered = {name: w.tensors[name] for name in _expected_shapes(w.config)}
    write_tensor_file(path, metadata, ordered)


def load(path) -> WeightContainer:
    metadata, tensors = read_tensor_file(path)
    if metadata.get("kind") != "model":
        raise MetadataError(f"not a model container (kind={metadata.get('kind')!r})")
    config = ModelConfig.from_metadata(metadata)
    try:
        return WeightContainer(config, tensors)
    except ShapeError as exc:
        raise MetadataError(f"tensor payload inconsistent with config: {exc}") from exc
