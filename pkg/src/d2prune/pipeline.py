"""End-to-end pruning runs and the estimator facade.

`run` binds the whole flow: resolve the Q/K/V update configuration, prune
every linear sublayer (one-shot from a single dense capture, or sequentially
with per-block recapture), then measure sparsity, perplexity, logit
divergence and attention fidelity against the dense model. `D2Pruner` wraps
it in a scikit-learn style fit/transform surface so the toolkit composes
with that ecosystem: fit() binds a model to a calibration corpus,
transform() returns the pruned weight container.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .attention import (
    AttnFidelity,
    QkvUpdateConfig,
    attn_kl,
    search_nonuniform,
    search_uniform,
)
from .calibration import (
    CalibStats,
    Corpus,
    LayerStats,
    ScaleSpec,
    accumulate,
    block_stats,
    sample_slices,
)
from .errors import ConfigError, InputError
from .evaluation import EvalResult, RunReport, logit_divergence, perplexity
from .model import ATTN_SUBLAYERS, SUBLAYERS, WeightContainer, forward
from .scoring import DualParams
from .solver import DEFAULT_BLOCK, DEFAULT_DAMPING, LayerPruneResult, prune_layer
from .sparsity import PruneMask, SparsityPattern, verify

METHODS = ("magnitude", "wanda", "sparsegpt", "d2prune")
QKV_MODES = ("all", "none", "no-q", "no-k", "no-v", "dynamic", "nonuniform")
CALIB_MODES = ("sequential", "oneshot")

__all__ = [
    "METHODS",
    "QKV_MODES",
    "CALIB_MODES",
    "PruneSettings",
    "PruneOutcome",
    "prune_model",
    "evaluate_candidate",
    "resolve_qkv",
    "run",
    "D2Pruner",
]


@dataclass(frozen=True)
class PruneSettings:
    """Validated knobs of one pruning run."""

    method: str = "d2prune"
    pattern: SparsityPattern = field(default_factory=lambda: SparsityPattern.unstructured(0.5))
    params: DualParams = field(default_factory=DualParams)
    qkv: str = "dynamic"
    calib_mode: str = "sequential"
    block: int = DEFAULT_BLOCK
    damping: float = DEFAULT_DAMPING
    n_samples: int = 128
    seq_len: int = 32
    eval_window: int | None = None
    eval_windows: int = 4
    group: str = "row"
    include_ref_rows: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r} (choose from {METHODS})")
        if self.qkv not in QKV_MODES:
            raise ConfigError(f"unknown qkv mode {self.qkv!r} (choose from {QKV_MODES})")
        if self.calib_mode not in CALIB_MODES:
            raise ConfigError(f"unknown calibration mode {self.calib_mode!r}")
        if self.damping < 0:
            raise ConfigError(f"damping must be >= 0, got {self.damping}")

    def window(self, max_seq: int) -> int:
        return self.eval_window if self.eval_window is not None else min(self.seq_len, max_seq)


def _score_method(method: str) -> str:
    return "d2" if method == "d2prune" else method


def _sublayer_plan(method: str, frozen: frozenset[str], sub: str) -> tuple[str, bool]:
    """(score method, do_update) for one sublayer under the given frozen set."""
    if method in ("wanda", "magnitude"):
        return method, False
    score = _score_method(method)
    if sub in ATTN_SUBLAYERS and sub in frozen:
        return score, False
    return score, True


def _with_dense_out_norms(ls: LayerStats, dense: LayerStats) -> LayerStats:
    return LayerStats(
        hessian=ls.hessian,
        in_norms=ls.in_norms,
        out_norms=dense.out_norms,
        n_tokens=ls.n_tokens,
    )


def prune_model(
    model: WeightContainer,
    corpus: Corpus,
    settings: PruneSettings,
    qkv_config: QkvUpdateConfig,
    stats: CalibStats | None = None,
) -> tuple[WeightContainer, list[LayerPruneResult]]:
    """Prune every linear sublayer of the model per the settings and Q/K/V config.

    One-shot mode scores every layer from a single dense capture (``stats``
    may supply it precomputed). Sequential mode walks blocks in order,
    recapturing Hessians and input norms from the partially pruned model;
    output norms always come from the initial dense pass.
    """
    cfg = model.config
    if len(qkv_config.frozen) != cfg.n_layers:
        raise ConfigError(
            f"qkv config covers {len(qkv_config.frozen)} layers, model has {cfg.n_layers}"
        )
    results: list[LayerPruneResult] = []

    def prune_one(weight: np.ndarray, ls: LayerStats, layer: int, sub: str) -> LayerPruneResult:
        score, do_update = _sublayer_plan(settings.method, qkv_config.frozen_sublayers(layer), sub)
        return prune_layer(
            weight.astype(np.float64),
            ls,
            score,
            settings.pattern,
            settings.params,
            do_update=do_update,
            block=settings.block,
            damping=settings.damping,
            group=settings.group,
            name=f"blocks.{layer}.{sub}",
        )

    if settings.calib_mode == "oneshot":
        if stats is None:
            stats = accumulate(model, corpus, settings.n_samples, settings.seq_len)
        updates: dict[str, np.ndarray] = {}
        for layer in range(cfg.n_layers):
            for sub in SUBLAYERS:
                name = f"blocks.{layer}.{sub}"
                res = prune_one(model.weight(layer, sub), stats.for_layer(name), layer, sub)
                updates[name] = res.updated_weight
                results.append(res)
        return model.replaced(updates), results

    samples = sample_slices(corpus, settings.n_samples, settings.seq_len)
    if settings.seq_len > cfg.max_seq:
        raise InputError(f"seq_len {settings.seq_len} exceeds model max_seq {cfg.max_seq}")
    dense_stats = stats if stats is not None else accumulate(
        model, corpus, settings.n_samples, settings.seq_len
    )
    current = model
    for layer in range(cfg.n_layers):
        bstats = block_stats(current, samples, layer)
        updates = {}
        for sub in SUBLAYERS:
            name = f"blocks.{layer}.{sub}"
            ls = _with_dense_out_norms(bstats[sub], dense_stats.for_layer(name))
            res = prune_one(current.weight(layer, sub), ls, layer, sub)
            updates[name] = res.updated_weight
            results.append(res)
        current = current.replaced(updates)
    return current, results


def eval_stream(corpus: Corpus, settings: PruneSettings, max_seq: int) -> np.ndarray:
    """Held-out slice of the corpus right after the calibration tokens."""
    window = settings.window(max_seq)
    start = settings.n_samples * settings.seq_len
    need = settings.eval_windows * window
    tokens = corpus.tokens[start : start + need]
    if tokens.shape[0] < window:
        raise InputError(
            f"corpus too short for held-out evaluation: need >= {start + window} tokens, "
            f"have {len(corpus)}"
        )
    return tokens


def evaluate_candidate(
    model: WeightContainer,
    corpus: Corpus,
    settings: PruneSettings,
    frozen: str,
    stats: CalibStats | None = None,
) -> float:
    """Perplexity of the model pruned under one uniform freeze candidate."""
    config = QkvUpdateConfig.uniform(frozen, model.config.n_layers)
    pruned, _ = prune_model(model, corpus, settings, config, stats=stats)
    stream = eval_stream(corpus, settings, model.config.max_seq)
    return perplexity(pruned, stream, settings.window(model.config.max_seq)).ppl


def resolve_qkv(
    model: WeightContainer,
    corpus: Corpus,
    settings: PruneSettings,
    stats: CalibStats | None = None,
) -> tuple[QkvUpdateConfig, dict[str, float] | None]:
    """Turn the qkv mode into a per-layer config, searching when asked to."""
    n = model.config.n_layers
    mode = settings.qkv
    if settings.method in ("wanda", "magnitude") or mode == "all":
        return QkvUpdateConfig.uniform("none", n), None
    if mode == "none":
        return QkvUpdateConfig.uniform("all", n), None
    if mode in ("no-q", "no-k", "no-v"):
        return QkvUpdateConfig.uniform(mode[-1], n), None
    if mode == "nonuniform":
        return search_nonuniform(model), None
    return search_uniform(model, corpus, settings, include_refs=settings.include_ref_rows,
                          stats=stats)


@dataclass
class PruneOutcome:
    pruned: WeightContainer
    results: list[LayerPruneResult]
    masks: dict[str, PruneMask]
    qkv_config: QkvUpdateConfig
    candidates: dict[str, float] | None
    fidelity: AttnFidelity
    eval_dense: EvalResult
    eval_pruned: EvalResult
    report: RunReport


def _global_sparsity(masks: dict[str, PruneMask]) -> float:
    kept = sum(int(m.keep.sum()) for m in masks.values())
    total = sum(m.keep.size for m in masks.values())
    return 1.0 - kept / total


def run(
    model: WeightContainer,
    corpus: Corpus,
    settings: PruneSettings,
    stats: CalibStats | None = None,
    config_echo: dict[str, Any] | None = None,
) -> PruneOutcome:
    """Full pipeline: resolve Q/K/V, prune, verify, evaluate, assemble the report."""
    cfg = model.config
    if stats is None:
        # one dense capture serves one-shot scoring directly and supplies the
        # dense output norms that sequential mode reuses per candidate
        stats = accumulate(model, corpus, settings.n_samples, settings.seq_len)
    qkv_config, candidates = resolve_qkv(model, corpus, settings, stats=stats)
    pruned, results = prune_model(model, corpus, settings, qkv_config, stats=stats)
    masks = {res.name: res.mask for res in results}

    window = settings.window(cfg.max_seq)
    stream = eval_stream(corpus, settings, cfg.max_seq)
    eval_dense = perplexity(model, stream, window)
    eval_pruned = perplexity(pruned, stream, window)

    n_windows = stream.shape[0] // window
    kls = []
    for wi in range(n_windows):
        ids = stream[wi * window : (wi + 1) * window]
        kls.append(logit_divergence(forward(model, ids), forward(pruned, ids)))
    eval_pruned.logit_kl = math.fsum(kls) / len(kls)

    probe = stream[:window]
    fidelity = attn_kl(forward(model, probe, capture=True), forward(pruned, probe, capture=True))

    report = _build_report(
        settings, corpus, cfg, results, masks, qkv_config, candidates,
        fidelity, eval_dense, eval_pruned, config_echo,
    )
    return PruneOutcome(
        pruned=pruned,
        results=results,
        masks=masks,
        qkv_config=qkv_config,
        candidates=candidates,
        fidelity=fidelity,
        eval_dense=eval_dense,
        eval_pruned=eval_pruned,
        report=report,
    )


def _build_report(settings, corpus, cfg, results, masks, qkv_config, candidates,
                  fidelity, eval_dense, eval_pruned, config_echo) -> RunReport:
    config: dict[str, Any] = {
        "method": settings.method,
        "pattern": settings.pattern.describe(),
        "target_sparsity": settings.pattern.target_sparsity(),
        "lambda1": settings.params.lambda1,
        "lambda2": settings.params.lambda2,
        "scale_mode": settings.params.scale.mode,
        "scale_s": settings.params.scale.s,
        "qkv_mode": settings.qkv,
        "calib_mode": settings.calib_mode,
        "block": settings.block,
        "damping": settings.damping,
        "n_samples": settings.n_samples,
        "seq_len": settings.seq_len,
        "eval_window": settings.window(cfg.max_seq),
        "eval_windows": settings.eval_windows,
        "group": settings.group,
        "corpus": {
            "vocab": corpus.vocab,
            "length": len(corpus),
            "seed": corpus.seed,
            "generator": corpus.generator,
        },
        "model": {k: v for k, v in cfg.to_metadata().items()},
    }
    if config_echo:
        config["run"] = dict(sorted(config_echo.items()))

    layer_rows = []
    violations = 0
    for res in results:
        rep = verify(res.mask)
        violations += len(rep.violations)
        _, layer_str, sub = res.name.split(".")
        layer_rows.append(
            {
                "layer": int(layer_str),
                "sublayer": sub,
                "method": f"{_score_method(settings.method)}-{'update' if res.updated else 'noupdate'}",
                "do_update": res.updated,
                "achieved_sparsity": rep.global_sparsity,
                "recon_error": res.recon_error,
            }
        )

    attention = {
        "kl": fidelity.kl,
        "rmse": fidelity.rmse,
        "per_layer": [
            {"layer": i, "kl": k, "rmse": r}
            for i, (k, r) in enumerate(zip(fidelity.per_layer_kl, fidelity.per_layer_rmse))
        ],
    }
    qkv = {
        "mode": settings.qkv,
        "frozen": list(qkv_config.frozen),
        "candidates": candidates,
    }
    sparsity = {
        "global": _global_sparsity(masks),
        "target": settings.pattern.target_sparsity(),
        "violations": violations,
    }
    return RunReport(
        config=config,
        layers=layer_rows,
        sparsity=sparsity,
        attention=attention,
        evals={"dense": eval_dense.to_dict(), "pruned": eval_pruned.to_dict()},
        qkv=qkv,
    )


class D2Pruner(BaseEstimator, TransformerMixin):
    """Estimator-style front: fit on (model, corpus), transform the model.

    Parameters mirror PruneSettings; ``pattern`` accepts "n:m" strings and
    overrides ``sparsity`` when given. After fit_transform the run artifacts
    are available as attributes: report_, results_, masks_, qkv_config_,
    candidates_, fidelity_, eval_dense_, eval_pruned_.
    """

    def __init__(self, method="d2prune", sparsity=0.5, pattern=None, lambda1=1.0,
                 lambda2=0.0, scale_mode="fixed", scale_s=1500.0, qkv="dynamic",
                 calib_mode="sequential", block=DEFAULT_BLOCK, damping=DEFAULT_DAMPING,
                 n_samples=128, seq_len=32, eval_window=None, eval_windows=4,
                 group="row", include_ref_rows=False):
        self.method = method
        self.sparsity = sparsity
        self.pattern = pattern
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.scale_mode = scale_mode
        self.scale_s = scale_s
        self.qkv = qkv
        self.calib_mode = calib_mode
        self.block = block
        self.damping = damping
        self.n_samples = n_samples
        self.seq_len = seq_len
        self.eval_window = eval_window
        self.eval_windows = eval_windows
        self.group = group
        self.include_ref_rows = include_ref_rows

    def settings(self) -> PruneSettings:
        pattern = (
            SparsityPattern.parse(str(self.pattern))
            if self.pattern is not None
            else SparsityPattern.unstructured(self.sparsity)
        )
        return PruneSettings(
            method=self.method,
            pattern=pattern,
            params=DualParams(
                lambda1=self.lambda1,
                lambda2=self.lambda2,
                scale=ScaleSpec(s=self.scale_s, mode=self.scale_mode),
            ),
            qkv=self.qkv,
            calib_mode=self.calib_mode,
            block=self.block,
            damping=self.damping,
            n_samples=self.n_samples,
            seq_len=self.seq_len,
            eval_window=self.eval_window,
            eval_windows=self.eval_windows,
            group=self.group,
            include_ref_rows=self.include_ref_rows,
        )

    def fit(self, X, y=None):
        """Bind the model (X) to a calibration corpus (y) and precompute stats."""
        if not isinstance(X, WeightContainer):
            raise ConfigError("X must be a WeightContainer")
        if not isinstance(y, Corpus):
            raise ConfigError("y must be a calibration Corpus")
        settings = self.settings()
        self.settings_ = settings
        self.corpus_ = y
        self.model_config_ = X.config
        self.stats_ = accumulate(X, y, settings.n_samples, settings.seq_len)
        return self

    def transform(self, X) -> WeightContainer:
        if not hasattr(self, "settings_"):
            raise ConfigError("D2Pruner is not fitted; call fit(model, corpus) first")
        if not isinstance(X, WeightContainer) or X.config != self.model_config_:
            raise ConfigError("transform expects the model the pruner was fitted on")
        outcome = run(X, self.corpus_, self.settings_, stats=self.stats_,
                      config_echo=self.get_params())
        self.report_ = outcome.report
        self.results_ = outcome.results
        self.masks_ = outcome.masks
        self.qkv_config_ = outcome.qkv_config
        self.candidates_ = outcome.candidates
        self.fidelity_ = outcome.fidelity
        self.eval_dense_ = outcome.eval_dense
        self.eval_pruned_ = outcome.eval_pruned
        return outcome.pruned
