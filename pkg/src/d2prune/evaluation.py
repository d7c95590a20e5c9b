"""Perplexity, logit divergence to dense, and the structured run report.

Perplexity uses non-overlapping windows; within each window every token is
scored against its in-window prefix (so the first token of a window is not
scored), probabilities are clamped at 1e-12 before the log, and the final
partial window is dropped. The report serializes deterministically: stable
key order, plain Python floats, and a content digest over all numeric
payloads.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .attention import KL_FLOOR, kl_divergence
from .errors import InputError
from .model import ForwardTrace, WeightContainer, forward

TOOLKIT_VERSION = "0.1.0"
REPORT_FORMAT = "d2prune-report-v1"
NLL_FLOOR = 1e-12

CSV_HEADER = ["layer", "sublayer", "method", "sparsity", "recon_error", "kl", "rmse"]

__all__ = [
    "TOOLKIT_VERSION",
    "REPORT_FORMAT",
    "CSV_HEADER",
    "EvalResult",
    "RunReport",
    "perplexity",
    "logit_divergence",
    "emit_report",
    "read_report",
    "report_digest",
]


@dataclass
class EvalResult:
    ppl: float
    logit_kl: float = 0.0
    n_tokens: int = 0
    windows: int = 0

    def to_dict(self) -> dict:
        return {
            "ppl": float(self.ppl),
            "logit_kl": float(self.logit_kl),
            "n_tokens": int(self.n_tokens),
            "windows": int(self.windows),
        }


def _stream_tokens(stream) -> np.ndarray:
    tokens = getattr(stream, "tokens", stream)
    return np.asarray(tokens, dtype=np.int64)


def perplexity(model: WeightContainer, stream, window: int) -> EvalResult:
    """exp of the mean per-token negative log-likelihood over windowed forwards."""
    tokens = _stream_tokens(stream)
    if window < 2:
        raise InputError(f"window must be >= 2 to score any token, got {window}")
    if window > model.config.max_seq:
        raise InputError(f"window {window} exceeds model max_seq {model.config.max_seq}")
    if tokens.shape[0] < window:
        raise InputError(f"stream has {tokens.shape[0]} tokens, shorter than one window ({window})")
    n_windows = tokens.shape[0] // window
    nlls: list[float] = []
    for wi in range(n_windows):
        ids = tokens[wi * window : (wi + 1) * window]
        logits = forward(model, ids).logits
        shifted = logits - logits.max(axis=1, keepdims=True)
        logprobs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        targets = ids[1:]
        token_logprobs = logprobs[np.arange(window - 1), targets]
        nlls.extend(-np.maximum(token_logprobs, math.log(NLL_FLOOR)))
    mean_nll = math.fsum(nlls) / len(nlls)
    return EvalResult(ppl=math.exp(mean_nll), n_tokens=len(nlls), windows=n_windows)


def logit_divergence(dense: ForwardTrace, pruned: ForwardTrace) -> float:
    """Mean per-position KL of dense vs pruned next-token distributions (nats)."""
    if dense.logits.shape != pruned.logits.shape:
        raise InputError(
            f"logit shapes differ: {dense.logits.shape} vs {pruned.logits.shape}"
        )
    def rows_softmax(logits):
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    p = rows_softmax(dense.logits)
    q = rows_softmax(pruned.logits)
    kls = [kl_divergence(p[t], q[t], floor=KL_FLOOR) for t in range(p.shape[0])]
    return math.fsum(kls) / len(kls)


@dataclass
class RunReport:
    """Everything one pruning run produced, ready for deterministic serialization."""

    config: dict[str, Any]
    layers: list[dict[str, Any]]
    sparsity: dict[str, Any]
    attention: dict[str, Any]
    evals: dict[str, Any]
    qkv: dict[str, Any]
    toolkit_version: str = TOOLKIT_VERSION
    extras: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        body = {
            "format": REPORT_FORMAT,
            "toolkit_version": self.toolkit_version,
            "config": self.config,
            "layers": self.layers,
            "sparsity": self.sparsity,
            "attention": self.attention,
            "eval": self.evals,
            "qkv": self.qkv,
        }
        if self.extras:
            body["extras"] = self.extras
        body["digest"] = report_digest(body)
        return body


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def report_digest(body: dict) -> str:
    """sha256 over the canonical serialization of everything but the digest itself."""
    payload = {k: v for k, v in body.items() if k != "digest"}
    return hashlib.sha256(_canonical_json(payload).encode("utf-8")).hexdigest()


def _csv_text(report: dict) -> str:
    per_layer_attn = {row["layer"]: row for row in report["attention"].get("per_layer", [])}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in report["layers"]:
        attn = per_layer_attn.get(row["layer"], {})
        writer.writerow(
            [
                row["layer"],
                row["sublayer"],
                row["method"],
                row["achieved_sparsity"],
                row["recon_error"],
                attn.get("kl", ""),
                attn.get("rmse", ""),
            ]
        )
    return buf.getvalue()


def emit_report(report: RunReport, path) -> str:
    """Write the JSON report plus the flat CSV next to it; returns the CSV path."""
    body = report.to_dict()
    text = json.dumps(body, sort_keys=True, indent=2) + "\n"
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    csv_path = str(path)
    csv_path = csv_path[: -len(".json")] + ".csv" if csv_path.endswith(".json") else csv_path + ".csv"
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(_csv_text(body))
    return csv_path


def read_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        body = json.load(f)
    if body.get("format") != REPORT_FORMAT:
        raise InputError(f"not a {REPORT_FORMAT} file")
    if body.get("digest") != report_digest(body):
        raise InputError("report digest mismatch: file was modified")
    return body
