"""Mask selection from saliency scores and exact-sparsity verification.

Unstructured selection keeps the top ceil((1-p) * width) entries of each
comparison group (an output row by default); n:m selection keeps the top
m - n entries of every aligned m-wide group along the input dimension. Ties
are broken toward lower column indices via a stable sort, so selection is
deterministic and invariant to positive monotone transforms of the scores
within a group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .container_io import write_tensor_file
from .errors import InputError
from .validation import as_matrix

_CEIL_GUARD = 1e-9

__all__ = [
    "SparsityPattern",
    "PruneMask",
    "SparsityReport",
    "keep_count",
    "top_keep",
    "select_mask",
    "verify",
    "export_masks",
]


@dataclass(frozen=True)
class SparsityPattern:
    """Either unstructured p-fraction pruning or n-of-every-m along the input dim."""

    kind: str  # "unstructured" | "nm"
    p: float = 0.0
    n: int = 0
    m: int = 0

    def __post_init__(self):
        if self.kind == "unstructured":
            if not 0.0 <= self.p < 1.0:
                raise InputError(f"unstructured fraction must be in [0, 1), got {self.p}")
        elif self.kind == "nm":
            if not (1 <= self.n < self.m):
                raise InputError(f"n:m pattern needs 1 <= n < m, got {self.n}:{self.m}")
        else:
            raise InputError(f"unknown pattern kind {self.kind!r}")

    @classmethod
    def unstructured(cls, p: float) -> "SparsityPattern":
        return cls(kind="unstructured", p=float(p))

    @classmethod
    def nm(cls, n: int, m: int) -> "SparsityPattern":
        return cls(kind="nm", n=int(n), m=int(m))

    @classmethod
    def parse(cls, text: str) -> "SparsityPattern":
        """"0.5" -> unstructured 50%, "2:4" -> prune 2 of every 4."""
        text = text.strip()
        if ":" in text:
            n, m = text.split(":", 1)
            return cls.nm(int(n), int(m))
        return cls.unstructured(float(text))

    def describe(self) -> str:
        if self.kind == "nm":
            return f"{self.n}:{self.m}"
        return f"unstructured p={self.p}"

    def target_sparsity(self) -> float:
        return self.n / self.m if self.kind == "nm" else self.p


@dataclass
class PruneMask:
    """Binary keep matrix (True = keep) tagged with its pattern."""

    keep: np.ndarray
    pattern: SparsityPattern

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)
        if self.keep.ndim != 2:
            raise InputError("mask must be 2-D")

    def sparsity(self) -> float:
        return 1.0 - float(self.keep.sum()) / self.keep.size


def keep_count(p: float, width: int) -> int:
    """ceil((1-p) * width), guarded against float overshoot near integers."""
    return min(width, max(0, math.ceil((1.0 - p) * width - _CEIL_GUARD)))


def top_keep(scores_1d: np.ndarray, keep_n: int) -> np.ndarray:
    mask = np.zeros(scores_1d.shape[0], dtype=bool)
    if keep_n > 0:
        order = np.argsort(-scores_1d, kind="stable")
        mask[order[:keep_n]] = True
    return mask


def select_mask(scores, pattern: SparsityPattern, group: str = "row") -> PruneMask:
    """Keep the highest-scored entries of each comparison group.

    ``group`` applies to unstructured patterns only: "row" is the default
    per-output-row convention, "layer" ranks the whole matrix at once (for
    ablation).
    """
    s = as_matrix(getattr(scores, "scores", scores), "scores")
    rows, cols = s.shape
    if pattern.kind == "nm":
        if cols % pattern.m != 0:
            raise InputError(f"input dim {cols} not divisible by group size {pattern.m}")
        keep = np.zeros_like(s, dtype=bool)
        keep_n = pattern.m - pattern.n
        for start in range(0, cols, pattern.m):
            block = s[:, start : start + pattern.m]
            for r in range(rows):
                keep[r, start : start + pattern.m] = top_keep(block[r], keep_n)
        return PruneMask(keep=keep, pattern=pattern)
    if group == "layer":
        flat = top_keep(s.reshape(-1), keep_count(pattern.p, s.size))
        return PruneMask(keep=flat.reshape(s.shape), pattern=pattern)
    if group != "row":
        raise InputError(f"unknown comparison group {group!r}")
    keep_n = keep_count(pattern.p, cols)
    keep = np.zeros_like(s, dtype=bool)
    for r in range(rows):
        keep[r] = top_keep(s[r], keep_n)
    return PruneMask(keep=keep, pattern=pattern)


@dataclass
class SparsityReport:
    global_sparsity: float
    per_row_sparsity: np.ndarray
    violations: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def verify(mask: PruneMask) -> SparsityReport:
    """Achieved sparsity plus structured violations of the pattern constraints."""
    keep = mask.keep
    rows, cols = keep.shape
    per_row = 1.0 - keep.sum(axis=1) / cols
    violations: list[dict] = []
    if mask.pattern.kind == "nm":
        n, m = mask.pattern.n, mask.pattern.m
        if cols % m != 0:
            violations.append({"row": None, "group": None, "reason": f"cols {cols} % {m} != 0"})
        else:
            want = m - n
            for r in range(rows):
                for g, start in enumerate(range(0, cols, m)):
                    got = int(keep[r, start : start + m].sum())
                    if got != want:
                        violations.append(
                            {"row": r, "group": g, "expected_keep": want, "actual_keep": got}
                        )
    else:
        want = keep_count(mask.pattern.p, cols)
        for r in range(rows):
            got = int(keep[r].sum())
            if got != want:
                violations.append(
                    {"row": r, "group": None, "expected_keep": want, "actual_keep": got}
                )
    return SparsityReport(
        global_sparsity=1.0 - float(keep.sum()) / keep.size,
        per_row_sparsity=per_row,
        violations=violations,
    )


def export_masks(path, masks: dict[str, PruneMask]) -> None:
    """Dump masks as 0/1 float tensors in the container format."""
    patterns = ",".join(f"{k}:{m.pattern.describe()}" for k, m in sorted(masks.items()))
    write_tensor_file(
        path,
        {"kind": "masks", "patterns": patterns},
        {f"mask.{k}": m.keep.astype(np.float32) for k, m in sorted(masks.items())},
    )
