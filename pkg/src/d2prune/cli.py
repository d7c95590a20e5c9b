"""Batch command-line front door.

Subcommands: gen-model, gen-corpus, prune, eval, attn-report. A run is fully
described by a RunConfig: defaults, optionally overridden by a UTF-8
key=value configuration file with dot-scoped keys, finally overridden by
explicit CLI flags. Every command is deterministic given its configuration;
exit status is 0 iff all outputs were written.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import model as model_mod
from .attention import attn_kl, export_attention_surfaces
from .calibration import Corpus, ScaleSpec, gen_corpus
from .container_io import read_tokens, write_tokens
from .errors import ConfigError, D2PruneError, InputError
from .evaluation import emit_report, logit_divergence, perplexity
from .model import ModelConfig, forward, generate_weights
from .pipeline import PruneSettings, run
from .scoring import DualParams
from .sparsity import SparsityPattern, export_masks
from .validation import check_token_ids

__all__ = ["RunConfig", "main"]


@dataclass
class RunConfig:
    """All pipeline parameters, file keys in comments."""

    model_path: str = ""          # model.path
    corpus_path: str = ""         # corpus.path (empty: generate from seed)
    corpus_seed: int | None = None  # corpus.seed (default: global seed)
    corpus_generator: str = "markov2"  # corpus.generator
    corpus_length: int | None = None   # corpus.length (default: calibration + eval need)
    n_samples: int = 128          # calib.samples
    seq_len: int = 32             # calib.seq_len
    calib_mode: str = "sequential"  # calib.mode
    method: str = "d2prune"       # prune.method
    sparsity: float = 0.5         # prune.sparsity
    pattern: str = ""             # prune.pattern ("2:4"; overrides sparsity)
    lambda1: float = 1.0          # prune.lambda1
    lambda2: float = 0.0          # prune.lambda2
    scale_mode: str = "fixed"     # prune.scale_mode
    scale_s: float = 1500.0       # prune.scale_s
    block: int = 16               # prune.block
    damping: float = 0.01         # prune.damping
    group: str = "row"            # prune.group
    qkv: str = "dynamic"          # qkv.mode
    eval_window: int | None = None  # eval.window (default: seq_len)
    eval_windows: int = 4         # eval.windows
    out_dir: str = "out"          # out.dir
    seed: int = 0                 # seed (global; named sub-streams derive from it)

    _KEYS = {
        "model.path": "model_path",
        "corpus.path": "corpus_path",
        "corpus.seed": "corpus_seed",
        "corpus.generator": "corpus_generator",
        "corpus.length": "corpus_length",
        "calib.samples": "n_samples",
        "calib.seq_len": "seq_len",
        "calib.mode": "calib_mode",
        "prune.method": "method",
        "prune.sparsity": "sparsity",
        "prune.pattern": "pattern",
        "prune.lambda1": "lambda1",
        "prune.lambda2": "lambda2",
        "prune.scale_mode": "scale_mode",
        "prune.scale_s": "scale_s",
        "prune.block": "block",
        "prune.damping": "damping",
        "prune.group": "group",
        "qkv.mode": "qkv",
        "eval.window": "eval_window",
        "eval.windows": "eval_windows",
        "out.dir": "out_dir",
        "seed": "seed",
    }

    def apply_file(self, path: str) -> None:
        types = {f.name: f.type for f in fields(self)}
        with open(path, "r", encoding="utf-8") as fh:
            for ln, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
                key, value = (part.strip() for part in line.split("=", 1))
                if key not in self._KEYS:
                    raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
                field = self._KEYS[key]
                setattr(self, field, _coerce(value, types[field], key))

    def to_dict(self) -> dict:
        return {k: getattr(self, f) for k, f in self._KEYS.items()}


def _coerce(value: str, type_hint: str, key: str):
    if "int" in type_hint:
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected integer, got {value!r}") from exc
    if "float" in type_hint:
        try:
            return float(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected number, got {value!r}") from exc
    return value


def _add_prune_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file (dot-scoped keys)")
    p.add_argument("--model", dest="model_path", help="dense model container (D2PW)")
    p.add_argument("--corpus", dest="corpus_path", help="token stream file (u32 LE ids)")
    p.add_argument("--corpus-seed", dest="corpus_seed", type=int)
    p.add_argument("--corpus-generator", dest="corpus_generator", choices=["markov2", "uniform"])
    p.add_argument("--corpus-length", dest="corpus_length", type=int)
    p.add_argument("--nsamples", dest="n_samples", type=int)
    p.add_argument("--seqlen", dest="seq_len", type=int)
    p.add_argument("--calib-mode", dest="calib_mode", choices=["sequential", "oneshot"])
    p.add_argument("--method", choices=["magnitude", "wanda", "sparsegpt", "d2prune"])
    p.add_argument("--sparsity", type=float)
    p.add_argument("--pattern", help='semi-structured pattern like "2:4" (overrides --sparsity)')
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--scale-mode", dest="scale_mode", choices=["fixed", "seqlen"])
    p.add_argument("--scale-s", dest="scale_s", type=float)
    p.add_argument("--block", type=int)
    p.add_argument("--damping", type=float)
    p.add_argument("--group", choices=["row", "layer"])
    p.add_argument("--qkv", choices=["all", "none", "no-q", "no-k", "no-v", "dynamic", "nonuniform"])
    p.add_argument("--eval-window", dest="eval_window", type=int)
    p.add_argument("--eval-windows", dest="eval_windows", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--include-refs", action="store_true",
                   help='also evaluate the "none"/"all" reference rows in the dynamic search')
    p.add_argument("--dump-masks", action="store_true", help="write masks.d2pw next to the report")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="d2prune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-model", help="generate a synthetic model container")
    g.add_argument("--layers", type=int, default=2)
    g.add_argument("--heads", type=int, default=2)
    g.add_argument("--dmodel", type=int, default=32)
    g.add_argument("--dff", type=int, default=64)
    g.add_argument("--vocab", type=int, default=64)
    g.add_argument("--maxseq", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--structure", choices=["random", "lowrank"], default="lowrank")
    g.add_argument("--out", required=True)

    c = sub.add_parser("gen-corpus", help="generate a synthetic token stream")
    c.add_argument("--vocab", type=int, default=64)
    c.add_argument("--length", type=int, default=8192)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--generator", choices=["markov2", "uniform"], default="markov2")
    c.add_argument("--out", required=True)

    p = sub.add_parser("prune", help="calibrate, score, mask, solve and report")
    _add_prune_overrides(p)

    e = sub.add_parser("eval", help="windowed perplexity (and divergence vs a reference)")
    e.add_argument("--model", required=True)
    e.add_argument("--stream", required=True, help="token stream file (u32 LE ids)")
    e.add_argument("--window", type=int, default=32)
    e.add_argument("--ref-model", help="dense reference for logit divergence")
    e.add_argument("--out", help="write the JSON result here instead of stdout")

    a = sub.add_parser("attn-report", help="attention KL/RMSE of a pruned model vs dense")
    a.add_argument("--dense", required=True)
    a.add_argument("--pruned", required=True)
    a.add_argument("--stream", required=True)
    a.add_argument("--window", type=int, default=32)
    a.add_argument("--out", help="write the CSV here instead of stdout")
    a.add_argument("--dump-surfaces", help="prefix for dense/pruned attention surface dumps")
    return parser


def cmd_gen_model(args) -> int:
    config = ModelConfig(
        n_layers=args.layers, n_heads=args.heads, d_model=args.dmodel,
        d_ff=args.dff, vocab=args.vocab, max_seq=args.maxseq,
    )
    w = generate_weights(config, seed=args.seed, structure=args.structure)
    model_mod.save(w, args.out)
    print(f"wrote {args.out} ({args.structure}, seed {args.seed})")
    return 0


def cmd_gen_corpus(args) -> int:
    corpus = gen_corpus(args.vocab, args.length, args.seed, args.generator)
    write_tokens(args.out, corpus.tokens)
    print(f"wrote {args.out} ({args.generator}, {args.length} tokens, seed {args.seed})")
    return 0


def _load_corpus(cfg: RunConfig, vocab: int) -> Corpus:
    if cfg.corpus_path:
        tokens = check_token_ids(read_tokens(cfg.corpus_path), vocab, "corpus")
        return Corpus(vocab=vocab, tokens=tokens, seed=-1, generator="file")
    seed = cfg.corpus_seed if cfg.corpus_seed is not None else cfg.seed
    window = cfg.eval_window if cfg.eval_window is not None else cfg.seq_len
    length = cfg.corpus_length
    if length is None:
        length = cfg.n_samples * cfg.seq_len + cfg.eval_windows * window
    return gen_corpus(vocab, length, seed, cfg.corpus_generator)


def cmd_prune(args) -> int:
    cfg = RunConfig()
    if args.config:
        cfg.apply_file(args.config)
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(cfg, f.name, value)
    if not cfg.model_path:
        raise ConfigError("no model given (flag --model or key model.path)")

    model = model_mod.load(cfg.model_path)
    corpus = _load_corpus(cfg, model.config.vocab)
    pattern = (
        SparsityPattern.parse(cfg.pattern) if cfg.pattern
        else SparsityPattern.unstructured(cfg.sparsity)
    )
    settings = PruneSettings(
        method=cfg.method,
        pattern=pattern,
        params=DualParams(
            lambda1=cfg.lambda1, lambda2=cfg.lambda2,
            scale=ScaleSpec(s=cfg.scale_s, mode=cfg.scale_mode),
        ),
        qkv=cfg.qkv,
        calib_mode=cfg.calib_mode,
        block=cfg.block,
        damping=cfg.damping,
        n_samples=cfg.n_samples,
        seq_len=cfg.seq_len,
        eval_window=cfg.eval_window,
        eval_windows=cfg.eval_windows,
        group=cfg.group,
        include_ref_rows=args.include_refs,
    )
    outcome = run(model, corpus, settings, config_echo=cfg.to_dict())

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    csv_path = emit_report(outcome.report, report_path)
    model_mod.save(outcome.pruned, out_dir / "pruned.d2pw")
    if args.dump_masks:
        export_masks(out_dir / "masks.d2pw", outcome.masks)

    print(f"qkv: mode={settings.qkv} frozen={','.join(outcome.qkv_config.frozen)}")
    if outcome.candidates:
        table = "  ".join(f"w/o {k}: {v:.4f}" for k, v in outcome.candidates.items())
        print(f"candidates: {table}")
    print(
        f"ppl dense={outcome.eval_dense.ppl:.4f} pruned={outcome.eval_pruned.ppl:.4f} "
        f"attn_kl={outcome.fidelity.kl:.6f} attn_rmse={outcome.fidelity.rmse:.6f}"
    )
    print(f"wrote {report_path}, {csv_path}, {out_dir / 'pruned.d2pw'}")
    return 0


def cmd_eval(args) -> int:
    model = model_mod.load(args.model)
    tokens = check_token_ids(read_tokens(args.stream), model.config.vocab, "stream")
    result = perplexity(model, tokens, args.window)
    if args.ref_model:
        ref = model_mod.load(args.ref_model)
        if ref.config != model.config:
            raise InputError("reference model has a different architecture")
        n_windows = tokens.shape[0] // args.window
        kls = []
        for wi in range(n_windows):
            ids = tokens[wi * args.window : (wi + 1) * args.window]
            kls.append(logit_divergence(forward(ref, ids), forward(model, ids)))
        result.logit_kl = float(np.mean(kls))
    payload = json.dumps(result.to_dict(), sort_keys=True, indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(payload)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(payload)
    return 0


def cmd_attn_report(args) -> int:
    dense = model_mod.load(args.dense)
    pruned = model_mod.load(args.pruned)
    if dense.config != pruned.config:
        raise InputError("models have different architectures")
    tokens = check_token_ids(read_tokens(args.stream), dense.config.vocab, "stream")
    if tokens.shape[0] < args.window:
        raise InputError(f"stream shorter than one window ({args.window})")
    probe = tokens[: args.window]
    dense_trace = forward(dense, probe, capture=True)
    pruned_trace = forward(pruned, probe, capture=True)
    fidelity = attn_kl(dense_trace, pruned_trace)
    lines = ["layer,kl,rmse"]
    for i, (kl, rmse) in enumerate(zip(fidelity.per_layer_kl, fidelity.per_layer_rmse)):
        lines.append(f"{i},{kl!r},{rmse!r}")
    lines.append(f"all,{fidelity.kl!r},{fidelity.rmse!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    if args.dump_surfaces:
        export_attention_surfaces(f"{args.dump_surfaces}.dense.d2pw", dense_trace)
        export_attention_surfaces(f"{args.dump_surfaces}.pruned.d2pw", pruned_trace)
        print(f"wrote {args.dump_surfaces}.dense.d2pw, {args.dump_surfaces}.pruned.d2pw")
    return 0


_COMMANDS = {
    "gen-model": cmd_gen_model,
    "gen-corpus": cmd_gen_corpus,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "attn-report": cmd_attn_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (D2PruneError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
