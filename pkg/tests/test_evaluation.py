import json
import math

import numpy as np
import pytest

from d2prune.errors import InputError
from d2prune.evaluation import (
    CSV_HEADER,
    EvalResult,
    RunReport,
    emit_report,
    logit_divergence,
    perplexity,
    read_report,
    report_digest,
)
from d2prune.model import ModelConfig, WeightContainer, forward, generate_weights


def lookup_model(vocab=8, head=None, embed_scale=0.0):
    """Model whose blocks contribute nothing: logits = head @ (embed + pos)."""
    cfg = ModelConfig(n_layers=1, n_heads=1, d_model=2, d_ff=4, vocab=vocab, max_seq=16)
    tensors = {
        "embed": np.zeros((vocab, 2)) + embed_scale,
        "head": np.zeros((vocab, 2)) if head is None else np.asarray(head, dtype=np.float64),
        "blocks.0.ln1.g": np.zeros(2),
        "blocks.0.ln1.b": np.zeros(2),
        "blocks.0.ln2.g": np.zeros(2),
        "blocks.0.ln2.b": np.zeros(2),
        "blocks.0.wq": np.zeros((2, 2)),
        "blocks.0.wk": np.zeros((2, 2)),
        "blocks.0.wv": np.zeros((2, 2)),
        "blocks.0.wo": np.zeros((2, 2)),
        "blocks.0.wup": np.zeros((4, 2)),
        "blocks.0.wdown": np.zeros((2, 4)),
    }
    return WeightContainer(cfg, tensors)


class TestPerplexity:
    def test_uniform_logits_give_vocab(self):
        model = lookup_model(vocab=16)
        result = perplexity(model, np.zeros(32, dtype=np.int64), window=16)
        assert abs(result.ppl - 16.0) < 1e-9
        assert result.windows == 2
        assert result.n_tokens == 2 * 15

    def test_perfect_predictor_approaches_one(self):
        # embeddings are one-hot scaled huge; the head maps token t to logits
        # favoring (t+1) mod vocab, matching the constructed stream.
        vocab = 4
        cfg = ModelConfig(n_layers=1, n_heads=1, d_model=vocab, d_ff=4, vocab=vocab, max_seq=16)
        scale = 200.0
        head = np.zeros((vocab, vocab))
        for j in range(vocab):
            head[(j + 1) % vocab, j] = 1.0
        tensors = {
            "embed": scale * np.eye(vocab),
            "head": head,
            "blocks.0.ln1.g": np.zeros(vocab),
            "blocks.0.ln1.b": np.zeros(vocab),
            "blocks.0.ln2.g": np.zeros(vocab),
            "blocks.0.ln2.b": np.zeros(vocab),
            "blocks.0.wq": np.zeros((vocab, vocab)),
            "blocks.0.wk": np.zeros((vocab, vocab)),
            "blocks.0.wv": np.zeros((vocab, vocab)),
            "blocks.0.wo": np.zeros((vocab, vocab)),
            "blocks.0.wup": np.zeros((4, vocab)),
            "blocks.0.wdown": np.zeros((vocab, 4)),
        }
        model = WeightContainer(cfg, tensors)
        stream = np.arange(32, dtype=np.int64) % vocab
        result = perplexity(model, stream, window=8)
        assert result.ppl < 1.0 + 1e-6

    def test_hand_probabilities(self):
        # One scored stream (0,0,0): want P(next=0) = 0.5 at position 0 and
        # 0.25 at position 1. Blocks are inert, so the residual at position t
        # is the sinusoidal position vector (embedding row 0 is zero):
        # h_0 = (0, 1), h_1 = (sin 1, cos 1). A head row difference r with
        # r.h_0 = 0 and r.h_1 = ln(1/3) produces those probabilities.
        a = math.log(1.0 / 3.0) / math.sin(1.0)
        head = [[a, 0.0], [0.0, 0.0]]
        model = lookup_model(vocab=2, head=head)
        result = perplexity(model, np.zeros(3, dtype=np.int64), window=3)
        want = math.exp(-(math.log(0.5) + math.log(0.25)) / 2.0)
        assert abs(want - 2.8284271247461903) < 1e-12
        # tensors are float32 at rest, so the head rounds by ~1e-7
        assert abs(result.ppl - want) < 1e-6

    def test_stream_too_short(self):
        model = lookup_model()
        with pytest.raises(InputError, match="shorter than one window"):
            perplexity(model, np.zeros(7, dtype=np.int64), window=8)

    def test_window_exceeds_max_seq(self):
        model = lookup_model()
        with pytest.raises(InputError, match="max_seq"):
            perplexity(model, np.zeros(64, dtype=np.int64), window=32)

    def test_ppl_at_least_one(self, toy_model, toy_corpus):
        result = perplexity(toy_model, toy_corpus.tokens[:128], window=32)
        assert result.ppl >= 1.0


class TestLogitDivergence:
    def test_identical(self, toy_model):
        a = forward(toy_model, [1, 2, 3])
        b = forward(toy_model, [1, 2, 3])
        assert logit_divergence(a, b) == 0.0

    def test_single_position_fixture(self):
        dense = type("T", (), {"logits": np.array([[math.log(0.5), math.log(0.5)]])})()
        pruned = type("T", (), {"logits": np.array([[math.log(0.9), math.log(0.1)]])})()
        got = logit_divergence(dense, pruned)
        assert abs(got - 0.5108256237659907) < 1e-3

    def test_nonnegative(self, toy_model, toy_config):
        other = generate_weights(toy_config, seed=3)
        a = forward(toy_model, [4, 5, 6, 7])
        b = forward(other, [4, 5, 6, 7])
        assert logit_divergence(a, b) >= 0.0

    def test_shape_mismatch(self, toy_model):
        a = forward(toy_model, [1, 2, 3])
        b = forward(toy_model, [1, 2])
        with pytest.raises(InputError):
            logit_divergence(a, b)


def tiny_report():
    return RunReport(
        config={"method": "d2prune", "seed": 0},
        layers=[
            {"layer": 0, "sublayer": "wq", "method": "d2-update", "do_update": True,
             "achieved_sparsity": 0.5, "recon_error": 0.125},
            {"layer": 0, "sublayer": "wup", "method": "d2-update", "do_update": True,
             "achieved_sparsity": 0.5, "recon_error": 0.25},
            {"layer": 1, "sublayer": "wq", "method": "d2-noupdate", "do_update": False,
             "achieved_sparsity": 0.5, "recon_error": 0.5},
        ],
        sparsity={"global": 0.5, "target": 0.5, "violations": 0},
        attention={"kl": 0.01, "rmse": 0.1,
                   "per_layer": [{"layer": 0, "kl": 0.01, "rmse": 0.1},
                                 {"layer": 1, "kl": 0.01, "rmse": 0.1}]},
        evals={"dense": EvalResult(ppl=30.0, n_tokens=10, windows=2).to_dict(),
               "pruned": EvalResult(ppl=40.0, logit_kl=0.2, n_tokens=10, windows=2).to_dict()},
        qkv={"mode": "dynamic", "frozen": ["v", "v"], "candidates": {"q": 3.0, "k": 2.0, "v": 1.0}},
    )


class TestReport:
    def test_emit_is_deterministic(self, tmp_path):
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        emit_report(tiny_report(), p1)
        emit_report(tiny_report(), p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_round_trip(self, tmp_path):
        path = tmp_path / "r.json"
        emit_report(tiny_report(), path)
        body = read_report(path)
        assert body == tiny_report().to_dict()

    def test_digest_changes_iff_numbers_change(self, tmp_path):
        base = tiny_report().to_dict()
        changed = tiny_report()
        changed.layers[0]["recon_error"] = 0.126
        assert report_digest(base) != report_digest(changed.to_dict())
        assert report_digest(base) == report_digest(tiny_report().to_dict())

    def test_tampered_file_rejected(self, tmp_path):
        path = tmp_path / "r.json"
        emit_report(tiny_report(), path)
        body = json.loads(path.read_text())
        body["sparsity"]["global"] = 0.9
        path.write_text(json.dumps(body))
        with pytest.raises(InputError, match="digest"):
            read_report(path)

    def test_csv_rows_match_sublayer_count(self, tmp_path):
        path = tmp_path / "r.json"
        csv_path = emit_report(tiny_report(), path)
        lines = [ln for ln in open(csv_path).read().splitlines() if ln]
        assert lines[0] == ",".join(CSV_HEADER)
        assert len(lines) - 1 == len(tiny_report().layers)
