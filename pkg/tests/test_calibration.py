import math

import numpy as np
import pytest
from scipy.stats import chi2

from d2prune.calibration import (
    CalibStats,
    Corpus,
    ScaleSpec,
    accumulate,
    activation_shift_report,
    default_scale,
    fit_activation_shift,
    gen_corpus,
    load_stats,
    save_stats,
    scaled_norm,
)
from d2prune.calibration import _stats_from_taps
from d2prune.errors import ConfigError, InputError
from d2prune.linalg import damped_inverse


class TestGenCorpus:
    def test_empty(self):
        assert len(gen_corpus(16, 0, seed=1)) == 0

    def test_deterministic(self):
        a = gen_corpus(16, 200, seed=9)
        b = gen_corpus(16, 200, seed=9)
        np.testing.assert_array_equal(a.tokens, b.tokens)

    def test_vocab_bounds(self):
        c = gen_corpus(8, 5000, seed=2)
        assert c.tokens.min() >= 0 and c.tokens.max() < 8

    def test_markov2_has_bigram_structure(self):
        # chi-square of the empirical bigram distribution against uniform.
        c = gen_corpus(8, 10_000, seed=3, generator="markov2")
        counts = np.zeros((8, 8))
        for a, b in zip(c.tokens[:-1], c.tokens[1:]):
            counts[a, b] += 1
        n = counts.sum()
        expected = n / 64.0
        stat = float(((counts - expected) ** 2 / expected).sum())
        threshold = chi2.ppf(0.99, df=63)
        assert stat > threshold

    def test_uniform_generator(self):
        c = gen_corpus(8, 3000, seed=3, generator="uniform")
        counts = np.bincount(c.tokens, minlength=8)
        assert counts.min() > 0

    def test_rejects_tiny_vocab(self):
        with pytest.raises(InputError):
            gen_corpus(1, 10, seed=0)


class TestAccumulate:
    def test_hand_hessian(self):
        # x1=(1,0), x2=(1,2): H = sum of outer products.
        x = np.array([[1.0, 1.0], [0.0, 2.0]])
        ls = _stats_from_taps([x], [x])
        np.testing.assert_array_equal(ls.hessian, [[2.0, 2.0], [2.0, 4.0]])
        np.testing.assert_array_equal(ls.in_norms, np.sqrt([2.0, 4.0]))

    def test_single_token_rank_one(self):
        x = np.array([[1.0], [2.0]])
        ls = _stats_from_taps([x], [x])
        np.testing.assert_array_equal(ls.hessian, [[1.0, 2.0], [2.0, 4.0]])
        assert np.linalg.matrix_rank(ls.hessian) == 1
        assert ls.n_tokens == 1

    def test_doubling_corpus_doubles_hessian_bitwise(self, toy_model, toy_corpus):
        base = accumulate(toy_model, toy_corpus, n_samples=4, seq_len=16)
        doubled_tokens = np.concatenate([toy_corpus.tokens[:64], toy_corpus.tokens[:64]])
        doubled = Corpus(toy_corpus.vocab, doubled_tokens, seed=0, generator="markov2")
        twice = accumulate(toy_model, doubled, n_samples=8, seq_len=16)
        for name, ls in base.layers.items():
            np.testing.assert_array_equal(twice.layers[name].hessian, 2.0 * ls.hessian)

    def test_sample_order_invariance_bitwise(self, toy_model, toy_corpus):
        base = accumulate(toy_model, toy_corpus, n_samples=4, seq_len=16)
        blocks = [toy_corpus.tokens[i * 16 : (i + 1) * 16] for i in range(4)]
        permuted = Corpus(
            toy_corpus.vocab,
            np.concatenate([blocks[2], blocks[0], blocks[3], blocks[1]]),
            seed=0,
            generator="markov2",
        )
        swapped = accumulate(toy_model, permuted, n_samples=4, seq_len=16)
        for name, ls in base.layers.items():
            np.testing.assert_array_equal(swapped.layers[name].hessian, ls.hessian)
            np.testing.assert_array_equal(swapped.layers[name].in_norms, ls.in_norms)

    def test_matches_per_token_outer_product_oracle(self, toy_model, toy_corpus):
        # H must equal the naive sum of x x^T over every calibration token
        from d2prune.model import forward

        stats = accumulate(toy_model, toy_corpus, n_samples=2, seq_len=8)
        name = "blocks.1.wup"
        xs = []
        for s in range(2):
            ids = toy_corpus.tokens[s * 8 : (s + 1) * 8]
            xs.append(forward(toy_model, ids, capture=True).layers[1].sublayers["wup"].x)
        x = np.concatenate(xs, axis=1)
        want = np.zeros((x.shape[0], x.shape[0]))
        for t in range(x.shape[1]):
            want += np.outer(x[:, t], x[:, t])
        np.testing.assert_allclose(stats.for_layer(name).hessian, want, rtol=1e-12)
        np.testing.assert_allclose(
            stats.for_layer(name).in_norms,
            [np.linalg.norm(x[i]) for i in range(x.shape[0])],
            rtol=1e-12,
        )

    def test_hessians_are_psd_after_damping(self, toy_stats):
        for name, ls in toy_stats.layers.items():
            damped_inverse(ls.hessian, 0.01, name=name)
            sym = np.max(np.abs(ls.hessian - ls.hessian.T))
            assert sym < 1e-9

    def test_corpus_too_short(self, toy_model, toy_corpus):
        with pytest.raises(InputError, match="too short"):
            accumulate(toy_model, toy_corpus, n_samples=100, seq_len=64)

    def test_missing_layer_raises(self, toy_stats):
        with pytest.raises(ConfigError):
            toy_stats.for_layer("blocks.9.wq")


class TestScaledNorm:
    def test_identity_at_s1(self):
        assert scaled_norm(2.5, ScaleSpec(s=1.0)) == 2.5

    def test_fixture_1500(self):
        assert abs(scaled_norm(30.0, ScaleSpec(s=1500.0)) - 0.774597) < 1e-6

    def test_seqlen_is_rms(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            x = rng.normal(size=17)
            norm = float(np.linalg.norm(x))
            rms = math.sqrt(np.mean(x**2))
            got = scaled_norm(norm, ScaleSpec(s=5.0, mode="seqlen"), n_tokens=17)
            assert abs(got - rms) < 1e-9

    def test_monotone(self):
        spec = ScaleSpec(s=7.0)
        norms = np.linspace(0, 10, 50)
        out = scaled_norm(norms, spec)
        assert (np.diff(out) > 0).all()

    def test_seqlen_needs_tokens(self):
        with pytest.raises(ConfigError):
            scaled_norm(1.0, ScaleSpec(s=1.0, mode="seqlen"))

    def test_default_scale_rule(self):
        assert default_scale(32) == ScaleSpec(s=1500.0, mode="fixed")
        assert default_scale(2048) == ScaleSpec(s=2048.0, mode="seqlen")


class TestActivationShift:
    def test_exact_proportional_fixture(self):
        # activations scaled by exactly 1.5: delta = 0.5 * base, a perfect fit.
        base = np.array([2.0, 4.0, 6.0, 8.0])
        delta = 1.5 * base - base
        lam, r2 = fit_activation_shift(base, delta)
        assert lam == 0.5
        assert r2 == 1.0

    def test_identical_corpora(self, toy_model, toy_corpus):
        report = activation_shift_report(
            toy_model, toy_corpus, toy_corpus, n_samples=2, seq_len=16
        )
        assert len(report) == toy_model.config.n_layers
        for row in report:
            assert row.lam_hat == 0.0
            assert row.r2 is None

    def test_two_seeds_in_range(self, toy_model, toy_config):
        a = gen_corpus(toy_config.vocab, 128, seed=5)
        b = gen_corpus(toy_config.vocab, 128, seed=6)
        report = activation_shift_report(toy_model, a, b, n_samples=4, seq_len=16)
        for row in report:
            assert np.isfinite(row.lam_hat)
            assert row.r2 is None or 0.0 <= row.r2 <= 1.0
            assert row.n_points == 3 * 32 + 64


class TestStatsCache:
    def test_round_trip(self, toy_stats, tmp_path):
        path = tmp_path / "stats.d2pw"
        save_stats(toy_stats, path)
        loaded = load_stats(path)
        assert loaded.n_tokens == toy_stats.n_tokens
        assert set(loaded.layers) == set(toy_stats.layers)
        ls = loaded.layers["blocks.0.wq"]
        # float32 at rest: equal after the same rounding
        np.testing.assert_array_equal(
            ls.hessian, toy_stats.layers["blocks.0.wq"].hessian.astype(np.float32)
        )
        assert ls.n_tokens == toy_stats.layers["blocks.0.wq"].n_tokens
