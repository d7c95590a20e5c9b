import numpy as np
import pytest

from conftest import spd_matrix
from oracles import constrained_ls, exhaustive_best_mask, quadratic_error


class TestConstrainedLs:
    def test_empty_zero_set_returns_w0(self):
        w0 = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(constrained_ls(w0, np.eye(3), []), w0)

    def test_hand_2d_case(self):
        out = constrained_ls([1.0, 1.0], [[2.0, 1.0], [1.0, 2.0]], [0])
        np.testing.assert_allclose(out, [0.0, 1.5], atol=1e-12)

    def test_all_zeroed(self):
        out = constrained_ls([1.0, 2.0], np.eye(2), [0, 1])
        np.testing.assert_array_equal(out, [0.0, 0.0])

    def test_solution_is_stationary(self):
        rng = np.random.default_rng(30)
        h = spd_matrix(rng, 6)
        w0 = rng.normal(size=6)
        out = constrained_ls(w0, h, [1, 4])
        grad = 2.0 * h @ (out - w0)
        free = [0, 2, 3, 5]
        np.testing.assert_allclose(grad[free], 0.0, atol=1e-9)


class TestExhaustiveBestMask:
    def test_keep_all_zero_error(self):
        rng = np.random.default_rng(31)
        w = rng.normal(size=5)
        mask, err = exhaustive_best_mask(w, spd_matrix(rng, 5), keep=5)
        assert mask.all()
        assert err == 0.0

    def test_diagonal_h_analytic_ordering(self):
        rng = np.random.default_rng(32)
        d = rng.uniform(0.5, 3.0, size=6)
        w = rng.normal(size=6)
        cost = w**2 * d
        for keep in (3, 5):
            mask, _ = exhaustive_best_mask(w, np.diag(d), keep=keep)
            want = np.zeros(6, dtype=bool)
            want[np.argsort(-cost, kind="stable")[:keep]] = True
            np.testing.assert_array_equal(mask, want)

    def test_dimension_guard(self):
        with pytest.raises(ValueError, match="guard"):
            exhaustive_best_mask(np.ones(13), np.eye(13), keep=2)

    def test_beats_random_masks(self):
        rng = np.random.default_rng(33)
        h = spd_matrix(rng, 8)
        w = rng.normal(size=8)
        _, best = exhaustive_best_mask(w, h, keep=4)
        for _ in range(20):
            keep_idx = rng.choice(8, size=4, replace=False)
            zero = [i for i in range(8) if i not in keep_idx]
            err = quadratic_error(constrained_ls(w, h, zero), w, h)
            assert best <= err + 1e-12
