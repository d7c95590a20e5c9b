import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from d2prune.errors import NumericalError, ShapeError, SingularHessianError
from d2prune.linalg import cholesky_lower, damped_inverse, l2_norm_cols, matmul, softmax_rows

from conftest import spd_matrix


class TestMatmul:
    def test_identity(self):
        a = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(matmul(np.eye(2), a), a)

    def test_hand_product(self):
        out = matmul([[1, 2], [3, 4]], [[1], [1]])
        np.testing.assert_array_equal(out, [[3], [7]])

    def test_zero_matrix(self):
        a = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(matmul(np.zeros((2, 3)), a), np.zeros((2, 4)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestDampedInverse:
    def test_diagonal(self):
        inv = damped_inverse(np.diag([1.0, 4.0]), 0.0)
        np.testing.assert_allclose(inv, np.diag([1.0, 0.25]), atol=1e-12)

    def test_identity_scaling(self):
        for e in (0.0, 0.01, 0.5):
            inv = damped_inverse(np.eye(3), e)
            np.testing.assert_allclose(inv, np.eye(3) / (1.0 + e), atol=1e-12)

    def test_2x2_hand_inverse(self):
        inv = damped_inverse([[2.0, 1.0], [1.0, 2.0]], 0.0)
        np.testing.assert_allclose(inv, np.array([[2, -1], [-1, 2]]) / 3.0, atol=1e-12)

    def test_inverse_property_random_spd(self):
        rng = np.random.default_rng(42)
        for dim in (2, 3, 8, 17, 33, 64):
            h = spd_matrix(rng, dim)
            inv = damped_inverse(h, 0.0)
            np.testing.assert_allclose(inv @ h, np.eye(dim), atol=1e-6)

    def test_result_symmetric(self):
        h = spd_matrix(np.random.default_rng(1), 16)
        inv = damped_inverse(h, 0.01)
        assert np.max(np.abs(inv - inv.T)) < 1e-9

    def test_singular_raises_with_name(self):
        with pytest.raises(SingularHessianError, match="blocks.0.wq"):
            damped_inverse(np.zeros((3, 3)), 0.0, name="blocks.0.wq")


class TestCholesky:
    def test_reconstruction(self):
        rng = np.random.default_rng(3)
        for dim in (2, 5, 24):
            h = spd_matrix(rng, dim)
            low = cholesky_lower(h)
            np.testing.assert_allclose(low @ low.T, h, rtol=1e-6)
            assert np.allclose(low, np.tril(low))

    def test_not_pd(self):
        with pytest.raises(NumericalError):
            cholesky_lower(-np.eye(2))


class TestSoftmaxRows:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]], atol=1e-15)

    def test_log_ratio(self):
        out = softmax_rows([[np.log(1.0), np.log(3.0)]])
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-12)

    def test_no_overflow(self):
        out = softmax_rows([[1000.0, 1000.0]])
        np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-15)

    @settings(deadline=None, max_examples=50)
    @given(
        m=arrays(np.float64, (3, 4), elements=st.floats(-50, 50)),
        c=st.floats(-30, 30),
    )
    def test_shift_invariance(self, m, c):
        base = softmax_rows(m)
        shifted = softmax_rows(m + c)
        np.testing.assert_allclose(base, shifted, atol=1e-12)
        np.testing.assert_allclose(base.sum(axis=1), 1.0, atol=1e-9)


class TestL2NormCols:
    def test_pythagorean(self):
        np.testing.assert_allclose(l2_norm_cols([[3.0], [4.0]]), [5.0])

    def test_zero_column(self):
        np.testing.assert_array_equal(l2_norm_cols(np.zeros((4, 2))), [0.0, 0.0])

    def test_single_entry_absolute(self):
        np.testing.assert_allclose(l2_norm_cols([[-2.0]]), [2.0])
