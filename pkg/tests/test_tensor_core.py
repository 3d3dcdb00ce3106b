"""
Tests for the fixed-point, quantization and softmax helpers.
"""
import math
import unittest

import numpy as np
import numpy.testing as npt

from pim_attention_sim.config import QuantConfig
from pim_attention_sim.exceptions import DimensionError
from pim_attention_sim.tensor_core import (
    FRACTION_MAX,
    FixedPointMatrix,
    IntMatrix,
    MaskMatrix,
    binarize,
    default_gamma,
    dense_attention_oracle,
    dequantize,
    exact_product,
    extract_exponent,
    fixed_matmul,
    hard_mask,
    int_matmul,
    precompute_score_weights,
    quantize,
    softmax_rows,
)


class TestFixedPoint(unittest.TestCase):
    """Test cases for FixedPointMatrix and exponent extraction."""

    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_extract_exponent_error_bound(self):
        """Round trip error stays within 2^(k-31)."""
        values = self.rng.uniform(-3.0, 3.0, size=(8, 5))
        m = extract_exponent(values)
        _, k = np.frexp(np.max(np.abs(values)))
        self.assertLessEqual(np.max(np.abs(m.to_real() - values)), 2.0 ** (int(k) - 31))
        self.assertLessEqual(int(np.max(np.abs(m.data))), FRACTION_MAX)

    def test_extract_exponent_zero_matrix(self):
        m = extract_exponent(np.zeros((3, 2)))
        self.assertEqual(m.exponent, 0)
        self.assertEqual(m.shape, (3, 2))
        npt.assert_array_equal(m.data, 0)

    def test_extract_exponent_rejects_nan(self):
        with self.assertRaises(ValueError):
            extract_exponent(np.array([[1.0, np.nan]]))

    def test_data_is_read_only(self):
        m = extract_exponent(np.ones((2, 2)))
        with self.assertRaises(ValueError):
            m.data[0, 0] = 5

    def test_from_exact_normalizes_large_values(self):
        """Values past 31 bits are shifted into the fraction range."""
        m = FixedPointMatrix.from_exact(np.array([[2 ** 40]], dtype=object), 0)
        self.assertEqual(int(m.data[0, 0]), 2 ** 30)
        self.assertEqual(m.exponent, 10)
        self.assertEqual(m.to_real()[0, 0], 2.0 ** 40)

    def test_exact_product_small_integers(self):
        a = FixedPointMatrix(np.array([[3, -2]]), 0)
        b = FixedPointMatrix(np.array([[5], [7]]), 0)
        exact, exponent = exact_product(a, b)
        self.assertEqual(exact[0, 0], 1)
        self.assertEqual(exponent, 0)

    def test_exact_product_is_exact_for_full_width_fractions(self):
        a = FixedPointMatrix(np.array([[FRACTION_MAX, FRACTION_MAX]]), 0)
        b = FixedPointMatrix(np.array([[FRACTION_MAX], [-1]]), 0)
        exact, _ = exact_product(a, b)
        self.assertEqual(exact[0, 0], FRACTION_MAX * FRACTION_MAX - FRACTION_MAX)

    def test_exact_product_dimension_mismatch(self):
        with self.assertRaises(DimensionError):
            exact_product(FixedPointMatrix.zeros(2, 3), FixedPointMatrix.zeros(2, 3))

    def test_fixed_matmul_matches_float(self):
        a = self.rng.uniform(-1, 1, size=(6, 9))
        b = self.rng.uniform(-1, 1, size=(9, 4))
        product = fixed_matmul(extract_exponent(a), extract_exponent(b))
        npt.assert_allclose(product.to_real(), a @ b, rtol=1e-6, atol=1e-7)

    def test_hard_mask_zeroes_outside(self):
        m = extract_exponent(np.array([[1.0, 2.0], [3.0, 4.0]]))
        masked = hard_mask(m, MaskMatrix.identity(2))
        npt.assert_allclose(masked.to_real(), [[1.0, 0.0], [0.0, 4.0]])

    def test_hard_mask_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            hard_mask(FixedPointMatrix.zeros(2, 2), MaskMatrix.ones(3))

    def test_score_weights_reassociate(self):
        """X W_S X^T equals (X W_Q)(X W_K)^T."""
        x = self.rng.uniform(-1, 1, size=(5, 8))
        w_q = self.rng.uniform(-1, 1, size=(8, 4))
        w_k = self.rng.uniform(-1, 1, size=(8, 4))
        w_s = precompute_score_weights(extract_exponent(w_q), extract_exponent(w_k))
        npt.assert_allclose(x @ w_s.to_real() @ x.T, (x @ w_q) @ (x @ w_k).T, rtol=1e-5, atol=1e-6)


class TestQuantization(unittest.TestCase):
    """Test cases for quantize / dequantize."""

    def test_quantize_rounds_and_saturates(self):
        q = QuantConfig(gamma=2.0, bits=4)
        result = quantize(np.array([[0.3, -5.0, 1.2]]), q)
        npt.assert_array_equal(result.values, [[1, -8, 2]])
        self.assertEqual(result.scale, 2.0)
        self.assertEqual(result.bits, 4)

    def test_default_gamma(self):
        self.assertEqual(default_gamma(np.array([[2.0, -1.0]]), 4), 2.0)
        self.assertEqual(default_gamma(np.zeros((2, 2)), 4), 1.0)

    def test_quantize_uses_per_matrix_gamma(self):
        result = quantize(np.array([[0.5, -1.0]]), QuantConfig(bits=4))
        npt.assert_array_equal(result.values, [[2, -4]])
        self.assertEqual(result.scale, 4.0)

    def test_int_matmul_carries_scale(self):
        a = IntMatrix(np.array([[1, 2]]), 2.0, 4)
        b = IntMatrix(np.array([[3], [4]]), 3.0, 4)
        product = int_matmul(a, b)
        npt.assert_array_equal(product.values, [[11]])
        self.assertEqual(product.scale, 6.0)

    def test_dequantize_power(self):
        q = QuantConfig(gamma=2.0)
        self.assertEqual(dequantize(IntMatrix(np.array([[8]])), q, power=2).to_real()[0, 0], 2.0)
        self.assertEqual(dequantize(IntMatrix(np.array([[8]])), q).to_real()[0, 0], 4.0)

    def test_dequantize_rejects_bad_power(self):
        q = QuantConfig(gamma=2.0)
        for power in (0, -1, 1.5, True):
            with self.assertRaises(ValueError):
                dequantize(IntMatrix(np.array([[1]])), q, power=power)

    def test_dequantize_bare_array_needs_gamma(self):
        with self.assertRaises(ValueError):
            dequantize(np.array([[1]]), QuantConfig())


class TestSoftmaxAndBinarize(unittest.TestCase):
    """Test cases for the softmax and the binarization threshold."""

    def test_rows_sum_to_one(self):
        m = extract_exponent(np.random.default_rng(1).normal(size=(4, 6)))
        npt.assert_allclose(softmax_rows(m).to_real().sum(axis=1), 1.0, rtol=1e-7)

    def test_masked_entries_are_zero(self):
        m = extract_exponent(np.array([[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]]))
        mask = MaskMatrix.from_rows(["101", "000"])
        result = softmax_rows(m, mask).to_real()
        self.assertEqual(result[0, 1], 0.0)
        npt.assert_allclose(result[0, 0] + result[0, 2], 1.0, rtol=1e-7)
        npt.assert_array_equal(result[1], 0.0)

    def test_softmax_rejects_empty(self):
        with self.assertRaises(ValueError):
            softmax_rows(FixedPointMatrix.zeros(0, 3))

    def test_binarize_threshold_inclusive(self):
        m = extract_exponent(np.array([[0.25, 0.5, 0.125]]))
        self.assertEqual(binarize(m, 0.25), MaskMatrix.from_rows(["110"]))

    def test_binarize_rejects_bad_theta(self):
        m = extract_exponent(np.ones((1, 1)))
        for theta in (0.0, 1.5, -0.1):
            with self.assertRaises(ValueError):
                binarize(m, theta)


class TestDenseOracle(unittest.TestCase):
    """Test cases for the dense attention reference."""

    def setUp(self):
        rng = np.random.default_rng(3)
        self.x = extract_exponent(rng.uniform(-1, 1, size=(6, 8)))
        self.w_q = extract_exponent(rng.uniform(-1, 1, size=(8, 4)))
        self.w_k = extract_exponent(rng.uniform(-1, 1, size=(8, 4)))
        self.w_v = extract_exponent(rng.uniform(-1, 1, size=(8, 3)))

    def test_matches_textbook_attention(self):
        x, q, k, v = (m.to_real() for m in (self.x, self.w_q, self.w_k, self.w_v))
        scores = (x @ q) @ (x @ k).T / math.sqrt(4)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        expected = (e / e.sum(axis=1, keepdims=True)) @ (x @ v)
        z = dense_attention_oracle(self.x, self.w_q, self.w_k, self.w_v)
        npt.assert_allclose(z.to_real(), expected, rtol=1e-6, atol=1e-7)

    def test_all_ones_mask_is_unmasked(self):
        plain = dense_attention_oracle(self.x, self.w_q, self.w_k, self.w_v)
        masked = dense_attention_oracle(self.x, self.w_q, self.w_k, self.w_v, MaskMatrix.ones(6))
        self.assertEqual(plain, masked)

    def test_shape_errors(self):
        with self.assertRaises(DimensionError):
            dense_attention_oracle(self.x, self.w_q, self.w_k, self.w_v, MaskMatrix.ones(5))
        with self.assertRaises(DimensionError):
            dense_attention_oracle(self.x, self.w_q.transpose(), self.w_k, self.w_v)


class TestMaskMatrix(unittest.TestCase):
    """Test cases for MaskMatrix bookkeeping."""

    def test_density_tracks_set(self):
        mask = MaskMatrix.zeros(2)
        self.assertEqual(mask.density, 0.0)
        mask.set(0, 1, True)
        self.assertEqual(mask.nnz, 1)
        self.assertEqual(mask.density, 0.25)

    def test_from_rows(self):
        mask = MaskMatrix.from_rows(["1100", "0001"])
        self.assertEqual(mask.shape, (2, 4))
        self.assertEqual(mask.nnz, 3)


if __name__ == '__main__':
    unittest.main()
