"""
Tests for mask generation, the ReCAM search and the mask file formats.
"""
import os
import shutil
import tempfile
import unittest

import numpy as np
import numpy.testing as npt

from pim_attention_sim.config import HardwareConfig, QuantConfig
from pim_attention_sim.exceptions import DimensionError, MaskFileError
from pim_attention_sim.mask_gen import (
    MASK_MAGIC,
    banded_mask,
    generate_mask,
    lower_triangular_mask,
    mask_stats,
    random_mask,
    read_mask,
    recam_search,
    row_balanced_mask,
    tile_mask,
    write_mask_binary,
    write_mask_text,
)
from pim_attention_sim.tensor_core import IntMatrix, MaskMatrix, extract_exponent, precompute_score_weights, quantize


class TestGenerateMask(unittest.TestCase):
    """Test cases for the quantized pruning path."""

    def setUp(self):
        rng = np.random.default_rng(11)
        self.q = QuantConfig(bits=4, d=4)
        self.x = extract_exponent(rng.uniform(-1, 1, size=(8, 6)))
        w_q = extract_exponent(rng.uniform(-1, 1, size=(6, 4)))
        w_k = extract_exponent(rng.uniform(-1, 1, size=(6, 4)))
        self.w_s_quant = quantize(precompute_score_weights(w_q, w_k), self.q)

    def test_shape_and_at_least_one_bit_per_row(self):
        """The row maximum always clears half the uniform weight."""
        mask = generate_mask(self.x, self.w_s_quant, self.q)
        self.assertEqual(mask.shape, (8, 8))
        self.assertTrue(all(n > 0 for n in mask_stats(mask).per_row_nnz))

    def test_deterministic(self):
        first = generate_mask(self.x, self.w_s_quant, self.q)
        second = generate_mask(self.x, self.w_s_quant, self.q)
        self.assertEqual(first, second)

    def test_theta_one_keeps_little(self):
        loose = generate_mask(self.x, self.w_s_quant, self.q)
        strict = generate_mask(self.x, self.w_s_quant, QuantConfig(bits=4, d=4, theta=1.0))
        self.assertLessEqual(strict.nnz, loose.nnz)

    def test_rejects_mismatched_weights(self):
        with self.assertRaises(DimensionError):
            generate_mask(self.x, IntMatrix(np.zeros((5, 5)), 1.0, 4), self.q)

    def test_rejects_empty_input(self):
        empty = extract_exponent(np.zeros((0, 6)))
        with self.assertRaises(DimensionError):
            generate_mask(empty, self.w_s_quant, self.q)


class TestRecamSearch(unittest.TestCase):
    """Test cases for the row-by-row search."""

    def test_matches_in_row_order(self):
        mask = MaskMatrix.from_rows(["0110", "0000", "1001", "0001"])
        result = recam_search(mask)
        self.assertEqual([m.alpha for m in result], [0, 2, 3])
        self.assertEqual(result[0].betas, (1, 2))
        self.assertEqual(result[1].betas, (0, 3))
        self.assertEqual(result.skipped_rows, 1)
        self.assertEqual(result.search_cycles, 4)

    def test_empty_mask(self):
        result = recam_search(MaskMatrix.zeros(3))
        self.assertEqual(len(result), 0)
        self.assertEqual(result.skipped_rows, 3)

    def test_tiled_search_merges_tiles(self):
        """A mask larger than one ReCAM array is split and searched in parallel."""
        hw = HardwareConfig(recam_rows=2, recam_cols=2, recam_arrays=2, tiles=1)
        mask = MaskMatrix.from_rows(["1001", "0100", "0010", "1111"])
        tiles = tile_mask(mask, hw)
        self.assertEqual(len(tiles), 4)
        self.assertEqual([(t.row0, t.col0) for t in tiles], [(0, 0), (0, 2), (2, 0), (2, 2)])
        result = recam_search(mask, hw)
        self.assertEqual([m.betas for m in result], [(0, 3), (1,), (2,), (0, 1, 2, 3)])
        # four tiles of two rows on two arrays
        self.assertEqual(result.search_cycles, 4)

    def test_every_set_bit_found_once(self):
        mask = random_mask(40, 0.2, np.random.default_rng(5))
        found = sum(len(m) for m in recam_search(mask, HardwareConfig(recam_rows=16, recam_cols=16)))
        self.assertEqual(found, mask.nnz)


class TestSyntheticMasks(unittest.TestCase):
    """Test cases for the synthetic mask generators."""

    def test_random_mask_density(self):
        mask = random_mask(320, 0.1, np.random.default_rng(0))
        self.assertAlmostEqual(mask.density, 0.1, delta=0.01)

    def test_random_mask_full_density(self):
        self.assertEqual(random_mask(4, 1.0, np.random.default_rng(0)), MaskMatrix.ones(4))

    def test_row_balanced(self):
        mask = row_balanced_mask(64, 8, np.random.default_rng(2))
        self.assertEqual(set(mask_stats(mask).per_row_nnz), {8})
        with self.assertRaises(ValueError):
            row_balanced_mask(4, 5, np.random.default_rng(2))

    def test_banded_mask_is_symmetric_band(self):
        mask = banded_mask(10, 0.3)
        npt.assert_array_equal(mask.bits, mask.bits.T)
        self.assertTrue(np.all(np.diag(mask.bits)))
        self.assertAlmostEqual(mask.density, 0.3, delta=0.1)

    def test_lower_triangular(self):
        mask = lower_triangular_mask(4)
        self.assertEqual(mask.nnz, 10)
        self.assertFalse(mask.bits[0, 1])

    def test_mask_stats(self):
        stats = mask_stats(MaskMatrix.from_rows(["110", "001"]))
        self.assertEqual(stats.per_row_nnz, [2, 1])
        self.assertEqual(stats.per_col_nnz, [1, 1, 1])
        self.assertEqual(stats.to_dict()["density"], 0.5)


class TestMaskFiles(unittest.TestCase):
    """Test cases for the text and binary mask formats."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.mask = random_mask(13, 0.3, np.random.default_rng(9), cols=11)

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def _path(self, name):
        return os.path.join(self.temp_dir, name)

    def test_text_format(self):
        path = self._path("mask.txt")
        write_mask_text(self.mask, path)
        with open(path) as f:
            self.assertEqual(f.readline().strip(), "13 11")
        self.assertEqual(read_mask(path), self.mask)

    def test_binary_format(self):
        path = self._path("mask.bin")
        write_mask_binary(self.mask, path)
        with open(path, "rb") as f:
            self.assertTrue(f.read().startswith(MASK_MAGIC))
        self.assertEqual(read_mask(path), self.mask)

    def test_missing_file(self):
        with self.assertRaises(MaskFileError):
            read_mask(self._path("absent.txt"))

    def test_row_count_mismatch(self):
        path = self._path("short.txt")
        with open(path, "w") as f:
            f.write("3 2\n10\n01\n")
        with self.assertRaises(MaskFileError):
            read_mask(path)

    def test_bad_characters(self):
        path = self._path("bad.txt")
        with open(path, "w") as f:
            f.write("1 3\n1x0\n")
        with self.assertRaises(MaskFileError):
            read_mask(path)

    def test_truncated_binary(self):
        path = self._path("trunc.bin")
        write_mask_binary(self.mask, path)
        with open(path, "rb") as f:
            payload = f.read()
        with open(path, "wb") as f:
            f.write(payload[:-1])
        with self.assertRaises(MaskFileError):
            read_mask(path)


if __name__ == '__main__':
    unittest.main()
