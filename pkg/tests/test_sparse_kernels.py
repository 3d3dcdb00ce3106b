"""
Tests for the SDDMM, SpMM and DDMM crossbar kernels.
"""
import itertools
import unittest
from collections import defaultdict

import numpy as np
import numpy.testing as npt

from pim_attention_sim.config import HardwareConfig
from pim_attention_sim.crossbar_model import Fabric
from pim_attention_sim.exceptions import CapacityError, DimensionError, IntegrityError
from pim_attention_sim.mask_gen import random_mask, row_balanced_mask
from pim_attention_sim.sparse_kernels import (
    KernelKind,
    ddmm,
    ddmm_schedule,
    kernel_speedup_vs_density,
    masked_product,
    sddmm,
    sddmm_schedule,
    spmm,
    spmm_baseline,
    spmm_baseline_schedule,
    spmm_schedule,
    spmm_tradeoff,
)
from pim_attention_sim.tensor_core import FixedPointMatrix, MaskMatrix, extract_exponent, fixed_matmul, hard_mask

WORKED_MASK = ["1100", "0110", "0011", "1001"]


def replay_cycles(queues, hw, infinite_adc=False):
    """Cycle-by-cycle replay: each ADC converts one queued issue of a distinct array per pass."""
    pending = defaultdict(dict)
    for array_id, queue in queues.items():
        if len(queue):
            pending[array_id.ag_key][array_id] = len(queue) * hw.adc_passes
    cycles = 0
    while any(pending.values()):
        cycles += 1
        for ag, arrays in pending.items():
            adcs = len(arrays) if infinite_adc else hw.adc_per_ag
            for array_id in sorted(arrays, key=lambda a: (-arrays[a], a))[:adcs]:
                arrays[array_id] -= 1
            for array_id in [a for a, left in arrays.items() if left == 0]:
                del arrays[array_id]
    return cycles * hw.bit_serial_factor


class TestSddmm(unittest.TestCase):
    """Test cases for the ReCAM-scheduled SDDMM."""

    def setUp(self):
        self.hw = HardwareConfig()

    def test_worked_example_two_cycles(self):
        """Eight set bits, two per column, each column on its own AG."""
        mask = MaskMatrix.from_rows(WORKED_MASK)
        placement = Fabric(self.hw).allocate("Xt", 4, 4)
        self.assertEqual(len({a.ag_key for a in placement.arrays}), 4)
        sparse = sddmm_schedule(mask, 4, self.hw, placement=placement)
        dense = ddmm_schedule(4, placement, self.hw)
        self.assertEqual(sparse.cycles, 2)
        self.assertEqual(dense.cycles, 4)
        self.assertEqual(sparse.effective_macs, 8 * 4)
        self.assertEqual(sparse.kernel, KernelKind.SDDMM)

    def test_result_zero_off_mask(self):
        rng = np.random.default_rng(4)
        m = extract_exponent(rng.uniform(-1, 1, size=(6, 5)))
        xt = extract_exponent(rng.uniform(-1, 1, size=(5, 6)))
        mask = random_mask(6, 0.4, rng)
        s, sched = sddmm(m, xt, mask, self.hw)
        self.assertEqual(np.count_nonzero(s.data[~mask.bits]), 0)
        npt.assert_allclose(s.to_real()[mask.bits], (m.to_real() @ xt.to_real())[mask.bits],
                            rtol=1e-6, atol=1e-8)
        self.assertGreater(sched.cycles, 0)

    def test_masked_product_shape_errors(self):
        m = FixedPointMatrix.zeros(3, 2)
        with self.assertRaises(DimensionError):
            masked_product(m, FixedPointMatrix.zeros(3, 3), MaskMatrix.ones(3))
        with self.assertRaises(DimensionError):
            masked_product(m, FixedPointMatrix.zeros(2, 3), MaskMatrix.ones(2))

    def test_empty_mask_costs_nothing(self):
        sched = sddmm_schedule(MaskMatrix.zeros(8), 16, self.hw)
        self.assertEqual(sched.cycles, 0)
        self.assertEqual(sched.arrays_used, 0)

    def test_infinite_adc_never_slower(self):
        mask = random_mask(64, 0.2, np.random.default_rng(1))
        finite = sddmm_schedule(mask, 64, self.hw)
        ideal = sddmm_schedule(mask, 64, self.hw, infinite_adc=True)
        self.assertLessEqual(ideal.cycles, finite.cycles)


class TestCycleReplay(unittest.TestCase):
    """Schedule cycle counts against a brute-force per-cycle replay."""

    def _hw(self, adc_per_ag=1):
        return HardwareConfig(tiles=1, roa_ags_per_tile=1, wea_ags_per_tile=3, arrays_per_ag=2,
                              adc_per_ag=adc_per_ag, recam_arrays=1)

    def _check(self, mask, hw, placement):
        for infinite_adc in (False, True):
            sched = sddmm_schedule(mask, 8, hw, placement=placement, infinite_adc=infinite_adc)
            self.assertEqual(sched.cycles, replay_cycles(sched.array_queues, hw, infinite_adc), mask.bits)

    def test_exhaustive_small_masks(self):
        """Every mask up to 4x4; two ADCs per AG up to 3x3."""
        for n in range(1, 5):
            for adc in ((1, 2) if n < 4 else (1,)):
                hw = self._hw(adc)
                placement = Fabric(hw).allocate("Xt", 8, n)
                for bits in itertools.product((False, True), repeat=n * n):
                    self._check(MaskMatrix(np.array(bits).reshape(n, n)), hw, placement)

    def _columns_by_ag(self, n, placement):
        by_ag = defaultdict(list)
        for beta in range(n):
            by_ag[placement.group_arrays(placement.group_of(beta))[0].ag_key].append(beta)
        return list(by_ag.values())

    def _representative(self, counts):
        """Column beta set in its first counts[beta] rows."""
        n = len(counts)
        return MaskMatrix(np.arange(n)[:, None] < np.asarray(counts)[None, :])

    def _column_classes(self, n, placement):
        """One mask per column-count class, counts taken as a multiset within each AG."""
        groups = self._columns_by_ag(n, placement)
        choices = [itertools.combinations_with_replacement(range(n + 1), len(cols)) for cols in groups]
        for picked in itertools.product(*[list(c) for c in choices]):
            counts = [0] * n
            for cols, values in zip(groups, picked):
                for beta, value in zip(cols, values):
                    counts[beta] = value
            yield self._representative(counts)

    def _canonical(self, mask, n, placement):
        counts = mask.bits.sum(axis=0)
        for cols in self._columns_by_ag(n, placement):
            counts[cols] = sorted(counts[cols])
        return self._representative(counts)

    def test_exhaustive_column_classes(self):
        """Every 5x5 and 6x6 mask, one representative per column-count class."""
        for n in (5, 6):
            for adc in (1, 2):
                hw = self._hw(adc)
                placement = Fabric(hw).allocate("Xt", 8, n)
                self.assertEqual(len({a.ag_key for a in placement.arrays}), 3)
                for mask in self._column_classes(n, placement):
                    self._check(mask, hw, placement)

    def test_masks_cost_like_their_class(self):
        """Queue lengths are column counts; a mask and its class representative cost the same."""
        rng = np.random.default_rng(21)
        for n in (5, 6):
            for adc in (1, 2):
                hw = self._hw(adc)
                placement = Fabric(hw).allocate("Xt", 8, n)
                for _ in range(200):
                    mask = random_mask(n, rng.uniform(0.05, 1.0), rng)
                    self._check(mask, hw, placement)
                    sched = sddmm_schedule(mask, 8, hw, placement=placement)
                    counts = mask.bits.sum(axis=0)
                    for beta in range(n):
                        array_id = placement.group_arrays(beta)[0]
                        self.assertEqual(len(sched.array_queues.get(array_id, ())), counts[beta])
                    canonical = sddmm_schedule(self._canonical(mask, n, placement), 8, hw, placement=placement)
                    self.assertEqual(sched.cycles, canonical.cycles, mask.bits)

    def test_ddmm_and_baseline_replay(self):
        hw = self._hw()
        placement = Fabric(hw).allocate("V", 40, 3)
        dense = ddmm_schedule(5, placement, hw)
        self.assertEqual(dense.cycles, replay_cycles(dense.array_queues, hw))
        base = spmm_baseline_schedule(MaskMatrix.ones(40), 3, HardwareConfig())
        self.assertEqual(base.cycles, replay_cycles(base.array_queues, HardwareConfig()))


class TestSpmm(unittest.TestCase):
    """Test cases for replication SpMM and the zero-input baseline."""

    def setUp(self):
        self.hw = HardwareConfig()
        self.rng = np.random.default_rng(8)

    def _operands(self, n, d_v, density):
        mask = random_mask(n, density, self.rng)
        s = hard_mask(extract_exponent(self.rng.uniform(-1, 1, size=(n, n))), mask)
        v = extract_exponent(self.rng.uniform(-1, 1, size=(n, d_v)))
        return s, v, mask

    def test_replication_trade_off(self):
        """32 nonzeros per row: one issue per array against 320 for the baseline."""
        mask = row_balanced_mask(320, 32, np.random.default_rng(0))
        fast = spmm_schedule(mask, 64, self.hw, infinite_adc=True)
        base = spmm_baseline_schedule(mask, 64, self.hw, infinite_adc=True)
        self.assertEqual(fast.cycles, 1)
        self.assertEqual(base.cycles, 320)
        self.assertEqual(fast.arrays_used, 320 * 64)
        self.assertEqual(base.arrays_used, 10 * 64)
        self.assertEqual(fast.waves, 1)

    def test_row_steps_under_shared_adc(self):
        """Default fabric: row steps stay n against 1; the group ADC stretches cycles by 12 for both."""
        mask = row_balanced_mask(320, 32, np.random.default_rng(0))
        fast = spmm_schedule(mask, 64, self.hw)
        base = spmm_baseline_schedule(mask, 64, self.hw)
        self.assertEqual(base.row_steps, 320)
        self.assertEqual(fast.row_steps, 1)
        self.assertEqual(base.cycles, 3840)
        self.assertEqual(fast.cycles, 12)
        self.assertEqual(base.summary()["row_steps"], 320)
        self.assertEqual(base.cycles // base.row_steps, fast.cycles // fast.row_steps)

    def test_row_steps_ignore_sparsity(self):
        for density in (0.1, 0.5, 1.0):
            mask = random_mask(40, density, np.random.default_rng(3))
            base = spmm_baseline_schedule(mask, 8, self.hw)
            self.assertEqual(base.row_steps, 40)

    def test_trade_off_ratios(self):
        mask = row_balanced_mask(320, 32, np.random.default_rng(0))
        v = FixedPointMatrix.zeros(320, 64)
        tradeoff = spmm_tradeoff(None, v, mask, self.hw)
        self.assertEqual(tradeoff.throughput, 320.0)
        self.assertEqual(tradeoff.replication, 32.0)
        self.assertAlmostEqual(tradeoff.memory_utilization, 10.0)

    def test_spmm_matches_baseline_bit_exact(self):
        s, v, mask = self._operands(12, 5, 0.3)
        z, _ = spmm(s, v, mask, self.hw)
        z_base, _ = spmm_baseline(s, v, mask, self.hw)
        self.assertEqual(z, z_base)
        self.assertEqual(z, fixed_matmul(s, v))

    def test_integrity_check(self):
        s, v, mask = self._operands(6, 2, 0.5)
        full = extract_exponent(np.ones((6, 6)))
        with self.assertRaises(IntegrityError):
            spmm(full, v, MaskMatrix.identity(6), self.hw)
        with self.assertRaises(DimensionError):
            spmm(s, FixedPointMatrix.zeros(5, 2), mask, self.hw)

    def test_waves_when_capacity_is_short(self):
        hw = HardwareConfig(tiles=2, roa_ags_per_tile=1, wea_ags_per_tile=2, arrays_per_ag=2)
        sched = spmm_schedule(MaskMatrix.ones(4), 3, hw)
        self.assertEqual(sched.waves, 2)
        self.assertEqual(sched.cycles, 4)
        self.assertEqual(len(sched.wave_write_ns), 2)
        self.assertTrue(any("waves" in w for w in sched.warnings))

    def test_row_too_large_for_fabric(self):
        hw = HardwareConfig(tiles=2, roa_ags_per_tile=1, wea_ags_per_tile=2, arrays_per_ag=2)
        with self.assertRaises(CapacityError):
            spmm_schedule(MaskMatrix.ones(4), 9, hw)

    def test_write_energy_recorded(self):
        sched = spmm_schedule(random_mask(32, 0.2, self.rng), 8, self.hw)
        self.assertGreater(sched.energy.write, 0.0)
        self.assertEqual(sched.replication_rows, sched.effective_macs // 8)


class TestDdmm(unittest.TestCase):
    """Test cases for the dense product."""

    def test_numeric_result(self):
        rng = np.random.default_rng(2)
        a = extract_exponent(rng.uniform(-1, 1, size=(4, 40)))
        b = extract_exponent(rng.uniform(-1, 1, size=(40, 3)))
        c, sched = ddmm(a, b, HardwareConfig())
        self.assertEqual(c, fixed_matmul(a, b))
        self.assertEqual(sched.issue_span, 2)
        self.assertEqual(sched.effective_macs, 4 * 40 * 3)

    def test_default_projection_cycles(self):
        """X W for a 320 x 512 input and a preloaded 512 x 64 weight."""
        hw = HardwareConfig()
        placement = Fabric(hw).preload("W", (512, 64))
        self.assertEqual(ddmm_schedule(320, placement, hw).cycles, 3840)


class TestSpeedupStudy(unittest.TestCase):
    """Test cases for SDDMM speedup over DDMM."""

    @classmethod
    def setUpClass(cls):
        cls.points = kernel_speedup_vs_density(320, 64, [0.1, 1.0], HardwareConfig(), seed=0)

    def _point(self, size, density):
        return next(p for p in self.points if p.xb_size == size and p.density == density)

    def test_speedup_near_ten_at_density_tenth(self):
        self.assertGreaterEqual(self._point(32, 0.1).speedup, 8.0)
        self.assertLessEqual(self._point(32, 0.1).speedup, 10.0)

    def test_full_density_has_no_speedup(self):
        self.assertEqual(self._point(32, 1.0).speedup, 1.0)

    def test_speedup_falls_with_array_size(self):
        speedups = [self._point(size, 0.1).speedup for size in (32, 64, 128)]
        self.assertGreater(speedups[0], speedups[1])
        self.assertGreater(speedups[1], speedups[2])

    def test_sparse_energy_below_dense(self):
        point = self._point(32, 0.1)
        self.assertLess(point.sddmm_energy_pj, point.ddmm_energy_pj)
        self.assertIn("speedup", point.to_dict())

    def test_rejects_bad_density(self):
        with self.assertRaises(ValueError):
            kernel_speedup_vs_density(8, 4, [0.0], HardwareConfig())


if __name__ == '__main__':
    unittest.main()
