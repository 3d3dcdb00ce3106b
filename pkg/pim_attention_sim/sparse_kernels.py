"""
Crossbar kernels: ReCAM-scheduled SDDMM, replication SpMM, the zero-input
SpMM baseline and dense DDMM.

Every kernel returns the numeric result together with a ScheduleResult.
The ``*_schedule`` builders produce the schedule alone from shapes and the
mask, which is all the cost model needs.
"""

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import HardwareConfig
from .crossbar_model import (
    ArrayId,
    EnergyLedger,
    Fabric,
    Placement,
    ag_queue_lengths,
    arrays_for_matrix,
    chain_length,
    ir_depth_exceeded,
    vmm_cycles,
    vmm_energy,
)
from .exceptions import CapacityError, DimensionError, IntegrityError
from .logging_setup import get_logger
from .mask_gen import SearchResult, random_mask, recam_search
from .tensor_core import FixedPointMatrix, MaskMatrix, exact_product, fixed_matmul

logger = get_logger(__name__)


class KernelKind(Enum):
    SDDMM = "SDDMM"
    SPMM = "SpMM"
    DDMM = "DDMM"
    SPMM_BASELINE = "SpMM_baseline"


@dataclass
class ScheduleResult:
    """
    Per-array work queues of one kernel and the costs derived from them.

    ``row_steps`` counts input-row issue steps on the busiest array; ``cycles``
    is the latency once those issues share their group ADC.
    """
    kernel: KernelKind
    array_queues: Dict[ArrayId, Sequence[int]] = field(default_factory=dict)
    replication_rows: int = 0
    cycles: int = 0
    row_steps: int = 0
    effective_macs: int = 0
    arrays_used: int = 0
    issue_span: int = 0
    waves: int = 1
    wave_write_ns: List[float] = field(default_factory=list)
    max_queue_depth: int = 0
    dispatches: int = 0
    memory_utilization: float = 0.0
    energy: EnergyLedger = field(default_factory=EnergyLedger)
    warnings: List[str] = field(default_factory=list)
    label: str = ""

    @property
    def issues(self) -> int:
        return sum(len(q) for q in self.array_queues.values())

    def summary(self) -> Dict[str, object]:
        return {
            "kernel": self.kernel.value,
            "cycles": self.cycles,
            "row_steps": self.row_steps,
            "arrays_used": self.arrays_used,
            "effective_macs": self.effective_macs,
            "replication_rows": self.replication_rows,
        }


def _ag_cycles(queues: Dict[ArrayId, Sequence[int]], hw: HardwareConfig, infinite_adc: bool) -> int:
    return vmm_cycles(ag_queue_lengths({a: len(q) for a, q in queues.items()}), hw, infinite_adc)


def _issue_energy(issues: int, hw: HardwareConfig, active_row_fraction: float = 1.0) -> EnergyLedger:
    return vmm_energy(issues, hw.adc_passes * hw.bit_serial_factor, hw, active_row_fraction)


def _resident(fabric: Optional[Fabric], hw: HardwareConfig, name: str, rows: int, cols: int) -> Placement:
    fabric = fabric or Fabric(hw)
    placement = fabric.runtime.get(name) or fabric.weights.placements.get(name)
    if placement is None:
        placement = fabric.allocate(name, rows, cols)
    return placement


def _check_ir(sched: ScheduleResult, hw: HardwareConfig) -> None:
    if ir_depth_exceeded(sched.max_queue_depth, hw):
        message = (f"{sched.kernel.value} queues up to {sched.max_queue_depth} input vectors per array, "
                   f"beyond the {hw.ir_bytes}-byte input register")
        logger.warning(message)
        sched.warnings.append(message)


# ---- SDDMM -----------------------------------------------------------------

def sddmm_schedule(mask: MaskMatrix, d: int, hw: HardwareConfig, placement: Optional[Placement] = None,
                   search: Optional[SearchResult] = None, infinite_adc: bool = False) -> ScheduleResult:
    """
    Queue row alpha of M on every array holding a column beta it matched.

    Args:
        mask: n x n mask
        d: Inner dimension (length of each X^T column vector)
        hw: Fabric configuration
        placement: Where X^T is resident; a fresh fabric placement if omitted
        search: Precomputed ReCAM search of ``mask``
        infinite_adc: Give every active array its own ADC

    Returns:
        ScheduleResult
    """
    placement = placement or _resident(None, hw, "Xt", d, mask.cols)
    search = search if search is not None else recam_search(mask, hw)
    queues: Dict[ArrayId, List[int]] = {}
    for match in search:
        groups = sorted({placement.group_of(beta) for beta in match.betas})
        for group in groups:
            for array_id in placement.group_arrays(group):
                queues.setdefault(array_id, []).append(match.alpha)

    sched = ScheduleResult(
        kernel=KernelKind.SDDMM,
        array_queues=queues,
        cycles=_ag_cycles(queues, hw, infinite_adc),
        effective_macs=mask.nnz * d,
        arrays_used=len(queues),
        issue_span=placement.chain,
        max_queue_depth=max((len(q) for q in queues.values()), default=0),
        row_steps=max((len(q) for q in queues.values()), default=0),
        dispatches=len(search),
        memory_utilization=1.0 if queues else 0.0,
        label="sddmm_S",
    )
    sched.energy = _issue_energy(sched.issues, hw)
    _check_ir(sched, hw)
    return sched


def masked_product(m: FixedPointMatrix, xt: FixedPointMatrix, mask: MaskMatrix) -> FixedPointMatrix:
    """(M X^T) at the set mask bits, exactly zero elsewhere."""
    if m.cols != xt.rows:
        raise DimensionError(f"inner dimensions disagree: {m.shape} x {xt.shape}")
    if mask.shape != (m.rows, xt.cols):
        raise DimensionError(f"mask {mask.shape} is not {m.rows}x{xt.cols}")
    exact, exponent = exact_product(m, xt)
    return FixedPointMatrix.from_exact(np.where(mask.bits, exact, 0), exponent)


def sddmm(m: FixedPointMatrix, xt: FixedPointMatrix, mask: MaskMatrix, hw: HardwareConfig,
          placement: Optional[Placement] = None, infinite_adc: bool = False) -> Tuple[FixedPointMatrix, ScheduleResult]:
    """
    Sampled dense-dense product S = (M X^T) restricted to the mask.

    Args:
        m: Left operand (n x d)
        xt: Right operand, resident as column vectors (d x n)
        mask: n x n mask; S is exactly zero where it is 0
        hw: Fabric configuration
        placement: Where X^T is resident
        infinite_adc: Give every active array its own ADC

    Returns:
        (S, ScheduleResult)

    Raises:
        DimensionError: If the shapes disagree
    """
    s = masked_product(m, xt, mask)
    sched = sddmm_schedule(mask, m.cols, hw, placement=placement, infinite_adc=infinite_adc)
    logger.debug(f"SDDMM {m.rows}x{m.cols}x{xt.cols}: {sched.cycles} cycles on {sched.arrays_used} arrays")
    return s, sched


# ---- DDMM ------------------------------------------------------------------

def ddmm_schedule(a_rows: int, placement: Placement, hw: HardwareConfig, infinite_adc: bool = False,
                  label: str = "ddmm") -> ScheduleResult:
    """Every array of the resident operand receives all ``a_rows`` input vectors."""
    queues: Dict[ArrayId, Sequence[int]] = {}
    if a_rows:
        queues = {array_id: range(a_rows) for array_id in placement.arrays}
    sched = ScheduleResult(
        kernel=KernelKind.DDMM,
        array_queues=queues,
        cycles=_ag_cycles(queues, hw, infinite_adc),
        effective_macs=a_rows * placement.rows * placement.cols,
        arrays_used=len(queues),
        issue_span=placement.chain,
        max_queue_depth=a_rows if queues else 0,
        row_steps=a_rows if queues else 0,
        memory_utilization=1.0 if queues else 0.0,
        label=label,
    )
    sched.energy = _issue_energy(sched.issues, hw)
    return sched


def ddmm(a: FixedPointMatrix, b: FixedPointMatrix, hw: HardwareConfig, placement: Optional[Placement] = None,
         infinite_adc: bool = False) -> Tuple[FixedPointMatrix, ScheduleResult]:
    """
    Dense product C = A B with B resident in arrays.

    Raises:
        DimensionError: If inner dimensions disagree
    """
    if a.cols != b.rows:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    placement = placement or _resident(None, hw, "B", b.rows, b.cols)
    c = fixed_matmul(a, b)
    return c, ddmm_schedule(a.rows, placement, hw, infinite_adc)


# ---- SpMM ------------------------------------------------------------------

def check_integrity(s: FixedPointMatrix, v: FixedPointMatrix, mask: MaskMatrix) -> None:
    if s.shape != mask.shape:
        raise DimensionError(f"mask {mask.shape} does not match S {s.shape}")
    if s.cols != v.rows:
        raise DimensionError(f"inner dimensions disagree: {s.shape} x {v.shape}")
    off_mask = np.count_nonzero(s.data[~mask.bits])
    if off_mask:
        raise IntegrityError(f"S has {off_mask} nonzero entries outside the mask")


def spmm_arrays_per_row(nnz: int, d_v: int, hw: HardwareConfig) -> int:
    """Arrays holding the replicated V rows of one output row."""
    return arrays_for_matrix(nnz, d_v, hw)


def _waves(row_arrays: List[Tuple[int, int]], capacity: int) -> List[List[Tuple[int, int]]]:
    waves: List[List[Tuple[int, int]]] = []
    current: List[Tuple[int, int]] = []
    used = 0
    for alpha, arrays in row_arrays:
        if arrays > capacity:
            raise CapacityError(f"output row {alpha} needs {arrays} arrays but only {capacity} are free",
                                required=arrays, available=capacity)
        if used + arrays > capacity:
            waves.append(current)
            current, used = [], 0
        current.append((alpha, arrays))
        used += arrays
    if current:
        waves.append(current)
    return waves


def spmm_schedule(mask: MaskMatrix, d_v: int, hw: HardwareConfig, fabric: Optional[Fabric] = None,
                  search: Optional[SearchResult] = None, infinite_adc: bool = False) -> ScheduleResult:
    """
    Replicate the V rows each output row needs into its own arrays and issue all rows at once.

    When the free WEA tiles cannot hold every replica, output rows run in
    waves of the largest batch that fits; wave cycles add up.

    Raises:
        CapacityError: If a single output row does not fit
    """
    fabric = fabric or Fabric(hw)
    search = search if search is not None else recam_search(mask, hw)
    row_arrays = [(match.alpha, spmm_arrays_per_row(len(match), d_v, hw)) for match in search]
    nnz_by_row = {match.alpha: len(match) for match in search}
    capacity = fabric.free_wea_arrays()
    waves = _waves(row_arrays, capacity) if row_arrays else []

    sched = ScheduleResult(kernel=KernelKind.SPMM, label="spmm_Z", dispatches=len(search),
                           waves=max(1, len(waves)))
    for index, wave in enumerate(waves):
        name = f"V_rep{index}"
        placement = fabric.allocate_arrays(name, sum(a for _, a in wave))
        cursor = 0
        wave_queues: Dict[ArrayId, List[int]] = {}
        rows_per_array: Dict[ArrayId, int] = {}
        for alpha, arrays in wave:
            chain = chain_length(nnz_by_row[alpha], hw)
            for offset in range(arrays):
                array_id = placement.arrays[cursor + offset]
                wave_queues[array_id] = [alpha]
                link = offset % chain
                rows_per_array[array_id] = max(0, min(hw.xb_rows, nnz_by_row[alpha] - link * hw.xb_rows))
            cursor += arrays
            sched.issue_span = max(sched.issue_span, chain)
        sched.cycles += _ag_cycles(wave_queues, hw, infinite_adc)
        write = fabric.write_rows(rows_per_array)
        sched.wave_write_ns.append(write.latency_ns)
        sched.energy.add("write", write.energy_pj)
        sched.array_queues.update(wave_queues)
        fabric.free(name)

    if len(waves) > 1:
        message = f"SpMM replication exceeds free WEA capacity; running {len(waves)} waves"
        logger.warning(message)
        sched.warnings.append(message)

    sched.replication_rows = mask.nnz
    sched.effective_macs = mask.nnz * d_v
    sched.arrays_used = sum(a for _, a in row_arrays)
    sched.max_queue_depth = 1 if sched.array_queues else 0
    sched.row_steps = len(waves)
    sched.memory_utilization = 1.0 if sched.array_queues else 0.0
    sched.energy.merge(_issue_energy(sched.issues, hw))
    return sched


def spmm(s: FixedPointMatrix, v: FixedPointMatrix, mask: MaskMatrix, hw: HardwareConfig,
         fabric: Optional[Fabric] = None, infinite_adc: bool = False) -> Tuple[FixedPointMatrix, ScheduleResult]:
    """
    Z = S V through per-row replication of the needed V rows.

    Args:
        s: Masked scores (n x n), exactly zero off the mask
        v: Values (n x d_v)
        mask: n x n mask
        hw: Fabric configuration
        fabric: Fabric supplying free WEA tiles
        infinite_adc: Give every active array its own ADC

    Returns:
        (Z, ScheduleResult)

    Raises:
        IntegrityError: If S is nonzero off the mask
        CapacityError: If one output row's replicas do not fit
    """
    check_integrity(s, v, mask)
    sched = spmm_schedule(mask, v.cols, hw, fabric=fabric, infinite_adc=infinite_adc)
    z = fixed_matmul(s, v)
    logger.debug(f"SpMM {s.rows}x{v.cols}: {sched.cycles} cycles, {sched.arrays_used} arrays, {sched.waves} wave(s)")
    return z, sched


def spmm_baseline_schedule(mask: MaskMatrix, d_v: int, hw: HardwareConfig, placement: Optional[Placement] = None,
                           infinite_adc: bool = False) -> ScheduleResult:
    """V stored once; every S row is streamed with zero signals on the masked-out inputs."""
    n = mask.rows
    placement = placement or _resident(None, hw, "V", mask.cols, d_v)
    queues: Dict[ArrayId, Sequence[int]] = {}
    if n and placement.arrays:
        queues = {array_id: range(n) for array_id in placement.arrays}
    sched = ScheduleResult(
        kernel=KernelKind.SPMM_BASELINE,
        array_queues=queues,
        cycles=_ag_cycles(queues, hw, infinite_adc),
        effective_macs=mask.nnz * d_v,
        arrays_used=len(queues),
        issue_span=placement.chain,
        max_queue_depth=n if queues else 0,
        row_steps=n if queues else 0,
        memory_utilization=mask.density,
        label="spmm_baseline_Z",
    )
    sched.energy = _issue_energy(sched.issues, hw, active_row_fraction=mask.density)
    return sched


def spmm_baseline(s: FixedPointMatrix, v: FixedPointMatrix, mask: MaskMatrix, hw: HardwareConfig,
                  placement: Optional[Placement] = None,
                  infinite_adc: bool = False) -> Tuple[FixedPointMatrix, ScheduleResult]:
    """Zero-input SpMM over a single copy of V; numerically identical to spmm."""
    check_integrity(s, v, mask)
    return fixed_matmul(s, v), spmm_baseline_schedule(mask, v.cols, hw, placement, infinite_adc)


# ---- studies ---------------------------------------------------------------

@dataclass
class SpeedupPoint:
    xb_size: int
    density: float
    ddmm_cycles: int
    sddmm_cycles: int
    ddmm_energy_pj: float
    sddmm_energy_pj: float

    @property
    def speedup(self) -> float:
        return self.ddmm_cycles / self.sddmm_cycles if self.sddmm_cycles else float("inf")

    def to_dict(self) -> Dict[str, float]:
        result = dataclasses.asdict(self)
        result["speedup"] = self.speedup
        return result


def kernel_speedup_vs_density(n: int, d: int, densities: Sequence[float], hw: HardwareConfig,
                              xb_sizes: Sequence[int] = (32, 64, 128), seed: int = 0) -> List[SpeedupPoint]:
    """
    DDMM over SDDMM cycle ratio for random masks, swept over density and array size.

    One mask per density is drawn from ``seed`` and reused for every array size.

    Raises:
        ValueError: If a density lies outside (0, 1]
    """
    for density in densities:
        if not 0 < density <= 1:
            raise ValueError(f"density must be in (0, 1], got {density}")
    rng = np.random.default_rng(seed)
    masks = [(density, random_mask(n, density, rng)) for density in densities]

    points: List[SpeedupPoint] = []
    for size in xb_sizes:
        sized = dataclasses.replace(hw, xb_rows=size, xb_cols=size)
        placement = Fabric(sized).allocate("Xt", d, n)
        dense = ddmm_schedule(n, placement, sized)
        for density, mask in masks:
            sparse = sddmm_schedule(mask, d, sized, placement=placement)
            points.append(SpeedupPoint(size, density, dense.cycles, sparse.cycles,
                                       dense.energy.total, sparse.energy.total))
    return points


@dataclass
class SpmmTradeoff:
    """SpMM normalized to the zero-input baseline."""
    memory_utilization: float
    throughput: float
    replication: float
    spmm_cycles: int
    baseline_cycles: int
    spmm_arrays: int
    baseline_arrays: int

    def to_dict(self) -> Dict[str, float]:
        return dataclasses.asdict(self)


def spmm_tradeoff(s: Optional[FixedPointMatrix], v: FixedPointMatrix, mask: MaskMatrix,
                  hw: HardwareConfig) -> SpmmTradeoff:
    """Utilization, throughput and replication of spmm relative to spmm_baseline."""
    if s is not None:
        check_integrity(s, v, mask)
    fast = spmm_schedule(mask, v.cols, hw)
    base = spmm_baseline_schedule(mask, v.cols, hw)
    return SpmmTradeoff(
        memory_utilization=fast.memory_utilization / base.memory_utilization if base.memory_utilization else 0.0,
        throughput=base.cycles / fast.cycles if fast.cycles else 0.0,
        replication=fast.arrays_used / base.arrays_used if base.arrays_used else 0.0,
        spmm_cycles=fast.cycles,
        baseline_cycles=base.cycles,
        spmm_arrays=fast.arrays_used,
        baseline_arrays=base.arrays_used,
    )
