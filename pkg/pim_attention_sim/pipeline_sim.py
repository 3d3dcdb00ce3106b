"""
End-to-end timeline simulation of one attention layer under each calculation mode.

Each mode builds a dataflow graph of kernels, writes, transfers and unit
passes; the graph is list-scheduled as early as possible and the timeline,
energy ledger and throughput metrics are collected into a SimReport.
"""

import copy
import math
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import HardwareConfig, QuantConfig
from .crossbar_model import (
    EnergyLedger,
    Fabric,
    Placement,
    recam_write_cost,
    static_energy,
    transfer_cost,
    unit_energy,
    unit_stream_ns,
)
from .exceptions import DimensionError
from .logging_setup import get_logger
from .mask_gen import generate_mask, recam_search
from .scheduler import (
    DataflowGraph,
    DataflowStep,
    TimelineEvent,
    asap_schedule,
    find_event,
    makespan,
    peak_parallel_arrays,
    validate_timeline,
    wait_for_write_ns,
)
from .sparse_kernels import (
    ScheduleResult,
    check_integrity,
    ddmm_schedule,
    masked_product,
    spmm_baseline_schedule,
    spmm_schedule,
    sddmm_schedule,
)
from .tensor_core import (
    FixedPointMatrix,
    IntMatrix,
    MaskMatrix,
    fixed_matmul,
    precompute_score_weights,
    quantize,
    scale_matrix,
    softmax_rows,
)

logger = get_logger(__name__)


class CalculationMode(Enum):
    CPSAA = "CPSAA"
    CPDAA = "CPDAA"
    REBERT_LIKE = "ReBERT_like"
    RETRANSFORMER_LIKE = "ReTransformer_like"
    S_REBERT_LIKE = "S_ReBERT_like"
    S_RETRANSFORMER_LIKE = "S_ReTransformer_like"

    @classmethod
    def parse(cls, text: str) -> "CalculationMode":
        """Accept the value, the member name or a short form such as ``rebert``."""
        key = text.strip().lower().replace("-", "_")
        for mode in cls:
            if key in (mode.value.lower(), mode.name.lower(), mode.value.lower().replace("_like", "")):
                return mode
        raise ValueError(f"Unknown calculation mode: {text}")

    @property
    def uses_recam_dataflow(self) -> bool:
        return self in (CalculationMode.CPSAA, CalculationMode.CPDAA)

    @property
    def rebert_family(self) -> bool:
        return self in (CalculationMode.REBERT_LIKE, CalculationMode.S_REBERT_LIKE)

    @property
    def sparse_baseline(self) -> bool:
        return self in (CalculationMode.S_REBERT_LIKE, CalculationMode.S_RETRANSFORMER_LIKE)

    @property
    def masked(self) -> bool:
        """Whether the workload mask changes the attention result."""
        return self in (CalculationMode.CPSAA, CalculationMode.S_REBERT_LIKE, CalculationMode.S_RETRANSFORMER_LIKE)


BASE_MODES = (
    CalculationMode.CPSAA,
    CalculationMode.CPDAA,
    CalculationMode.REBERT_LIKE,
    CalculationMode.RETRANSFORMER_LIKE,
)
SPARSE_BASELINE_MODES = (CalculationMode.S_REBERT_LIKE, CalculationMode.S_RETRANSFORMER_LIKE)


@dataclass(frozen=True)
class IdealKnobs:
    """Cost terms that can be zeroed to study their impact."""
    zero_write: bool = False
    zero_transfer: bool = False
    infinite_adc: bool = False
    zero_ctrl: bool = False

    @classmethod
    def names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def single(cls, name: str) -> "IdealKnobs":
        if name not in cls.names():
            raise ValueError(f"Unknown knob: {name}")
        return cls(**{name: True})

    def active(self) -> List[str]:
        return [name for name in self.names() if getattr(self, name)]


@dataclass
class LayerWeights:
    """Attention (and optional FC) weights of one encoder layer."""
    w_q: FixedPointMatrix
    w_k: FixedPointMatrix
    w_v: FixedPointMatrix
    w_fc: Optional[FixedPointMatrix] = None
    _w_s: Optional[FixedPointMatrix] = field(default=None, init=False, repr=False)
    _w_s_quant: Dict[Tuple[int, Optional[float]], IntMatrix] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if not (self.w_q.rows == self.w_k.rows == self.w_v.rows):
            raise DimensionError(f"weights disagree on d_model: {self.w_q.shape}, {self.w_k.shape}, {self.w_v.shape}")
        if self.w_q.cols != self.w_k.cols:
            raise DimensionError(f"W_Q {self.w_q.shape} and W_K {self.w_k.shape} differ")
        if self.w_fc is not None and self.w_fc.rows != self.w_fc.cols:
            raise DimensionError(f"W_FC must be square, got {self.w_fc.shape}")

    @property
    def d_model(self) -> int:
        return self.w_q.rows

    @property
    def d(self) -> int:
        return self.w_q.cols

    @property
    def d_v(self) -> int:
        return self.w_v.cols

    @property
    def w_s(self) -> FixedPointMatrix:
        if self._w_s is None:
            self._w_s = precompute_score_weights(self.w_q, self.w_k)
        return self._w_s

    def w_s_quant(self, q: QuantConfig) -> IntMatrix:
        key = (q.bits, q.gamma)
        if key not in self._w_s_quant:
            self._w_s_quant[key] = quantize(self.w_s, q)
        return self._w_s_quant[key]


@dataclass
class SimReport:
    """Timeline, energy and throughput of one simulated run."""
    mode: str
    total_ns: float = 0.0
    energy: EnergyLedger = field(default_factory=EnergyLedger)
    gops: float = 0.0
    gops_per_watt: float = 0.0
    w4w_ns: float = 0.0
    peak_parallel_arrays: int = 0
    steps: List[TimelineEvent] = field(default_factory=list)
    kernel_stats: List[Dict[str, Any]] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)
    workload: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    warnings: List[str] = field(default_factory=list)
    total_ops: int = 0
    pruning_ns: float = 0.0
    attention_ns: float = 0.0
    pruning_vmm_count: int = 0
    ctrl_ns: float = 0.0
    mask_density: Optional[float] = None
    output: Optional[FixedPointMatrix] = field(default=None, repr=False, compare=False)
    mask: Optional[MaskMatrix] = field(default=None, repr=False, compare=False)

    def finalize(self) -> "SimReport":
        """Derive GOPS and GOPS/W from ops, time and energy."""
        self.gops = self.total_ops / self.total_ns if self.total_ns > 0 else 0.0
        self.gops_per_watt = self.total_ops / self.energy.total * 1e3 if self.energy.total > 0 else 0.0
        return self

    def step(self, label: str) -> Optional[TimelineEvent]:
        return find_event(self.steps, label)


class _DataflowBuilder:
    """Adds cost-annotated steps to a dataflow graph for one layer."""

    def __init__(self, hw: HardwareConfig, knobs: IdealKnobs, fabric: Fabric):
        self.hw = hw
        self.knobs = knobs
        self.fabric = fabric
        self.graph = DataflowGraph()
        self.kernels: List[ScheduleResult] = []
        self.warnings: List[str] = []
        self.ctrl_ns = 0.0

    def _write_ns(self, ns: float) -> float:
        return 0.0 if self.knobs.zero_write else ns

    def transfer(self, label: str, bits: int, after: Iterable[str] = ()) -> None:
        cost = transfer_cost(bits, self.hw)
        energy = EnergyLedger()
        energy.add("transfer", cost.energy_pj)
        latency = 0.0 if self.knobs.zero_transfer else cost.latency_ns
        self.graph.add(DataflowStep(label, "transfer", latency, energy=energy), after)

    def unit(self, label: str, values: int, power_mw: float, after: Iterable[str] = (),
             pruning: bool = False) -> None:
        energy = EnergyLedger()
        energy.add("peripheral", unit_energy(values, power_mw, self.hw))
        duration = unit_stream_ns(values, self.hw, tiles=self.hw.tiles)
        self.graph.add(DataflowStep(label, "unit", duration, energy=energy, pruning=pruning), after)

    def write(self, label: str, placement: Placement, after: Iterable[str] = ()) -> None:
        cost = self.fabric.write_placement(placement)
        energy = EnergyLedger()
        energy.add("write", cost.energy_pj)
        self.graph.add(DataflowStep(label, "write", self._write_ns(cost.latency_ns), {placement.name},
                                    energy=energy), after)

    def vmm(self, label: str, sched: ScheduleResult, resources: Iterable[str], after: Iterable[str] = (),
            extra_ns: float = 0.0, macs: Optional[int] = None) -> None:
        sched.label = label
        self.kernels.append(sched)
        self.warnings.extend(sched.warnings)
        duration = sched.cycles * self.hw.cycle_ns + extra_ns
        self.graph.add(DataflowStep(label, "vmm", duration, resources, issue_span=sched.issue_span,
                                    energy=sched.energy,
                                    macs=sched.effective_macs if macs is None else macs), after)

    def dispatch_ns(self, dispatches: int) -> float:
        """Control-signal latency of handing RowMatches to the arrays."""
        ns = 0.0 if self.knobs.zero_ctrl else dispatches * self.hw.ctrl_dispatch_ns
        self.ctrl_ns += ns
        return ns

    def ctrl_energy(self, ns: float) -> EnergyLedger:
        energy = EnergyLedger()
        energy.add("scheduler", self.hw.ctrl_power_mw * ns)
        return energy


def _weights_for_mode(mode: CalculationMode, weights: LayerWeights, q: QuantConfig,
                      include_fc: bool) -> Dict[str, Tuple[int, int, int]]:
    dm, d, dv = weights.d_model, weights.d, weights.d_v
    if mode.uses_recam_dataflow:
        shapes = {"W_S": (dm, dm, 32), "W_V": (dm, dv, 32), "W_S_q": (dm, dm, q.bits)}
    elif mode.rebert_family:
        shapes = {"W_Q": (dm, d, 32), "W_K": (dm, d, 32), "W_V": (dm, dv, 32)}
    else:
        shapes = {"W_Q": (dm, d, 32), "W_Kt": (d, dm, 32), "W_V": (dm, dv, 32)}
    if include_fc and weights.w_fc is not None:
        shapes["W_FC"] = (weights.w_fc.rows, weights.w_fc.cols, 32)
    return shapes


def _build_recam_dataflow(b: _DataflowBuilder, n: int, dm: int, dv: int, mask: MaskMatrix,
                          q: QuantConfig) -> str:
    hw, fabric, knobs = b.hw, b.fabric, b.knobs
    bits = hw.number_bits
    b.transfer("load_X", n * dm * bits)

    # pruning: quantized approximate scores -> mask -> ReCAM
    b.unit("quantize_X", n * dm, hw.qu_dqu_power_mw, after=["load_X"], pruning=True)
    qxt = fabric.allocate("QXt", dm, n, bits=q.bits)
    b.write("write_QXt", qxt, after=["quantize_X"])
    first = ddmm_schedule(n, fabric.weights["W_S_q"], hw, knobs.infinite_adc)
    second = ddmm_schedule(n, qxt, hw, knobs.infinite_adc)
    c1, c2 = first.cycles * hw.cycle_ns, second.cycles * hw.cycle_ns
    tails = 3 * unit_stream_ns(n, hw)
    mask_energy = first.energy + second.energy
    for power in (hw.qu_dqu_power_mw, hw.su_power_mw, hw.qu_dqu_power_mw):
        mask_energy.add("peripheral", unit_energy(n * n, power, hw))
    mask_ns = max(c1, c2) + (min(c1, c2) / n if n else 0.0) + tails
    b.graph.add(DataflowStep("mask_step", "vmm", mask_ns, {"W_S_q", "QXt"},
                             issue_span=max(first.issue_span, second.issue_span),
                             energy=mask_energy, pruning=True), ["quantize_X", "write_QXt"])
    recam = recam_write_cost(n, hw)
    recam_energy = EnergyLedger()
    recam_energy.add("scheduler", recam.energy_pj)
    b.graph.add(DataflowStep("write_mask", "write", b._write_ns(recam.latency_ns), {"recam"},
                             energy=recam_energy), ["mask_step"])

    # dense projections in parallel with pruning
    xt = fabric.allocate("Xt", dm, n)
    b.write("write_Xt", xt, after=["load_X"])
    b.vmm("vmm_M", ddmm_schedule(n, fabric.weights["W_S"], hw, knobs.infinite_adc), {"W_S"}, ["load_X"])
    b.vmm("vmm_V", ddmm_schedule(n, fabric.weights["W_V"], hw, knobs.infinite_adc), {"W_V"}, ["load_X"])
    b.transfer("xfer_M", n * dm * bits, after=["vmm_M"])
    b.transfer("xfer_V", n * dv * bits, after=["vmm_V"])

    # SDDMM driven by the ReCAM search
    search = recam_search(mask, hw)
    s_sched = sddmm_schedule(mask, dm, hw, placement=xt, search=search, infinite_adc=knobs.infinite_adc)
    s_ctrl = b.dispatch_ns(s_sched.dispatches)
    s_sched.energy.merge(b.ctrl_energy(s_ctrl))
    s_sched.energy.add("scheduler", search.search_cycles * hw.cycle_ns * hw.recam_power_mw)
    b.vmm("sddmm_S", s_sched, {"Xt", "recam"}, ["xfer_M", "write_mask", "write_Xt"], extra_ns=s_ctrl)

    # V replication overlaps the SDDMM
    z_sched = spmm_schedule(mask, dv, hw, fabric=fabric, search=search, infinite_adc=knobs.infinite_adc)
    first_wave = z_sched.wave_write_ns[0] if z_sched.wave_write_ns else 0.0
    b.graph.add(DataflowStep("write_V", "write", b._write_ns(first_wave), {"V_rep"}), ["xfer_V", "write_mask"])

    b.unit("softmax", mask.nnz, hw.su_power_mw, after=["sddmm_S"])
    b.transfer("xfer_S", mask.nnz * bits, after=["softmax"])
    reloads = b._write_ns(sum(z_sched.wave_write_ns[1:]))
    z_ctrl = b.dispatch_ns(z_sched.dispatches)
    z_sched.energy.merge(b.ctrl_energy(z_ctrl))
    b.vmm("spmm_Z", z_sched, {"V_rep", "recam"}, ["xfer_S", "write_V"], extra_ns=reloads + z_ctrl)
    return "spmm_Z"


def _build_rebert_dataflow(b: _DataflowBuilder, n: int, dm: int, d: int, dv: int,
                           mask: Optional[MaskMatrix]) -> str:
    hw, fabric, knobs = b.hw, b.fabric, b.knobs
    bits = hw.number_bits
    b.transfer("load_X", n * dm * bits)
    for name, weight, width in (("Q", "W_Q", d), ("K", "W_K", d), ("V", "W_V", dv)):
        b.vmm(f"vmm_{name}", ddmm_schedule(n, fabric.weights[weight], hw, knobs.infinite_adc), {weight}, ["load_X"])
        b.transfer(f"xfer_{name}", n * width * bits, after=[f"vmm_{name}"])

    kt = fabric.allocate("Kt", d, n)
    b.write("write_Kt", kt, after=["xfer_K"])
    b.vmm("vmm_S", ddmm_schedule(n, kt, hw, knobs.infinite_adc), {"Kt"}, ["xfer_Q", "write_Kt"])
    v = fabric.allocate("V", n, dv)
    b.write("write_V", v, after=["xfer_V"])
    _attention_tail(b, n, dv, v, mask, "vmm_S")
    return "vmm_Z"


def _build_retransformer_dataflow(b: _DataflowBuilder, n: int, dm: int, d: int, dv: int,
                                  mask: Optional[MaskMatrix]) -> str:
    hw, fabric, knobs = b.hw, b.fabric, b.knobs
    bits = hw.number_bits
    b.transfer("load_X", n * dm * bits)
    xt = fabric.allocate("Xt", dm, n)
    b.write("write_Xt", xt, after=["load_X"])

    b.vmm("vmm_V", ddmm_schedule(n, fabric.weights["W_V"], hw, knobs.infinite_adc), {"W_V"}, ["load_X"])
    b.transfer("xfer_V", n * dv * bits, after=["vmm_V"])
    v = fabric.allocate("V", n, dv)
    b.write("write_V", v, after=["xfer_V"])

    # one VMM at a time: V -> Q -> R -> S -> Z
    b.vmm("vmm_Q", ddmm_schedule(n, fabric.weights["W_Q"], hw, knobs.infinite_adc), {"W_Q"}, ["vmm_V"])
    b.transfer("xfer_Q", n * d * bits, after=["vmm_Q"])
    b.vmm("vmm_R", ddmm_schedule(n, fabric.weights["W_Kt"], hw, knobs.infinite_adc), {"W_Kt"}, ["xfer_Q"])
    b.transfer("xfer_R", n * dm * bits, after=["vmm_R"])
    b.vmm("vmm_S", ddmm_schedule(n, xt, hw, knobs.infinite_adc), {"Xt"}, ["xfer_R", "write_Xt"])
    _attention_tail(b, n, dv, v, mask, "vmm_S")
    return "vmm_Z"


def _attention_tail(b: _DataflowBuilder, n: int, dv: int, v: Placement, mask: Optional[MaskMatrix],
                    scores: str) -> None:
    hw, knobs = b.hw, b.knobs
    b.unit("softmax", n * n, hw.su_power_mw, after=[scores])
    b.transfer("xfer_P", n * n * hw.number_bits, after=["softmax"])
    if mask is not None:
        z_sched = spmm_baseline_schedule(mask, dv, hw, placement=v, infinite_adc=knobs.infinite_adc)
    else:
        z_sched = ddmm_schedule(n, v, hw, knobs.infinite_adc)
    b.vmm("vmm_Z", z_sched, {"V"}, ["xfer_P", "write_V"])


def _add_fc(b: _DataflowBuilder, n: int, fc_dim: int, after: str) -> str:
    hw = b.hw
    b.transfer("xfer_Z", n * fc_dim * hw.number_bits, after=[after])
    b.vmm("vmm_FC", ddmm_schedule(n, b.fabric.weights["W_FC"], hw, b.knobs.infinite_adc), {"W_FC"}, ["xfer_Z"])
    return "vmm_FC"


def _functional_output(x: FixedPointMatrix, weights: LayerWeights, mode: CalculationMode,
                       mask: MaskMatrix) -> FixedPointMatrix:
    scale = 1.0 / math.sqrt(weights.d)
    if mode.uses_recam_dataflow:
        m = fixed_matmul(x, weights.w_s)
        v = fixed_matmul(x, weights.w_v)
        s = masked_product(m, x.transpose(), mask)
        p = softmax_rows(scale_matrix(s, scale), mask)
        check_integrity(p, v, mask)
        return fixed_matmul(p, v)

    q_ = fixed_matmul(x, weights.w_q)
    v = fixed_matmul(x, weights.w_v)
    if mode.rebert_family:
        s = fixed_matmul(q_, fixed_matmul(x, weights.w_k).transpose())
    else:
        r = fixed_matmul(q_, weights.w_k.transpose())
        s = fixed_matmul(r, x.transpose())
    p = softmax_rows(scale_matrix(s, scale), mask if mode.sparse_baseline else None)
    return fixed_matmul(p, v)


def fc_input(z: FixedPointMatrix, fc_dim: int) -> FixedPointMatrix:
    """Z replicated across the head slots of the FC input."""
    if z.cols == 0 or fc_dim % z.cols:
        raise DimensionError(f"fc_dim {fc_dim} is not a multiple of d_v {z.cols}")
    return FixedPointMatrix(np.tile(z.data, (1, fc_dim // z.cols)), z.exponent)


def simulate_layer(x: FixedPointMatrix, weights: LayerWeights, mode: CalculationMode, hw: HardwareConfig,
                   knobs: Optional[IdealKnobs] = None, q: Optional[QuantConfig] = None,
                   mask: Optional[MaskMatrix] = None, functional: bool = True,
                   include_fc: bool = False) -> SimReport:
    """
    Simulate one attention layer (and optionally its FC layer).

    Args:
        x: Input embeddings (n x d_model)
        weights: Layer weights
        mode: Calculation mode
        hw: Fabric configuration
        knobs: Ideal-situation knobs
        q: Quantization of the pruning path
        mask: External mask; overrides the generated one (pruning cost is still charged)
        functional: Compute the numeric output as well as the costs
        include_fc: Append the FC layer (needs ``weights.w_fc``)

    Returns:
        SimReport

    Raises:
        DimensionError: If the input does not match the weights
        CapacityError: If the fabric cannot hold the layer
        ScheduleError: If the dataflow is illegal
    """
    knobs = knobs or IdealKnobs()
    q = q or QuantConfig(d=weights.d)
    report = SimReport(mode=mode.value)
    if x.cols != weights.d_model:
        raise DimensionError(f"input width {x.cols} does not match d_model {weights.d_model}")
    n = x.rows
    if n == 0:
        return report
    if include_fc and weights.w_fc is None:
        raise DimensionError("include_fc requires FC weights")

    if mode is CalculationMode.CPDAA:
        mask = MaskMatrix.ones(n)
    elif not (mode.uses_recam_dataflow or mode.sparse_baseline):
        mask = None
    elif mask is None:
        mask = generate_mask(x, weights.w_s_quant(q), q)
    if mask is not None and mask.shape != (n, n):
        raise DimensionError(f"mask {mask.shape} is not {n}x{n}")

    fabric = Fabric(hw)
    for name, shape in _weights_for_mode(mode, weights, q, include_fc).items():
        fabric.preload(name, shape)

    b = _DataflowBuilder(hw, knobs, fabric)
    dm, d, dv = weights.d_model, weights.d, weights.d_v
    if mode.uses_recam_dataflow:
        last = _build_recam_dataflow(b, n, dm, dv, mask, q)
    elif mode.rebert_family:
        last = _build_rebert_dataflow(b, n, dm, d, dv, mask if mode.sparse_baseline else None)
    else:
        last = _build_retransformer_dataflow(b, n, dm, d, dv, mask if mode.sparse_baseline else None)
    out_width = dv
    if include_fc:
        last = _add_fc(b, n, weights.w_fc.cols, last)
        out_width = weights.w_fc.cols
    b.transfer("store_Z", n * out_width * hw.number_bits, after=[last])

    events = asap_schedule(b.graph)
    validate_timeline(b.graph, events)

    report.steps = events
    report.total_ns = makespan(events)
    for step in b.graph.steps():
        report.energy.merge(step.energy)
        if step.kind == "vmm" and not step.pruning:
            report.total_ops += 2 * step.macs
    report.energy.merge(static_energy(report.total_ns, hw))
    report.w4w_ns = wait_for_write_ns(b.graph, events)
    report.peak_parallel_arrays = peak_parallel_arrays(events)
    report.kernel_stats = [sched.summary() for sched in b.kernels]
    report.warnings = list(dict.fromkeys(b.warnings))
    report.ctrl_ns = b.ctrl_ns
    report.attention_ns = sum(e.duration_ns for e in events if e.kind == "vmm" and not e.pruning)
    if mode.uses_recam_dataflow:
        report.pruning_ns = report.step("mask_step").duration_ns
        report.pruning_vmm_count = 2 * n
    report.mask_density = mask.density if mask is not None else None
    report.mask = mask
    report.finalize()

    if functional:
        z = _functional_output(x, weights, mode, mask)
        if include_fc:
            z = fixed_matmul(fc_input(z, weights.w_fc.rows), weights.w_fc)
        report.output = z

    logger.debug(f"{mode.value}: {report.total_ns:.1f} ns, {report.gops:.3f} GOPS, "
                 f"w4w {report.w4w_ns:.1f} ns, peak {report.peak_parallel_arrays} parallel arrays")
    return report


def chain_reports(parts: Sequence[SimReport], link_bits: Union[int, Sequence[int]], hw: HardwareConfig,
                  knobs: Optional[IdealKnobs] = None, prefix: str = "part") -> SimReport:
    """
    Run reports back to back with a transfer between neighbours.

    ``link_bits`` is either one size for every link or one size per link.
    A single part is returned as-is.
    """
    if len(parts) == 1:
        return parts[0]
    knobs = knobs or IdealKnobs()
    if isinstance(link_bits, int):
        link_bits = [link_bits] * max(0, len(parts) - 1)
    if len(link_bits) != max(0, len(parts) - 1):
        raise ValueError(f"{len(parts)} parts need {len(parts) - 1} links, got {len(link_bits)}")
    combined = SimReport(mode=parts[0].mode if parts else "")
    offset = 0.0
    for index, part in enumerate(parts):
        if index:
            link = transfer_cost(link_bits[index - 1], hw)
            link_ns = 0.0 if knobs.zero_transfer else link.latency_ns
            combined.steps.append(TimelineEvent(f"link{index}", "transfer", offset, offset + link_ns))
            combined.energy.add("transfer", link.energy_pj)
            offset += link_ns
        for event in part.steps:
            shifted = copy.copy(event)
            shifted.label = f"{prefix}{index}/{event.label}"
            shifted.start_ns += offset
            shifted.end_ns += offset
            combined.steps.append(shifted)
        offset += part.total_ns
        combined.energy.merge(part.energy)
        combined.total_ops += part.total_ops
        combined.w4w_ns += part.w4w_ns
        combined.peak_parallel_arrays = max(combined.peak_parallel_arrays, part.peak_parallel_arrays)
        combined.kernel_stats.extend(part.kernel_stats)
        for warning in part.warnings:
            if warning not in combined.warnings:
                combined.warnings.append(warning)
        combined.pruning_ns += part.pruning_ns
        combined.attention_ns += part.attention_ns
        combined.pruning_vmm_count += part.pruning_vmm_count
        combined.ctrl_ns += part.ctrl_ns
    combined.total_ns = offset
    densities = [p.mask_density for p in parts if p.mask_density is not None]
    combined.mask_density = sum(densities) / len(densities) if densities else None
    combined.output = parts[-1].output if parts else None
    return combined.finalize()


def simulate_encoder_stack(x: FixedPointMatrix, per_layer_weights, layers: int, mode: CalculationMode,
                           hw: HardwareConfig, knobs: Optional[IdealKnobs] = None,
                           q: Optional[QuantConfig] = None, mask: Optional[MaskMatrix] = None,
                           functional: bool = True) -> SimReport:
    """
    Chain ``layers`` encoders of attention + FC, transferring each output to the next encoder.

    Args:
        x: Input embeddings
        per_layer_weights: One LayerWeights for every layer, or a single one shared by all
        layers: Number of encoder layers (>= 1)
        mode: Calculation mode
        hw: Fabric configuration
        knobs: Ideal-situation knobs
        q: Quantization of the pruning path
        mask: External mask applied to every layer
        functional: Compute the numeric output

    Returns:
        Aggregated SimReport
    """
    if layers < 1:
        raise ValueError(f"layers must be >= 1, got {layers}")
    if isinstance(per_layer_weights, LayerWeights):
        per_layer_weights = [per_layer_weights]
    if not per_layer_weights:
        raise ValueError("at least one set of layer weights is required")

    parts: List[SimReport] = []
    current = x
    cached: Dict[int, SimReport] = {}
    for layer in range(layers):
        weights = per_layer_weights[layer % len(per_layer_weights)]
        if weights.w_fc is None:
            raise DimensionError("encoder stacking requires FC weights")
        if not functional and id(weights) in cached:
            parts.append(cached[id(weights)])
            continue
        report = simulate_layer(current, weights, mode, hw, knobs, q, mask, functional, include_fc=True)
        cached[id(weights)] = report
        parts.append(report)
        if functional:
            if report.output.cols != current.cols:
                raise DimensionError(f"FC width {report.output.cols} does not match d_model {current.cols}")
            current = report.output
        logger.debug(f"Encoder layer {layer + 1}/{layers}: {report.total_ns:.1f} ns")

    fc_dim = per_layer_weights[0].w_fc.cols
    return chain_reports(parts, x.rows * fc_dim * hw.number_bits, hw, knobs, prefix="layer")


@dataclass
class KnobStudy:
    baseline: SimReport
    reports: Dict[str, SimReport]

    @property
    def deltas(self) -> Dict[str, float]:
        """Relative throughput gain of each knob over the baseline."""
        base = self.baseline.gops
        return {name: (r.gops / base - 1.0) if base else 0.0 for name, r in self.reports.items()}

    @property
    def ranking(self) -> List[str]:
        deltas = self.deltas
        return sorted(deltas, key=lambda name: (-deltas[name], name))


def knob_study(x: FixedPointMatrix, weights: LayerWeights, hw: HardwareConfig,
               mode: CalculationMode = CalculationMode.CPSAA, q: Optional[QuantConfig] = None,
               mask: Optional[MaskMatrix] = None) -> KnobStudy:
    """Run the baseline and each single ideal knob, cost-only."""
    if mask is None and mode.uses_recam_dataflow:
        q = q or QuantConfig(d=weights.d)
        mask = generate_mask(x, weights.w_s_quant(q), q)
    baseline = simulate_layer(x, weights, mode, hw, IdealKnobs(), q, mask, functional=False)
    reports = {}
    for name in IdealKnobs.names():
        reports[name] = simulate_layer(x, weights, mode, hw, IdealKnobs.single(name), q, mask, functional=False)
        logger.info(f"Knob {name}: {reports[name].gops:.3f} GOPS (baseline {baseline.gops:.3f})")
    return KnobStudy(baseline, reports)
