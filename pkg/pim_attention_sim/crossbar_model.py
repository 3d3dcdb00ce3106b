"""
Behavioral and cost model of the crossbar fabric.

A tile holds ``roa_ags_per_tile`` read-only array groups followed by
``wea_ags_per_tile`` write-enable groups, each of ``arrays_per_ag`` arrays
sharing ``adc_per_ag`` ADCs. One number occupies ``number_bits`` one-bit
cells of an array row, so a column vector of K numbers chains
ceil(K / xb_rows) arrays.
"""

import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .config import HardwareConfig
from .exceptions import CapacityError, RegionError
from .logging_setup import get_logger

logger = get_logger(__name__)

AgKey = Tuple[int, int]


class Region(Enum):
    ROA = "ROA"
    WEA = "WEA"


@dataclass(frozen=True, order=True)
class ArrayId:
    tile: int
    ag: int
    array: int

    @property
    def ag_key(self) -> AgKey:
        return (self.tile, self.ag)


@dataclass(eq=False)
class ArrayState:
    """One crossbar array and what it currently stores."""
    id: ArrayId
    region: Region
    stored_rows: int = 0
    content: Optional[str] = None
    read_only: bool = False

    def __post_init__(self):
        if self.region is Region.ROA:
            self.read_only = True

    @property
    def ag_key(self) -> AgKey:
        return self.id.ag_key


@dataclass
class EnergyLedger:
    """Accumulated energy per category, in pJ."""
    vmm: float = 0.0
    write: float = 0.0
    adc: float = 0.0
    dac: float = 0.0
    transfer: float = 0.0
    scheduler: float = 0.0
    peripheral: float = 0.0

    CATEGORIES = ("vmm", "write", "adc", "dac", "transfer", "scheduler", "peripheral")

    def add(self, category: str, pj: float) -> None:
        if category not in self.CATEGORIES:
            raise KeyError(f"unknown energy category {category!r}")
        if pj < 0:
            raise ValueError(f"energy must be non-negative, got {pj} for {category}")
        setattr(self, category, getattr(self, category) + pj)

    def merge(self, other: "EnergyLedger") -> None:
        for name in self.CATEGORIES:
            self.add(name, getattr(other, name))

    def __add__(self, other: "EnergyLedger") -> "EnergyLedger":
        result = EnergyLedger(**self.to_dict(include_total=False))
        result.merge(other)
        return result

    def scaled(self, factor: float) -> "EnergyLedger":
        return EnergyLedger(**{name: getattr(self, name) * factor for name in self.CATEGORIES})

    @property
    def total(self) -> float:
        return sum(getattr(self, name) for name in self.CATEGORIES)

    def to_dict(self, include_total: bool = True) -> Dict[str, float]:
        result = {name: getattr(self, name) for name in self.CATEGORIES}
        if include_total:
            result["total_pj"] = self.total
        return result


@dataclass(frozen=True)
class WriteCost:
    latency_ns: float
    energy_pj: float


@dataclass(frozen=True)
class TransferCost:
    latency_ns: float
    energy_pj: float


@dataclass
class Placement:
    """
    Arrays holding one matrix stored as column vectors.

    ``arrays[g * chain + c]`` holds link ``c`` of column group ``g``; a group
    is the ``per_array`` column vectors that share an array side by side.
    """
    name: str
    rows: int
    cols: int
    bits: int
    chain: int
    per_array: int
    arrays: List[ArrayId] = field(default_factory=list)
    read_only: bool = False

    @property
    def groups(self) -> int:
        return math.ceil(self.cols / self.per_array) if self.cols else 0

    @property
    def array_count(self) -> int:
        return len(self.arrays)

    def group_of(self, col: int) -> int:
        return col // self.per_array

    def group_arrays(self, group: int) -> List[ArrayId]:
        return self.arrays[group * self.chain:(group + 1) * self.chain]

    def link_rows(self, link: int, xb_rows: int) -> int:
        """Rows occupied in link ``link`` of every chain."""
        return max(0, min(xb_rows, self.rows - link * xb_rows))


@dataclass
class PlacementMap:
    """Array assignments of the preloaded weights (the AIT view)."""
    placements: Dict[str, Placement] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Placement:
        return self.placements[name]

    def __contains__(self, name: str) -> bool:
        return name in self.placements

    def __len__(self) -> int:
        return len(self.placements)

    @property
    def array_count(self) -> int:
        return sum(p.array_count for p in self.placements.values())


def chain_length(rows: int, hw: HardwareConfig) -> int:
    return math.ceil(rows / hw.xb_rows) if rows else 0


def arrays_for_matrix(rows: int, cols: int, hw: HardwareConfig, bits: Optional[int] = None) -> int:
    """Arrays needed to hold a rows x cols matrix as column vectors."""
    if rows == 0 or cols == 0:
        return 0
    return chain_length(rows, hw) * math.ceil(cols / hw.numbers_per_row(bits))


def _matrix_shape(matrix) -> Tuple[int, int, int]:
    """(rows, cols, bits) of a FixedPointMatrix, IntMatrix or explicit tuple."""
    if isinstance(matrix, tuple):
        if len(matrix) == 2:
            return matrix[0], matrix[1], 32
        return matrix
    bits = getattr(matrix, "bits", None) or 32
    rows, cols = matrix.shape
    return rows, cols, bits


class Fabric:
    """
    Array bookkeeping for one simulation.

    Weights are preloaded once; runtime matrices are allocated on whole WEA
    tiles from tile 0 upward and released between layers.
    """

    def __init__(self, hw: HardwareConfig):
        self.hw = hw
        self.arrays: Dict[ArrayId, ArrayState] = {}
        self.weights = PlacementMap()
        self.runtime: Dict[str, Placement] = {}
        self.spill_tiles: set = set()
        self._next_runtime_tile = 0
        self._roa_cursor = 0
        self._spill_cursor = 0

    # ---- placement -------------------------------------------------------

    def _state(self, array_id: ArrayId, region: Region) -> ArrayState:
        state = self.arrays.get(array_id)
        if state is None:
            state = ArrayState(array_id, region)
            self.arrays[array_id] = state
        return state

    def _roa_slot(self, index: int) -> ArrayId:
        hw = self.hw
        tile, rest = divmod(index, hw.roa_arrays_per_tile)
        ag, array = divmod(rest, hw.arrays_per_ag)
        return ArrayId(tile, ag, array)

    def _spill_slot(self, index: int) -> ArrayId:
        hw = self.hw
        tile_offset, rest = divmod(index, hw.wea_arrays_per_tile)
        ag, array = divmod(rest, hw.arrays_per_ag)
        return ArrayId(hw.tiles - 1 - tile_offset, hw.roa_ags_per_tile + ag, array)

    def _new_placement(self, name: str, rows: int, cols: int, bits: int, read_only: bool) -> Placement:
        return Placement(
            name=name, rows=rows, cols=cols, bits=bits,
            chain=chain_length(rows, self.hw),
            per_array=self.hw.numbers_per_row(bits),
            read_only=read_only,
        )

    def preload(self, name: str, matrix) -> Placement:
        """Pack a weight matrix in order into ROA, spilling to the highest WEA tiles."""
        hw = self.hw
        rows, cols, bits = _matrix_shape(matrix)
        placement = self._new_placement(name, rows, cols, bits, read_only=True)
        needed = arrays_for_matrix(rows, cols, hw, bits)
        roa_free = hw.total_roa_arrays - self._roa_cursor
        spill_free = hw.total_wea_arrays - self._next_runtime_tile * hw.wea_arrays_per_tile - self._spill_cursor
        if not hw.roa_spill_to_wea:
            spill_free = 0
        if needed > roa_free + spill_free:
            cell_bits = hw.xb_rows * hw.xb_cols * hw.bits_per_cell
            raise CapacityError(
                f"Weights {name} need {needed * cell_bits} bits but only "
                f"{(roa_free + spill_free) * cell_bits} bits of weight storage remain",
                required=needed * cell_bits,
                available=(roa_free + spill_free) * cell_bits,
            )

        for _ in range(needed):
            if self._roa_cursor < hw.total_roa_arrays:
                array_id = self._roa_slot(self._roa_cursor)
                self._roa_cursor += 1
                state = self._state(array_id, Region.ROA)
            else:
                array_id = self._spill_slot(self._spill_cursor)
                self._spill_cursor += 1
                self.spill_tiles.add(array_id.tile)
                state = self._state(array_id, Region.WEA)
                state.read_only = True
            state.content = name
            placement.arrays.append(array_id)
        self._fill_rows(placement)
        self.weights.placements[name] = placement
        return placement

    def _fill_rows(self, placement: Placement) -> None:
        for index, array_id in enumerate(placement.arrays):
            link = index % placement.chain if placement.chain else 0
            self.arrays[array_id].stored_rows = placement.link_rows(link, self.hw.xb_rows)

    def _runtime_tiles(self) -> List[int]:
        return [t for t in range(self.hw.tiles) if t not in self.spill_tiles]

    def allocate(self, name: str, rows: int, cols: int, bits: Optional[int] = None) -> Placement:
        """
        Reserve WEA arrays for a runtime matrix.

        The matrix gets the fewest whole free tiles that hold it; its arrays,
        taken column group by column group, are dealt round-robin over the
        WEA AGs of those tiles.

        Raises:
            CapacityError: If the free WEA tiles cannot hold the matrix
        """
        bits = bits or self.hw.number_bits
        placement = self._new_placement(name, rows, cols, bits, read_only=False)
        self._deal(placement, arrays_for_matrix(rows, cols, self.hw, bits))
        return placement

    def allocate_arrays(self, name: str, count: int) -> Placement:
        """Reserve ``count`` single-link WEA arrays, dealt like ``allocate``."""
        hw = self.hw
        placement = Placement(name=name, rows=hw.xb_rows, cols=count, bits=hw.number_bits,
                              chain=1, per_array=1)
        self._deal(placement, count)
        return placement

    def _deal(self, placement: Placement, needed: int) -> None:
        hw = self.hw
        self.runtime[placement.name] = placement
        if needed == 0:
            return
        free_tiles = self._free_tiles()
        tiles_needed = math.ceil(needed / hw.wea_arrays_per_tile)
        if tiles_needed > len(free_tiles):
            del self.runtime[placement.name]
            cell_bits = hw.xb_rows * hw.xb_cols * hw.bits_per_cell
            raise CapacityError(
                f"Runtime matrix {placement.name} needs {needed} arrays but only "
                f"{len(free_tiles) * hw.wea_arrays_per_tile} free WEA arrays remain",
                required=needed * cell_bits,
                available=len(free_tiles) * hw.wea_arrays_per_tile * cell_bits,
            )
        tiles = free_tiles[:tiles_needed]
        pool = [(t, hw.roa_ags_per_tile + ag) for t in tiles for ag in range(hw.wea_ags_per_tile)]
        for index in range(needed):
            tile, ag = pool[index % len(pool)]
            array_id = ArrayId(tile, ag, index // len(pool))
            state = self._state(array_id, Region.WEA)
            state.content = placement.name
            state.stored_rows = 0
            placement.arrays.append(array_id)
        self._next_runtime_tile = tiles[-1] + 1
        logger.debug(f"Allocated {needed} arrays for {placement.name} on tiles {tiles[0]}-{tiles[-1]}")

    def _free_tiles(self) -> List[int]:
        return [t for t in self._runtime_tiles() if t >= self._next_runtime_tile]

    def free_wea_arrays(self) -> int:
        return len(self._free_tiles()) * self.hw.wea_arrays_per_tile

    def free(self, name: str) -> None:
        """Release one runtime allocation."""
        placement = self.runtime.pop(name, None)
        if placement is None:
            return
        for array_id in placement.arrays:
            self.arrays.pop(array_id, None)
        used = [a.tile for p in self.runtime.values() for a in p.arrays]
        self._next_runtime_tile = max(used) + 1 if used else 0

    def release_runtime(self) -> None:
        """Free every runtime allocation (between layers or batches)."""
        for name in list(self.runtime):
            self.free(name)

    def states(self, array_ids: Iterable[ArrayId]) -> List[ArrayState]:
        return [self.arrays[a] for a in array_ids]

    def write_rows(self, rows_per_array: Mapping[ArrayId, int]) -> WriteCost:
        return _write_rows({self.arrays[a]: rows for a, rows in rows_per_array.items()}, self.hw)

    def write_placement(self, placement: Placement) -> WriteCost:
        """Write a runtime matrix into its arrays; each chain link holds its slice of rows."""
        rows_per_array = {}
        for index, array_id in enumerate(placement.arrays):
            link = index % placement.chain
            rows_per_array[array_id] = placement.link_rows(link, self.hw.xb_rows)
        return self.write_rows(rows_per_array)


def preload_roa(weights: Mapping[str, object], hw: HardwareConfig, fabric: Optional[Fabric] = None) -> PlacementMap:
    """
    Assign preloaded weight matrices to read-only arrays.

    No latency is charged. Placement is deterministic: weights are packed in
    the given order.

    Args:
        weights: Name to matrix (or ``(rows, cols[, bits])``) mapping
        hw: Fabric configuration
        fabric: Fabric to record the placement in (a fresh one if omitted)

    Returns:
        PlacementMap of the weights

    Raises:
        CapacityError: With required vs available bits when the weights do not fit
    """
    fabric = fabric or Fabric(hw)
    for name, matrix in weights.items():
        fabric.preload(name, matrix)
    total = fabric.weights.array_count
    if total:
        logger.debug(f"Preloaded {len(weights)} weight matrices onto {total} arrays "
                     f"({len(fabric.spill_tiles)} tiles of WEA spill)")
    return fabric.weights


# ---- writes ----------------------------------------------------------------

def _write_rows(rows_per_array: Mapping[ArrayState, int], hw: HardwareConfig) -> WriteCost:
    per_ag: Dict[AgKey, int] = defaultdict(int)
    total_rows = 0
    for state, rows in rows_per_array.items():
        if rows == 0:
            continue
        if state.read_only:
            raise RegionError(f"array {state.id} is read-only ({state.region.value}, holds {state.content})")
        if rows > hw.xb_rows:
            raise CapacityError(f"{rows} rows exceed the {hw.xb_rows}-row array {state.id}",
                                required=rows, available=hw.xb_rows)
        # one write driver per AG; its arrays take turns
        per_ag[state.ag_key] += rows
        total_rows += rows
    for state, rows in rows_per_array.items():
        state.stored_rows = rows
    latency = max(per_ag.values(), default=0) * hw.per_row_write_ns
    energy = total_rows * hw.xb_power_mw * hw.per_row_write_ns
    return WriteCost(latency, energy)


def write_matrix(targets: Sequence[ArrayState], rows: int, hw: HardwareConfig) -> WriteCost:
    """
    Write ``rows`` rows spread evenly over the target arrays.

    Each AG writes one row per step; distinct AGs write concurrently.

    Args:
        targets: WEA arrays receiving the rows
        rows: Total rows to write
        hw: Fabric configuration

    Returns:
        WriteCost (latency in ns, energy in pJ)

    Raises:
        RegionError: If any target is read-only
        CapacityError: If the rows exceed the targets' capacity
    """
    for state in targets:
        if state.read_only:
            raise RegionError(f"array {state.id} is read-only ({state.region.value})")
    if rows == 0:
        return WriteCost(0.0, 0.0)
    capacity = len(targets) * hw.xb_rows
    if rows > capacity:
        raise CapacityError(f"{rows} rows exceed the capacity of {len(targets)} arrays",
                            required=rows, available=capacity)
    base, extra = divmod(rows, len(targets))
    return _write_rows({state: base + (1 if i < extra else 0) for i, state in enumerate(targets)}, hw)


def recam_write_cost(rows: int, hw: HardwareConfig) -> WriteCost:
    """Write mask rows into ReCAM; row tiles on separate ReCAM arrays write in parallel."""
    if rows == 0:
        return WriteCost(0.0, 0.0)
    steps = min(rows, hw.recam_rows)
    return WriteCost(steps * hw.per_row_write_ns, rows * hw.recam_power_mw * hw.per_row_write_ns)


# ---- VMM -------------------------------------------------------------------

def ag_queue_lengths(queues: Mapping[ArrayId, int]) -> Dict[AgKey, List[int]]:
    """Group per-array queue lengths by AG."""
    per_ag: Dict[AgKey, List[int]] = defaultdict(list)
    for array_id in sorted(queues):
        if queues[array_id]:
            per_ag[array_id.ag_key].append(queues[array_id])
    return dict(per_ag)


def vmm_cycles(ag_queues: Mapping[AgKey, Sequence[int]], hw: HardwareConfig, infinite_adc: bool = False) -> int:
    """
    VMM cycles for the given per-AG array queues.

    Per AG the ADCs convert one pass per cycle each, and one array cannot be
    converted twice in the same cycle, so an AG needs
    max(ceil(total passes / ADCs), longest array queue in passes). The
    kernel takes the slowest AG times ``bit_serial_factor``.

    Args:
        ag_queues: AG key to the queued vector counts of its active arrays
        hw: Fabric configuration
        infinite_adc: Give every active array its own ADC

    Returns:
        Cycle count
    """
    passes = hw.adc_passes
    worst = 0
    for queue in ag_queues.values():
        active = [q for q in queue if q > 0]
        if not active:
            continue
        divisor = len(active) if infinite_adc else hw.adc_per_ag
        total = sum(active) * passes
        longest = max(active) * passes
        worst = max(worst, max(math.ceil(total / divisor), longest))
    return worst * hw.bit_serial_factor


def vmm_energy(arrays_active: int, cycles: int, hw: HardwareConfig, active_row_fraction: float = 1.0) -> EnergyLedger:
    """
    Dynamic energy of ``arrays_active`` arrays each converting for ``cycles`` passes.

    ``active_row_fraction`` scales the crossbar and DAC terms for inputs
    driven with zero voltage.
    """
    ledger = EnergyLedger()
    array_cycles = arrays_active * cycles
    if array_cycles == 0:
        return ledger
    t = array_cycles * hw.cycle_ns
    ledger.add("vmm", hw.xb_power_mw * t * active_row_fraction)
    ledger.add("dac", hw.dac_power_mw / hw.arrays_per_ag * t * active_row_fraction)
    ledger.add("adc", hw.adc_power_mw * t)
    ledger.add("peripheral", (hw.sh_power_mw + hw.sa_power_mw + hw.ir_power_mw + hw.or_power_mw) * t)
    return ledger


def ir_depth_exceeded(depth: int, hw: HardwareConfig) -> bool:
    """True when ``depth`` queued input vectors overflow the input register."""
    return depth * hw.ir_vector_bits > hw.ir_bytes * 8


# ---- transfers and units ---------------------------------------------------

def transfer_cost(bits: int, hw: HardwareConfig) -> TransferCost:
    """Move ``bits`` over the on-chip interconnect."""
    if bits < 0:
        raise ValueError(f"bits must be non-negative, got {bits}")
    return TransferCost(bits / hw.oci_bits_per_ns, bits * hw.transfer_pj_per_bit)


def unit_stream_ns(values: int, hw: HardwareConfig, tiles: int = 1) -> float:
    """Latency of streaming ``values`` through a QU/DQU/SU/BU unit, 32 values per cycle per tile."""
    if values <= 0:
        return 0.0
    return math.ceil(values / (32 * max(1, tiles))) * hw.cycle_ns


def unit_energy(values: int, power_mw: float, hw: HardwareConfig) -> float:
    return math.ceil(values / 32) * hw.cycle_ns * power_mw if values > 0 else 0.0


def static_energy(duration_ns: float, hw: HardwareConfig) -> EnergyLedger:
    """Leakage of the always-on buffers and control over ``duration_ns``."""
    ledger = EnergyLedger()
    if not hw.include_static_power or duration_ns <= 0:
        return ledger
    buffers = hw.ait_power_mw + hw.ib_power_mw + hw.cb_power_mw
    ledger.add("peripheral", buffers * duration_ns)
    ledger.add("scheduler", hw.ctrl_power_mw * duration_ns)
    return ledger


