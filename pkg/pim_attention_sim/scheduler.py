"""
Dependency graph of one layer's dataflow and its as-early-as-possible list schedule.
"""

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional

import networkx as nx

from .crossbar_model import EnergyLedger
from .exceptions import ScheduleError
from .logging_setup import get_logger

logger = get_logger(__name__)

STEP_KINDS = ("vmm", "write", "transfer", "unit")

_EPS_NS = 1e-9


@dataclass
class DataflowStep:
    """One node of the dataflow: a kernel, a write, a transfer or a unit pass."""
    label: str
    kind: str
    duration_ns: float
    resources: FrozenSet[str] = frozenset()
    issue_span: int = 0
    energy: EnergyLedger = field(default_factory=EnergyLedger)
    macs: int = 0
    pruning: bool = False

    def __post_init__(self):
        if self.kind not in STEP_KINDS:
            raise ValueError(f"unknown step kind {self.kind!r}")
        if self.duration_ns < 0:
            raise ValueError(f"step {self.label} has negative duration {self.duration_ns}")
        self.resources = frozenset(self.resources)


@dataclass
class TimelineEvent:
    label: str
    kind: str
    start_ns: float
    end_ns: float
    resources: FrozenSet[str] = frozenset()
    issue_span: int = 0
    pruning: bool = False

    @property
    def duration_ns(self) -> float:
        return self.end_ns - self.start_ns


class DataflowGraph:
    """Steps keyed by label with producer -> consumer edges."""

    def __init__(self):
        self.graph = nx.DiGraph()

    def add(self, step: DataflowStep, after: Iterable[str] = ()) -> DataflowStep:
        if step.label in self.graph:
            raise ScheduleError(f"duplicate step {step.label}")
        self.graph.add_node(step.label, step=step)
        for producer in after:
            self.depend(step.label, producer)
        return step

    def depend(self, consumer: str, producer: str) -> None:
        for label in (consumer, producer):
            if label not in self.graph:
                raise ScheduleError(f"unknown step {label}")
        self.graph.add_edge(producer, consumer)

    def step(self, label: str) -> DataflowStep:
        return self.graph.nodes[label]["step"]

    def steps(self) -> List[DataflowStep]:
        return [self.graph.nodes[label]["step"] for label in self.graph.nodes]

    def predecessors(self, label: str) -> List[str]:
        return sorted(self.graph.predecessors(label))

    def __contains__(self, label: str) -> bool:
        return label in self.graph

    def __len__(self) -> int:
        return self.graph.number_of_nodes()

    def order(self) -> List[str]:
        """
        Deterministic topological order (ties broken by label).

        Raises:
            ScheduleError: If the graph has a cycle
        """
        try:
            return list(nx.lexicographical_topological_sort(self.graph))
        except nx.NetworkXUnfeasible as e:
            cycle = nx.find_cycle(self.graph)
            raise ScheduleError(f"dataflow has a dependency cycle: {cycle}") from e


def asap_schedule(graph: DataflowGraph) -> List[TimelineEvent]:
    """
    List-schedule every step as early as its producers and resources allow.

    Steps are taken in topological order; a step sharing a resource with an
    earlier one starts after that one ends.

    Args:
        graph: Dataflow graph

    Returns:
        Timeline events sorted by (start, label)

    Raises:
        ScheduleError: If the graph is cyclic
    """
    ends: Dict[str, float] = {}
    resource_free: Dict[str, float] = defaultdict(float)
    events: List[TimelineEvent] = []
    for label in graph.order():
        step = graph.step(label)
        start = max((ends[p] for p in graph.predecessors(label)), default=0.0)
        for resource in step.resources:
            start = max(start, resource_free[resource])
        end = start + step.duration_ns
        ends[label] = end
        if step.duration_ns > 0:
            for resource in step.resources:
                resource_free[resource] = end
        events.append(TimelineEvent(label, step.kind, start, end, step.resources, step.issue_span, step.pruning))
    events.sort(key=lambda e: (e.start_ns, e.label))
    return events


def validate_timeline(graph: DataflowGraph, events: List[TimelineEvent]) -> None:
    """
    Check every dependency edge and that no resource is double-booked.

    Raises:
        ScheduleError: On the first violation found
    """
    by_label = {event.label: event for event in events}
    for producer, consumer in graph.graph.edges:
        if by_label[consumer].start_ns + _EPS_NS < by_label[producer].end_ns:
            raise ScheduleError(
                f"{consumer} starts at {by_label[consumer].start_ns:.3f} ns before "
                f"{producer} ends at {by_label[producer].end_ns:.3f} ns"
            )
    bookings: Dict[str, List[TimelineEvent]] = defaultdict(list)
    for event in events:
        if event.duration_ns > 0:
            for resource in event.resources:
                bookings[resource].append(event)
    for resource, booked in bookings.items():
        booked.sort(key=lambda e: (e.start_ns, e.label))
        for first, second in zip(booked, booked[1:]):
            if second.start_ns + _EPS_NS < first.end_ns:
                raise ScheduleError(f"{resource} is double-booked by {first.label} and {second.label}")


def wait_for_write_ns(graph: DataflowGraph, events: List[TimelineEvent]) -> float:
    """
    Time attention VMM steps spend blocked on running writes.

    A VMM is blocked when a write producer is the last of its producers to
    finish. The blocked time runs from the later of its latest non-write
    producer end and its latest write start, up to its own start.
    """
    by_label = {event.label: event for event in events}
    total = 0.0
    for event in events:
        if event.kind != "vmm" or event.pruning:
            continue
        producers = [by_label[p] for p in graph.predecessors(event.label)]
        writes = [p for p in producers if p.kind == "write"]
        if not writes:
            continue
        others_end = max((p.end_ns for p in producers if p.kind != "write"), default=0.0)
        if max(w.end_ns for w in writes) <= others_end:
            continue
        ready = max(others_end, max(w.start_ns for w in writes))
        total += max(0.0, event.start_ns - ready)
    return total


def peak_parallel_arrays(events: List[TimelineEvent]) -> int:
    """Peak summed issue span of attention VMM events running at the same time."""
    points = []
    for event in events:
        if event.kind == "vmm" and not event.pruning and event.duration_ns > 0:
            points.append((event.start_ns, 1, event.issue_span))
            points.append((event.end_ns, 0, -event.issue_span))
    # ends sort before starts at the same instant
    points.sort(key=lambda p: (p[0], p[1]))
    peak = current = 0
    for _, _, delta in points:
        current += delta
        peak = max(peak, current)
    return peak


def makespan(events: List[TimelineEvent]) -> float:
    return max((event.end_ns for event in events), default=0.0)


def find_event(events: List[TimelineEvent], label: str) -> Optional[TimelineEvent]:
    for event in events:
        if event.label == label:
            return event
    return None
