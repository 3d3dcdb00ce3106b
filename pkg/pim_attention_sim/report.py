"""
JSON reports and CSV summaries of simulation runs.
"""

import csv
import json
import os
import tempfile
from typing import Any, Dict, Iterable, List, Sequence

from .crossbar_model import EnergyLedger
from .logging_setup import get_logger
from .pipeline_sim import SimReport
from .scheduler import TimelineEvent

logger = get_logger(__name__)

REPORT_FIELDS = (
    "mode", "config", "workload", "seed", "total_ns", "w4w_ns", "peak_parallel_arrays",
    "gops", "gops_per_watt", "energy", "steps", "kernel_stats", "warnings",
)
KERNEL_STAT_FIELDS = ("kernel", "cycles", "arrays_used", "effective_macs", "replication_rows")
CSV_FIELDS = (
    "label", "mode", "total_ns", "gops", "gops_per_watt", "w4w_ns", "peak_parallel_arrays",
    "energy_pj", "pruning_ns", "attention_ns", "pruning_vmm_count", "ctrl_ns", "mask_density",
)


def fmt(value: float) -> float:
    """Round to 6 significant digits."""
    return float(f"{value:.6g}")


def _normalize(value: Any) -> Any:
    if isinstance(value, bool) or value is None or isinstance(value, str):
        return value
    if isinstance(value, float):
        return fmt(value)
    if isinstance(value, int):
        return value
    if isinstance(value, dict):
        return {k: _normalize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_normalize(v) for v in value]
    # numpy scalars
    if hasattr(value, "item"):
        return _normalize(value.item())
    return str(value)


def _energy_dict(energy: EnergyLedger) -> Dict[str, float]:
    # total is the sum of the rounded categories so a reloaded report re-emits identically
    result = {name: fmt(value) for name, value in energy.to_dict(include_total=False).items()}
    result["total_pj"] = fmt(sum(result.values()))
    return result


def report_to_dict(report: SimReport) -> Dict[str, Any]:
    body = {
        "mode": report.mode,
        "config": report.config,
        "workload": report.workload,
        "seed": report.seed,
        "total_ns": report.total_ns,
        "w4w_ns": report.w4w_ns,
        "peak_parallel_arrays": report.peak_parallel_arrays,
        "gops": report.gops,
        "gops_per_watt": report.gops_per_watt,
        "energy": _energy_dict(report.energy),
        "steps": [{"label": e.label, "start_ns": e.start_ns, "end_ns": e.end_ns} for e in report.steps],
        "kernel_stats": [{k: stat[k] for k in KERNEL_STAT_FIELDS} for stat in report.kernel_stats],
        "warnings": list(report.warnings),
    }
    return _normalize(body)


def report_from_dict(body: Dict[str, Any]) -> SimReport:
    """Rebuild a SimReport from its JSON body (the JSON-visible fields only)."""
    missing = [key for key in REPORT_FIELDS if key not in body]
    if missing:
        raise ValueError(f"report is missing fields: {', '.join(missing)}")
    energy = EnergyLedger(**{k: v for k, v in body["energy"].items() if k in EnergyLedger.CATEGORIES})
    return SimReport(
        mode=body["mode"],
        total_ns=body["total_ns"],
        energy=energy,
        gops=body["gops"],
        gops_per_watt=body["gops_per_watt"],
        w4w_ns=body["w4w_ns"],
        peak_parallel_arrays=body["peak_parallel_arrays"],
        steps=[TimelineEvent(s["label"], "", s["start_ns"], s["end_ns"]) for s in body["steps"]],
        kernel_stats=[dict(stat) for stat in body["kernel_stats"]],
        config=dict(body["config"]),
        workload=dict(body["workload"]),
        seed=body["seed"],
        warnings=list(body["warnings"]),
    )


def _atomic_write(path: str, write) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as f:
            write(f)
        os.replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise


def emit_report(report: SimReport, path: str) -> Dict[str, Any]:
    """
    Write a report as JSON through a temporary file.

    Args:
        report: Report to write
        path: Destination file

    Returns:
        The JSON body that was written
    """
    body = report_to_dict(report)

    def write(f):
        json.dump(body, f, indent=2)
        f.write("\n")

    _atomic_write(path, write)
    logger.info(f"Report written to {path}")
    return body


def emit_reports(reports: Sequence[SimReport], path: str, extra: Dict[str, Any] = None) -> Dict[str, Any]:
    """Write several reports as ``{"reports": [...]}`` plus any extra tables."""
    body: Dict[str, Any] = {"reports": [report_to_dict(r) for r in reports]}
    if extra:
        body.update(_normalize(extra))

    def write(f):
        json.dump(body, f, indent=2)
        f.write("\n")

    _atomic_write(path, write)
    logger.info(f"{len(reports)} reports written to {path}")
    return body


def load_report(path: str) -> SimReport:
    with open(path, "r") as f:
        return report_from_dict(json.load(f))


def summary_row(report: SimReport, label: str = "") -> Dict[str, Any]:
    """One CSV row: the headline metrics plus the pruning-phase breakdown."""
    return _normalize({
        "label": label or report.mode,
        "mode": report.mode,
        "total_ns": report.total_ns,
        "gops": report.gops,
        "gops_per_watt": report.gops_per_watt,
        "w4w_ns": report.w4w_ns,
        "peak_parallel_arrays": report.peak_parallel_arrays,
        "energy_pj": report.energy.total,
        "pruning_ns": report.pruning_ns,
        "attention_ns": report.attention_ns,
        "pruning_vmm_count": report.pruning_vmm_count,
        "ctrl_ns": report.ctrl_ns,
        "mask_density": "" if report.mask_density is None else report.mask_density,
    })


def write_csv(rows: Iterable[Dict[str, Any]], path: str, fieldnames: Sequence[str] = CSV_FIELDS) -> None:
    """Write plot-ready rows; columns not in ``fieldnames`` are appended in first-seen order."""
    rows = [_normalize(row) for row in rows]
    columns: List[str] = list(fieldnames)
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)

    def write(f):
        writer = csv.DictWriter(f, fieldnames=columns, restval="")
        writer.writeheader()
        writer.writerows(rows)

    _atomic_write(path, write)
    logger.info(f"CSV summary with {len(rows)} rows written to {path}")


_CHECKPOINT_EXTRAS = ("total_ops", "pruning_ns", "attention_ns", "pruning_vmm_count", "ctrl_ns", "mask_density")


def report_to_checkpoint(report: SimReport) -> Dict[str, Any]:
    """JSON body plus the fields a resumed batch needs for aggregation."""
    body = report_to_dict(report)
    body["step_kinds"] = [e.kind for e in report.steps]
    body["extras"] = {name: getattr(report, name) for name in _CHECKPOINT_EXTRAS}
    return body


def report_from_checkpoint(body: Dict[str, Any]) -> SimReport:
    report = report_from_dict(body)
    for event, kind in zip(report.steps, body.get("step_kinds", [])):
        event.kind = kind
    for name, value in body.get("extras", {}).items():
        setattr(report, name, value)
    return report
