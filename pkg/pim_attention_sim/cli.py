"""
Command-line interface for the PIM attention simulator.
"""

import argparse
import dataclasses
import sys
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from .batch_processor import BatchDriver
from .checkpoint_manager import CheckpointManager
from .config import AppConfig, apply_overrides, dump_config, load_config, parse_value, to_flat_dict
from .crossbar_model import Fabric
from .exceptions import CapacityError, ConfigError, DimensionError, IntegrityError, MaskFileError
from .logging_setup import get_logger, setup_logging
from .mask_gen import random_mask
from .pipeline_sim import BASE_MODES, SPARSE_BASELINE_MODES, CalculationMode, IdealKnobs, SimReport, knob_study
from .report import emit_report, emit_reports, summary_row, write_csv
from .sparse_kernels import ddmm_schedule, kernel_speedup_vs_density, sddmm_schedule, spmm_schedule, spmm_tradeoff
from .tensor_core import FixedPointMatrix
from .workload import Workload, synth_workload

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CAPACITY = 4
EXIT_MASK_FILE = 5
EXIT_DIMENSION = 6

SWEEP_PARAMS = ("density", "dataset_fraction", "layers", "xb_size")


def _add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config",
        help="Path to a JSON or key=value configuration file (default: built-in defaults)"
    )
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override one configuration key (repeatable)"
    )
    parser.add_argument(
        "--output",
        help="Path of the JSON report (default: <command>.json)"
    )
    parser.add_argument(
        "--csv",
        help="Also write a CSV summary to this path"
    )
    parser.add_argument(
        "--seed",
        type=int,
        help="Override the workload seed"
    )
    parser.add_argument(
        "--density",
        type=float,
        help="Override the workload mask density"
    )
    parser.add_argument(
        "--workers",
        type=int,
        help="Simulate independent batches on this many workers"
    )
    parser.add_argument(
        "--debug",
        action="store_true",
        help="Enable debug mode regardless of config setting"
    )
    parser.add_argument(
        "--quiet",
        action="store_true",
        help="Only log warnings and hide progress bars"
    )
    parser.add_argument(
        "--no-checkpoint",
        action="store_true",
        help="Ignore the checkpoint file and simulate every batch"
    )
    parser.add_argument(
        "--clear-checkpoint",
        action="store_true",
        help="Clear the checkpoint file before simulating"
    )


def _add_mode_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--mode",
        type=CalculationMode.parse,
        default=CalculationMode.CPSAA,
        help="Calculation mode: cpsaa, cpdaa, rebert, retransformer, s_rebert, s_retransformer (default: cpsaa)"
    )


def _add_knob_arguments(parser: argparse.ArgumentParser) -> None:
    for name in IdealKnobs.names():
        parser.add_argument(
            f"--{name.replace('_', '-')}",
            action="store_true",
            help=f"Ideal situation: {name.replace('_', ' ')}"
        )


def build_parser() -> argparse.ArgumentParser:
    """
    Build the argument parser with one subcommand per experiment.

    Returns:
        Configured parser
    """
    parser = argparse.ArgumentParser(
        description="Cycle-level simulator of sparse attention on ReRAM crossbar processing-in-memory"
    )
    common = argparse.ArgumentParser(add_help=False)
    _add_common_arguments(common)
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", parents=[common], help="Simulate one calculation mode")
    _add_mode_argument(simulate)
    _add_knob_arguments(simulate)

    compare = commands.add_parser("compare-modes", parents=[common], help="Simulate every calculation mode")
    compare.add_argument(
        "--include-sparse-baselines",
        action="store_true",
        help="Also simulate the zero-input sparse variants of the baselines"
    )

    sweep = commands.add_parser("sweep", parents=[common], help="Sweep one parameter")
    sweep.add_argument("--param", required=True, choices=SWEEP_PARAMS, help="Parameter to sweep")
    sweep.add_argument("--values", required=True, help="Comma-separated values (fractions allowed, e.g. 1/16)")
    sweep.add_argument(
        "--full-batches",
        type=int,
        default=16,
        help="Batches in the full dataset for the dataset_fraction sweep (default: 16)"
    )
    _add_mode_argument(sweep)

    knobs = commands.add_parser("knob-study", parents=[common], help="Ideal-situation knob study")
    _add_mode_argument(knobs)

    bench = commands.add_parser("kernel-bench", parents=[common], help="Sparse kernels against their dense counterparts")
    bench.add_argument(
        "--densities",
        default="0.05,0.1,0.2,0.5,1.0",
        help="Comma-separated mask densities (default: 0.05,0.1,0.2,0.5,1.0)"
    )

    stack = commands.add_parser("encoder-stack", parents=[common], help="Simulate stacked encoder layers")
    stack.add_argument("--layers", type=int, help="Number of encoder layers (default: workload_layers)")
    _add_mode_argument(stack)

    commands.add_parser("dump-config", parents=[common], help="Print the fully resolved configuration")
    return parser


def parse_arguments(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """
    Parse command-line arguments.

    Returns:
        Parsed arguments namespace
    """
    return build_parser().parse_args(argv)


def process_arguments(args: argparse.Namespace, config: AppConfig) -> AppConfig:
    """
    Apply ``--set`` and flag overrides to the loaded configuration.

    Args:
        args: Parsed arguments
        config: Loaded configuration

    Returns:
        Validated configuration
    """
    overrides: Dict[str, Any] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = parse_value(value.strip())
    if args.seed is not None:
        overrides["workload_seed"] = args.seed
    if args.density is not None:
        overrides["workload_density"] = args.density
    if args.workers:
        overrides["max_workers"] = args.workers
    if args.debug:
        overrides["debug_mode"] = True
        overrides["log_level"] = "DEBUG"
    elif args.quiet:
        overrides["log_level"] = "WARNING"
    if args.no_checkpoint:
        overrides["use_checkpoint"] = False
    return apply_overrides(config, overrides) if overrides else config


def _knobs(args: argparse.Namespace) -> IdealKnobs:
    return IdealKnobs(**{name: getattr(args, name, False) for name in IdealKnobs.names()})


def _parse_list(text: str) -> List[float]:
    try:
        return [float(Fraction(item.strip())) for item in text.split(",") if item.strip()]
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"Invalid value list {text!r}: {str(e)}") from e


def _echo(report: SimReport, config: AppConfig) -> SimReport:
    report.config = {k: v for k, v in to_flat_dict(config).items() if not k.startswith("workload_")}
    report.workload = dataclasses.asdict(config.workload)
    report.seed = config.workload.seed
    return report


class Experiment:
    """Runs the subcommands against one resolved configuration."""

    def __init__(self, config: AppConfig, args: argparse.Namespace):
        self.config = config
        self.args = args
        self.show_progress = not args.quiet and sys.stderr.isatty()
        self.checkpoint_file = config.checkpoint_file or f"{args.command}.checkpoint.json"

    def workload(self, config: Optional[AppConfig] = None, rows: Optional[int] = None) -> Workload:
        config = config or self.config
        spec = config.workload
        total = spec.seq_len * spec.batch_count if rows is None else rows
        return synth_workload(spec, rows=total, distinct_layers=False,
                              batch_rows=min(config.batch_size, max(1, total)))

    def run_mode(self, mode: CalculationMode, config: Optional[AppConfig] = None,
                 knobs: Optional[IdealKnobs] = None, rows: Optional[int] = None) -> SimReport:
        """Simulate the configured workload batch by batch in one mode."""
        config = config or self.config
        workload = self.workload(config, rows)
        driver = BatchDriver(config, mode, knobs, self.show_progress, self.checkpoint_file)
        report = driver.run(workload.batches(config.batch_size), workload.weights, workload.mask)
        logger.info(f"{mode.value}: {report.total_ns:.1f} ns, {report.gops:.3f} GOPS, "
                    f"{report.energy.total:.1f} pJ, w4w {report.w4w_ns:.1f} ns, "
                    f"pruning {report.pruning_ns:.1f} ns")
        return _echo(report, config)

    def output_path(self, default: str) -> str:
        return self.args.output or default

    def simulate(self) -> int:
        report = self.run_mode(self.args.mode, knobs=_knobs(self.args))
        emit_report(report, self.output_path("simulate.json"))
        if self.args.csv:
            write_csv([summary_row(report)], self.args.csv)
        return EXIT_OK

    def compare_modes(self) -> int:
        modes = list(BASE_MODES)
        if self.args.include_sparse_baselines:
            modes.extend(SPARSE_BASELINE_MODES)
        reports = [self.run_mode(mode) for mode in tqdm(modes, desc="modes", disable=not self.show_progress)]
        ordering = {
            metric: [r.mode for r in sorted(reports, key=lambda r: (getattr(r, metric), r.mode))]
            for metric in ("total_ns", "w4w_ns", "peak_parallel_arrays", "gops")
        }
        logger.info("Mode          total_ns      w4w_ns   parallel      GOPS")
        for r in reports:
            logger.info(f"{r.mode:<22} {r.total_ns:>12.1f} {r.w4w_ns:>10.1f} {r.peak_parallel_arrays:>8} {r.gops:>9.3f}")
        emit_reports(reports, self.output_path("compare-modes.json"), {"ordering": ordering})
        if self.args.csv:
            write_csv([summary_row(r) for r in reports], self.args.csv)
        return EXIT_OK

    def sweep(self) -> int:
        param = self.args.param
        values = _parse_list(self.args.values)
        rows: List[Dict[str, Any]] = []
        reports: List[SimReport] = []
        hw, spec = self.config.hardware, self.config.workload
        if param == "xb_size":
            density = spec.density
            for point in kernel_speedup_vs_density(spec.seq_len, spec.d_model, [density], hw,
                                                   xb_sizes=[int(v) for v in values], seed=spec.seed):
                rows.append({"label": f"xb_size={point.xb_size}", **point.to_dict()})
        else:
            for value in tqdm(values, desc=f"sweep {param}", disable=not self.show_progress):
                label = f"{param}={value:g}"
                if param == "density":
                    config = apply_overrides(self.config, {"workload_density": value, "functional": False})
                    report = self.run_mode(self.args.mode, config)
                    point = kernel_speedup_vs_density(spec.seq_len, spec.d_model, [value], hw,
                                                      xb_sizes=[hw.xb_rows], seed=spec.seed)[0]
                    extra = {"ddmm_cycles": point.ddmm_cycles, "sddmm_cycles": point.sddmm_cycles,
                             "sddmm_speedup": point.speedup}
                elif param == "dataset_fraction":
                    batches = max(1, round(value * self.args.full_batches))
                    config = apply_overrides(self.config, {"workload_batch_count": batches, "functional": False})
                    report = self.run_mode(self.args.mode, config)
                    extra = {"batches": batches}
                else:
                    config = apply_overrides(self.config, {"workload_layers": int(value), "functional": False})
                    report = self.run_mode(self.args.mode, config)
                    extra = {"layers": int(value)}
                reports.append(report)
                rows.append({**summary_row(report, label), **extra})
        emit_reports(reports, self.output_path("sweep.json"), {"param": param, "points": rows})
        if self.args.csv:
            write_csv(rows, self.args.csv, fieldnames=["label"])
        return EXIT_OK

    def knob_study(self) -> int:
        workload = self.workload(rows=min(self.config.batch_size, self.config.workload.seq_len))
        study = knob_study(workload.x, workload.layer_weights, self.config.hardware, self.args.mode,
                           self.config.quant, workload.mask)
        reports = [_echo(study.baseline, self.config)]
        rows = [summary_row(study.baseline, "baseline")]
        deltas = study.deltas
        for name in IdealKnobs.names():
            report = _echo(study.reports[name], self.config)
            reports.append(report)
            rows.append({**summary_row(report, name), "gain": deltas[name]})
            logger.info(f"{name}: {deltas[name] * 100:+.1f}% throughput")
        logger.info(f"Knob ranking: {', '.join(study.ranking)}")
        emit_reports(reports, self.output_path("knob-study.json"),
                     {"knobs": IdealKnobs.names(), "deltas": deltas, "ranking": study.ranking})
        if self.args.csv:
            write_csv(rows, self.args.csv)
        return EXIT_OK

    def kernel_bench(self) -> int:
        hw, spec = self.config.hardware, self.config.workload
        n = min(self.config.batch_size, spec.seq_len)
        rng = np.random.default_rng(spec.seed)
        rows = []
        for density in tqdm(_parse_list(self.args.densities), desc="densities", disable=not self.show_progress):
            mask = random_mask(n, density, rng)
            fabric = Fabric(hw)
            xt = fabric.allocate("Xt", spec.d_model, n)
            v = fabric.allocate("V", n, spec.d_v)
            dense_s = ddmm_schedule(n, xt, hw)
            sparse_s = sddmm_schedule(mask, spec.d_model, hw, placement=xt)
            dense_z = ddmm_schedule(n, v, hw)
            sparse_z = spmm_schedule(mask, spec.d_v, hw, fabric=fabric)
            tradeoff = spmm_tradeoff(None, FixedPointMatrix.zeros(n, spec.d_v), mask, hw)
            rows.append({
                "label": f"density={density:g}",
                "density": mask.density,
                "ddmm_s_cycles": dense_s.cycles,
                "sddmm_cycles": sparse_s.cycles,
                "ddmm_s_energy_pj": dense_s.energy.total,
                "sddmm_energy_pj": sparse_s.energy.total,
                "ddmm_z_cycles": dense_z.cycles,
                "spmm_cycles": sparse_z.cycles,
                "spmm_row_steps": sparse_z.row_steps,
                "ddmm_z_energy_pj": dense_z.energy.total,
                "spmm_energy_pj": sparse_z.energy.total,
                **{f"tradeoff_{k}": val for k, val in tradeoff.to_dict().items()},
            })
            logger.info(f"density {density:g}: SDDMM {sparse_s.cycles} vs DDMM {dense_s.cycles} cycles, "
                        f"SpMM {sparse_z.cycles} vs DDMM {dense_z.cycles} cycles")
        emit_reports([], self.output_path("kernel-bench.json"), {"points": rows})
        if self.args.csv:
            write_csv(rows, self.args.csv, fieldnames=["label"])
        return EXIT_OK

    def encoder_stack(self) -> int:
        config = self.config
        if self.args.layers is not None:
            config = apply_overrides(config, {"workload_layers": self.args.layers})
        if config.workload.layers > 1 and config.workload.fc_dim != config.workload.d_model:
            raise DimensionError(f"encoder stacking needs workload_fc_dim == workload_d_model, "
                                 f"got {config.workload.fc_dim} and {config.workload.d_model}")
        report = self.run_mode(self.args.mode, config)
        emit_report(report, self.output_path("encoder-stack.json"))
        if self.args.csv:
            write_csv([summary_row(report, f"layers={config.workload.layers}")], self.args.csv)
        return EXIT_OK

    def dump_config(self) -> int:
        text = dump_config(self.config)
        if self.args.output:
            with open(self.args.output, "w") as f:
                f.write(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK

    def run(self) -> int:
        handlers = {
            "simulate": self.simulate,
            "compare-modes": self.compare_modes,
            "sweep": self.sweep,
            "knob-study": self.knob_study,
            "kernel-bench": self.kernel_bench,
            "encoder-stack": self.encoder_stack,
            "dump-config": self.dump_config,
        }
        return handlers[self.args.command]()


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run the command-line interface.

    Returns:
        Exit code: 0 success, 1 unexpected failure, 2 usage, 3 configuration,
        4 capacity, 5 mask file, 6 dimension or integrity
    """
    config = None
    try:
        try:
            args = parse_arguments(argv)
        except SystemExit as e:
            return e.code if isinstance(e.code, int) else EXIT_USAGE

        config = process_arguments(args, load_config(args.config))
        setup_logging(config)

        if args.clear_checkpoint:
            CheckpointManager(config.checkpoint_file or f"{args.command}.checkpoint.json", config).clear_checkpoint()

        logger.info(f"Command: {args.command}")
        logger.info(f"Workload: n={config.workload.seq_len} x {config.workload.batch_count} batch(es), "
                    f"d_model={config.workload.d_model}, d={config.workload.d}, d_v={config.workload.d_v}, "
                    f"mask {config.workload.mask_kind} at {config.workload.density}, seed {config.workload.seed}")
        logger.info(f"Parallelization: {config.max_workers} workers")
        return Experiment(config, args).run()

    except ConfigError as e:
        return _fail(e, EXIT_CONFIG, config)
    except CapacityError as e:
        return _fail(e, EXIT_CAPACITY, config)
    except MaskFileError as e:
        return _fail(e, EXIT_MASK_FILE, config)
    except (DimensionError, IntegrityError) as e:
        return _fail(e, EXIT_DIMENSION, config)
    except Exception as e:
        return _fail(e, EXIT_FAILURE, config)


def _fail(error: Exception, code: int, config: Optional[AppConfig]) -> int:
    logger.error(f"Command failed: {str(error)}")
    if config is not None and config.debug_mode:
        import traceback
        logger.error(f"Traceback: {traceback.format_exc()}")
    print(f"error: {error}", file=sys.stderr)
    return code
