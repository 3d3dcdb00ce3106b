"""
Batch driver: simulates a dataset batch by batch and aggregates the reports.

Batches run in series on the accelerator; their simulations are independent,
so they may be computed on parallel workers and merged in input order.
"""

import gc
import hashlib
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import psutil
from tqdm import tqdm

from .checkpoint_manager import CheckpointManager
from .config import AppConfig, to_flat_dict
from .logging_setup import get_logger
from .pipeline_sim import (
    CalculationMode,
    IdealKnobs,
    LayerWeights,
    SimReport,
    chain_reports,
    simulate_encoder_stack,
    simulate_layer,
)
from .report import report_from_checkpoint, report_to_checkpoint
from .tensor_core import FixedPointMatrix, MaskMatrix

logger = get_logger(__name__)


@dataclass
class BatchStats:
    """Wall-clock bookkeeping of one driver run."""
    total_batches: int = 0
    simulated_batches: int = 0
    resumed_batches: int = 0
    total_rows: int = 0
    start_time: float = 0
    total_time: float = 0

    def to_dict(self) -> Dict[str, Any]:
        result = {k: v for k, v in self.__dict__.items()}
        if self.simulated_batches > 0:
            result['avg_time_per_batch'] = self.total_time / self.simulated_batches
        else:
            result['avg_time_per_batch'] = 0
        return result


def batch_mask(mask: Optional[MaskMatrix], rows: int) -> Optional[MaskMatrix]:
    """The per-batch mask, cropped for a short final batch."""
    if mask is None or mask.shape == (rows, rows):
        return mask
    return MaskMatrix(mask.bits[:rows, :rows])


class BatchDriver:
    """Runs one calculation mode over a sequence of batches."""

    def __init__(self, config: AppConfig, mode: CalculationMode, knobs: Optional[IdealKnobs] = None,
                 show_progress: bool = False, checkpoint_file: Optional[str] = None):
        """
        Initialize the batch driver.

        Args:
            config: Application configuration
            mode: Calculation mode to simulate
            knobs: Ideal-situation knobs
            show_progress: Display a progress bar
            checkpoint_file: Where completed batches are persisted (with ``use_checkpoint``)
        """
        self.config = config
        self.mode = mode
        self.knobs = knobs or IdealKnobs()
        self.batch_size = config.batch_size
        self.max_workers = config.max_workers
        self.show_progress = show_progress

        self.checkpoint_file = checkpoint_file or config.checkpoint_file
        self.checkpoint_manager: Optional[CheckpointManager] = None

        self.stats = BatchStats()
        self.stats_lock = threading.RLock()

    def _run_key(self, batches: Sequence[FixedPointMatrix]) -> str:
        payload = json.dumps({
            "mode": self.mode.value,
            "knobs": self.knobs.active(),
            "config": to_flat_dict(self.config),
            "rows": [b.rows for b in batches],
        }, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def simulate_batch(self, index: int, x: FixedPointMatrix, weights: Sequence[LayerWeights],
                       mask: Optional[MaskMatrix]) -> SimReport:
        """
        Simulate one batch: one attention layer, or a full encoder stack when ``layers`` > 1.

        Args:
            index: Batch index (for logging)
            x: Batch embeddings
            weights: Layer weights (one per layer, or one shared)
            mask: Workload mask for a full batch

        Returns:
            SimReport of the batch
        """
        config = self.config
        mask = batch_mask(mask, x.rows)
        layers = config.workload.layers
        logger.debug(f"Simulating batch {index} ({x.rows} rows, {layers} layer(s))")
        if layers > 1:
            return simulate_encoder_stack(x, list(weights), layers, self.mode, config.hardware, self.knobs,
                                          config.quant, mask, config.functional)
        return simulate_layer(x, weights[0], self.mode, config.hardware, self.knobs, config.quant, mask,
                              config.functional)

    def process_batches(self, pending: Dict[int, FixedPointMatrix], weights: Sequence[LayerWeights],
                        mask: Optional[MaskMatrix], progress=None) -> Dict[int, SimReport]:
        """
        Simulate the pending batches, in parallel when ``max_workers`` > 1.

        Returns:
            Reports keyed by batch index
        """
        results: Dict[int, SimReport] = {}
        if self.max_workers > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=self.max_workers, thread_name_prefix="BatchSim") as executor:
                future_to_index = {
                    executor.submit(self.simulate_batch, index, x, weights, mask): index
                    for index, x in pending.items()
                }
                for future in as_completed(future_to_index):
                    index = future_to_index[future]
                    results[index] = future.result()
                    self._batch_done(index, results, progress)
        else:
            for index, x in pending.items():
                results[index] = self.simulate_batch(index, x, weights, mask)
                self._batch_done(index, results, progress)
        return results

    def _batch_done(self, index: int, results: Dict[int, SimReport], progress) -> None:
        with self.stats_lock:
            self.stats.simulated_batches += 1
            if progress is not None:
                progress.update(1)
            if self.checkpoint_manager:
                self._completed[index] = report_to_checkpoint(results[index])
                if self.stats.simulated_batches % self.config.checkpoint_interval == 0:
                    self.checkpoint_manager.save_checkpoint(self._completed)
        self._check_memory_usage()

    def run(self, batches: Sequence[FixedPointMatrix], weights: Sequence[LayerWeights],
            mask: Optional[MaskMatrix] = None) -> SimReport:
        """
        Simulate every batch and chain them serially.

        The aggregate total is the sum of the batch totals plus one transfer of
        each batch's output between consecutive batches.

        Args:
            batches: Embedding batches in input order
            weights: Layer weights (one per layer, or one shared)
            mask: Workload mask of a full batch (None to generate it per batch)

        Returns:
            Aggregated SimReport
        """
        self.stats = BatchStats(start_time=time.time(), total_batches=len(batches),
                                total_rows=sum(b.rows for b in batches))
        if not batches:
            logger.info("No batches to simulate")
            return SimReport(mode=self.mode.value)

        # fill lazy weight caches before workers share them
        for layer in weights:
            if self.mode.uses_recam_dataflow or self.mode.sparse_baseline:
                layer.w_s_quant(self.config.quant)

        self._completed: Dict[int, Dict[str, Any]] = {}
        reports: Dict[int, SimReport] = {}
        if self.config.use_checkpoint and self.checkpoint_file:
            self.checkpoint_manager = CheckpointManager(self.checkpoint_file, self.config, self._run_key(batches))
            self._completed = self.checkpoint_manager.load_checkpoint()
            for index, body in self._completed.items():
                if 0 <= index < len(batches):
                    reports[index] = report_from_checkpoint(body)
            self.stats.resumed_batches = len(reports)
            logger.info(f"Loaded checkpoint with {len(reports)} completed batches")

        pending = {i: b for i, b in enumerate(batches) if i not in reports}
        logger.info(f"Simulating {len(pending)}/{len(batches)} batches of up to {self.batch_size} rows "
                    f"in {self.mode.value} mode")
        with tqdm(total=len(pending), desc=f"{self.mode.value} batches", unit="batch",
                  disable=not self.show_progress) as progress:
            reports.update(self.process_batches(pending, weights, mask, progress))

        if self.checkpoint_manager:
            self.checkpoint_manager.save_checkpoint(self._completed)
            logger.info(f"Final checkpoint saved ({len(self._completed)} batches)")

        ordered = [reports[i] for i in range(len(batches))]
        out_width = weights[0].w_fc.cols if self.config.workload.layers > 1 else weights[0].d_v
        links = [b.rows * out_width * self.config.hardware.number_bits for b in batches[:-1]]
        total = chain_reports(ordered, links, self.config.hardware, self.knobs, prefix="batch")
        total.seed = self.config.workload.seed

        with self.stats_lock:
            self.stats.total_time = time.time() - self.stats.start_time
        logger.info(
            f"Completed {len(batches)} batches in {self.stats.total_time:.1f}s: "
            f"{total.total_ns:.1f} ns simulated, {total.gops:.3f} GOPS"
        )
        return total

    def _check_memory_usage(self) -> None:
        """Check resident memory and collect garbage when over the limit."""
        if self.config.memory_limit_mb:
            try:
                process = psutil.Process(os.getpid())
                mem_mb = process.memory_info().rss / 1024 / 1024
                logger.debug(f"Current memory usage: {mem_mb:.1f} MB")

                if mem_mb > self.config.memory_limit_mb:
                    logger.warning(f"Memory usage high ({mem_mb:.1f} MB), collecting garbage")
                    gc.collect()
                    new_mem_mb = process.memory_info().rss / 1024 / 1024
                    logger.info(f"Memory usage after cleanup: {new_mem_mb:.1f} MB (freed {mem_mb - new_mem_mb:.1f} MB)")
            except Exception as e:
                logger.debug(f"Error checking memory usage: {str(e)}")


def batch_driver(dataset: Sequence[FixedPointMatrix], weights, config: AppConfig,
                 mode: CalculationMode = CalculationMode.CPSAA, knobs: Optional[IdealKnobs] = None,
                 mask: Optional[MaskMatrix] = None, show_progress: bool = False) -> SimReport:
    """
    Split the dataset into batches of ``config.batch_size`` rows and simulate them in series.

    Args:
        dataset: Embedding matrices; concatenated row-wise before batching
        weights: LayerWeights, or one per encoder layer
        config: Application configuration
        mode: Calculation mode
        knobs: Ideal-situation knobs
        mask: Per-batch workload mask
        show_progress: Display a progress bar

    Returns:
        Aggregated SimReport
    """
    if config.batch_size <= 0:
        raise ValueError(f"batch_size must be positive, got {config.batch_size}")
    if isinstance(weights, LayerWeights):
        weights = [weights]
    batches: List[FixedPointMatrix] = []
    for x in dataset:
        for start in range(0, x.rows, config.batch_size):
            batches.append(FixedPointMatrix(x.data[start:start + config.batch_size], x.exponent))
    return BatchDriver(config, mode, knobs, show_progress).run(batches, weights, mask)
