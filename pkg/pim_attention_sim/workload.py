"""
Synthetic workloads: seeded embeddings, layer weights and attention masks.
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .config import WorkloadSpec
from .exceptions import DimensionError
from .logging_setup import get_logger
from .mask_gen import banded_mask, lower_triangular_mask, random_mask, read_mask
from .pipeline_sim import LayerWeights
from .tensor_core import FixedPointMatrix, MaskMatrix, extract_exponent

logger = get_logger(__name__)


@dataclass
class Workload:
    x: FixedPointMatrix
    weights: List[LayerWeights]
    mask: Optional[MaskMatrix]
    spec: WorkloadSpec

    @property
    def layer_weights(self) -> LayerWeights:
        return self.weights[0]

    def batches(self, batch_size: int) -> List[FixedPointMatrix]:
        """Split X row-wise into batches of at most ``batch_size`` embeddings."""
        if batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {batch_size}")
        data = self.x.data
        return [FixedPointMatrix(data[i:i + batch_size], self.x.exponent) for i in range(0, self.x.rows, batch_size)]


def uniform_matrix(rng: np.random.Generator, rows: int, cols: int) -> FixedPointMatrix:
    """Values drawn uniformly from [-1, 1), then converted to fixed point."""
    return extract_exponent(rng.uniform(-1.0, 1.0, size=(rows, cols)))


def make_mask(spec: WorkloadSpec, n: int, rng: np.random.Generator) -> Optional[MaskMatrix]:
    """
    Mask of the requested kind; ``generated`` leaves it to the pruning path.

    Raises:
        MaskFileError: If the mask file cannot be read
        DimensionError: If a file mask is not n x n
    """
    kind = spec.mask_kind
    if kind == "generated":
        return None
    if kind == "file":
        mask = read_mask(spec.mask_file)
        if mask.shape != (n, n):
            raise DimensionError(f"mask file {spec.mask_file} is {mask.shape[0]}x{mask.shape[1]}, expected {n}x{n}")
        return mask
    if kind == "banded":
        return banded_mask(n, spec.density)
    if kind == "lower_triangular":
        return lower_triangular_mask(n)
    return random_mask(n, spec.density, rng)


def synth_workload(spec: WorkloadSpec, rows: Optional[int] = None, distinct_layers: bool = False,
                   batch_rows: Optional[int] = None) -> Workload:
    """
    Build a deterministic workload from ``spec.seed``.

    Args:
        spec: Workload description
        rows: Number of embeddings (defaults to ``seq_len * batch_count``)
        distinct_layers: Draw separate weights for every encoder layer
        batch_rows: Side of the per-batch mask (defaults to ``seq_len``)

    Returns:
        Workload with X, one LayerWeights per layer (or one shared) and the per-batch mask
    """
    spec.validate()
    n = spec.seq_len * spec.batch_count if rows is None else rows
    rng = np.random.default_rng(spec.seed)

    weights = []
    for _ in range(spec.layers if distinct_layers else 1):
        weights.append(LayerWeights(
            w_q=uniform_matrix(rng, spec.d_model, spec.d),
            w_k=uniform_matrix(rng, spec.d_model, spec.d),
            w_v=uniform_matrix(rng, spec.d_model, spec.d_v),
            w_fc=uniform_matrix(rng, spec.fc_dim, spec.fc_dim),
        ))
    x = uniform_matrix(rng, n, spec.d_model)

    # masks draw from their own stream so the matrices don't depend on mask kind
    mask = make_mask(spec, batch_rows or spec.seq_len, np.random.default_rng([spec.seed, 1]))
    logger.debug(f"Synthesized workload: X {n}x{spec.d_model}, {len(weights)} weight set(s), "
                 f"mask {spec.mask_kind}" + (f" density {mask.density:.4f}" if mask is not None else ""))
    return Workload(x=x, weights=weights, mask=mask, spec=spec)
