"""
Pruning step: approximate-score mask generation and the ReCAM row search.
"""

import math
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .config import HardwareConfig, QuantConfig
from .exceptions import DimensionError, MaskFileError
from .logging_setup import get_logger
from .tensor_core import (
    FixedPointMatrix,
    IntMatrix,
    MaskMatrix,
    binarize,
    dequantize,
    int_matmul,
    quantize,
    scale_matrix,
    softmax_rows,
)

logger = get_logger(__name__)

MASK_MAGIC = b"PIMMASK1"
_DIMS = struct.Struct("<II")

__all__ = [
    "MaskMatrix",
    "RowMatch",
    "SearchResult",
    "MaskStats",
    "MaskTile",
    "generate_mask",
    "quantized_scores",
    "recam_search",
    "tile_mask",
    "mask_stats",
    "random_mask",
    "row_balanced_mask",
    "banded_mask",
    "lower_triangular_mask",
    "read_mask",
    "write_mask_text",
    "write_mask_binary",
]


@dataclass(frozen=True)
class RowMatch:
    """Coordinates of the set bits found in one searched row."""
    alpha: int
    betas: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.betas)


@dataclass
class SearchResult:
    """Outcome of the row-by-row ReCAM search."""
    matches: List[RowMatch] = field(default_factory=list)
    skipped_rows: int = 0
    search_cycles: int = 0

    def __iter__(self) -> Iterator[RowMatch]:
        return iter(self.matches)

    def __len__(self) -> int:
        return len(self.matches)

    def __getitem__(self, index):
        return self.matches[index]


@dataclass
class MaskStats:
    density: float
    per_row_nnz: List[int]
    per_col_nnz: List[int]

    def to_dict(self) -> Dict[str, object]:
        return {
            "density": self.density,
            "per_row_nnz": list(self.per_row_nnz),
            "per_col_nnz": list(self.per_col_nnz),
        }


@dataclass(frozen=True)
class MaskTile:
    """A row-contiguous piece of the mask held by one ReCAM array."""
    row0: int
    col0: int
    bits: np.ndarray
    recam_index: int


def quantized_scores(x: FixedPointMatrix, w_s_quant: IntMatrix, q: QuantConfig) -> FixedPointMatrix:
    """
    Approximate scores Q^-1(Q(X) Q(W_S) Q(X^T)) / sqrt(d) at the quantized width.

    The intermediate Q(X) Q(W_S) is re-quantized before the second product so
    both VMMs run on ``q.bits``-wide operands.
    """
    if x.rows == 0 or x.cols == 0:
        raise DimensionError("mask generation needs a non-empty input")
    if w_s_quant.shape != (x.cols, x.cols):
        raise DimensionError(f"W_S {w_s_quant.shape} does not match embedding width {x.cols}")

    qx = quantize(x, q)
    partial = int_matmul(qx, w_s_quant)
    qm = quantize(dequantize(partial, q, power=2), q)
    qxt = qx.transpose()
    scores = dequantize(int_matmul(qm, qxt), q, power=2)
    return scale_matrix(scores, 1.0 / math.sqrt(q.d))


def generate_mask(x: FixedPointMatrix, w_s_quant: IntMatrix, q: QuantConfig) -> MaskMatrix:
    """
    Predict the retained score entries from the quantized pruning path.

    Only X and the pre-quantized W_S are inputs, so mask generation cannot
    depend on M, V or any other full-precision result.

    Args:
        x: Input embeddings (n x d_model)
        w_s_quant: Quantized W_Q W_K^T (d_model x d_model)
        q: Quantization settings; theta defaults to 1/(2n)

    Returns:
        MaskMatrix (n x n)

    Raises:
        DimensionError: If the shapes disagree or X is empty
    """
    scores = quantized_scores(x, w_s_quant, q)
    theta = q.resolve_theta(x.rows)
    mask = binarize(softmax_rows(scores), theta)
    logger.debug(f"Generated {mask.rows}x{mask.cols} mask at theta={theta:.6g}, density={mask.density:.4f}")
    return mask


def tile_mask(mask: MaskMatrix, hw: HardwareConfig) -> List[MaskTile]:
    """
    Split a mask into ReCAM-sized tiles, row-contiguous, dealt over the ReCAM arrays.

    Tiles beyond the arrays of one tile spill to the next tile's arrays.
    """
    tiles: List[MaskTile] = []
    index = 0
    for row0 in range(0, mask.rows, hw.recam_rows):
        for col0 in range(0, mask.cols, hw.recam_cols):
            tiles.append(MaskTile(row0, col0, mask.bits[row0:row0 + hw.recam_rows, col0:col0 + hw.recam_cols], index))
            index += 1
    return tiles


def recam_search(mask: MaskMatrix, hw: Optional[HardwareConfig] = None) -> SearchResult:
    """
    Search the mask row by row and emit the matched coordinates.

    Each ReCAM array searches one row per cycle; arrays work in parallel on
    their own tiles and the matches are merged back in row order.

    Args:
        mask: Mask held by the scheduler
        hw: Fabric configuration; without one the mask is one logical array

    Returns:
        SearchResult with one RowMatch per non-empty row
    """
    if hw is None:
        tiles = [MaskTile(0, 0, mask.bits, 0)]
        array_count = 1
    else:
        tiles = tile_mask(mask, hw)
        array_count = hw.recam_arrays * hw.tiles

    rows_per_array: Dict[int, int] = {}
    betas_by_row: Dict[int, List[int]] = {}
    for tile in tiles:
        slot = tile.recam_index % array_count
        rows_per_array[slot] = rows_per_array.get(slot, 0) + tile.bits.shape[0]
        for local_row in range(tile.bits.shape[0]):
            cols = np.flatnonzero(tile.bits[local_row])
            if cols.size:
                betas_by_row.setdefault(tile.row0 + local_row, []).extend(int(c) + tile.col0 for c in cols)

    result = SearchResult(search_cycles=max(rows_per_array.values(), default=0))
    for alpha in range(mask.rows):
        betas = betas_by_row.get(alpha)
        if betas:
            result.matches.append(RowMatch(alpha, tuple(sorted(betas))))
        else:
            result.skipped_rows += 1
    return result


def mask_stats(mask: MaskMatrix) -> MaskStats:
    return MaskStats(
        density=mask.density,
        per_row_nnz=[int(v) for v in mask.bits.sum(axis=1)],
        per_col_nnz=[int(v) for v in mask.bits.sum(axis=0)],
    )


def random_mask(n: int, density: float, rng: np.random.Generator, cols: Optional[int] = None) -> MaskMatrix:
    """Uniform i.i.d. bits with probability ``density``; density 1.0 gives all ones."""
    cols = n if cols is None else cols
    if density >= 1.0:
        return MaskMatrix.ones(n, cols)
    return MaskMatrix(rng.random((n, cols)) < density)


def row_balanced_mask(n: int, per_row: int, rng: np.random.Generator) -> MaskMatrix:
    """Exactly ``per_row`` set bits in every row, at random columns."""
    if not 0 <= per_row <= n:
        raise ValueError(f"per_row must be in [0, {n}], got {per_row}")
    bits = np.zeros((n, n), dtype=bool)
    for row in range(n):
        bits[row, rng.choice(n, size=per_row, replace=False)] = True
    return MaskMatrix(bits)


def banded_mask(n: int, density: float) -> MaskMatrix:
    """Symmetric band around the diagonal whose density is closest to the target."""
    best_width, best_error = 0, float("inf")
    for width in range(n):
        kept = n + 2 * sum(n - k for k in range(1, width + 1))
        error = abs(kept / (n * n) - density)
        if error < best_error:
            best_width, best_error = width, error
        if kept / (n * n) >= density:
            break
    idx = np.arange(n)
    return MaskMatrix(np.abs(idx[:, None] - idx[None, :]) <= best_width)


def lower_triangular_mask(n: int) -> MaskMatrix:
    return MaskMatrix(np.tril(np.ones((n, n), dtype=bool)))


def write_mask_text(mask: MaskMatrix, path: str) -> None:
    """Write ``rows cols`` then one line of 0/1 characters per row."""
    with open(path, "w") as f:
        f.write(f"{mask.rows} {mask.cols}\n")
        for row in mask.bits:
            f.write("".join("1" if bit else "0" for bit in row) + "\n")


def write_mask_binary(mask: MaskMatrix, path: str) -> None:
    """Write the magic, little-endian dims and the row-major packed bits."""
    with open(path, "wb") as f:
        f.write(MASK_MAGIC)
        f.write(_DIMS.pack(mask.rows, mask.cols))
        f.write(np.packbits(mask.bits, axis=None).tobytes())


def _parse_binary(payload: bytes, path: str) -> MaskMatrix:
    header = len(MASK_MAGIC) + _DIMS.size
    if len(payload) < header:
        raise MaskFileError(f"{path}: truncated header")
    rows, cols = _DIMS.unpack(payload[len(MASK_MAGIC):header])
    body = np.frombuffer(payload[header:], dtype=np.uint8)
    needed = (rows * cols + 7) // 8
    if body.size != needed:
        raise MaskFileError(f"{path}: expected {needed} data bytes for {rows}x{cols}, found {body.size}")
    bits = np.unpackbits(body, count=rows * cols).astype(bool)
    return MaskMatrix(bits.reshape(rows, cols))


def _parse_text(text: str, path: str) -> MaskMatrix:
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines:
        raise MaskFileError(f"{path}: empty mask file")
    try:
        rows, cols = (int(v) for v in lines[0].split())
    except ValueError as e:
        raise MaskFileError(f"{path}: bad header {lines[0]!r}") from e
    body = lines[1:]
    if len(body) != rows:
        raise MaskFileError(f"{path}: header says {rows} rows, found {len(body)}")
    for lineno, line in enumerate(body, start=2):
        if len(line) != cols or set(line) - {"0", "1"}:
            raise MaskFileError(f"{path}:{lineno}: expected {cols} characters of 0/1")
    if rows == 0:
        return MaskMatrix(np.zeros((0, cols), dtype=bool))
    return MaskMatrix.from_rows(body)


def read_mask(path: str) -> MaskMatrix:
    """
    Load a mask in the text or the bit-packed binary format.

    Args:
        path: Mask file

    Returns:
        MaskMatrix

    Raises:
        MaskFileError: If the file is unreadable or malformed
    """
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except IOError as e:
        raise MaskFileError(f"Failed to read mask file {path}: {str(e)}") from e

    if payload.startswith(MASK_MAGIC):
        return _parse_binary(payload, path)
    try:
        text = payload.decode("ascii")
    except UnicodeDecodeError as e:
        raise MaskFileError(f"{path}: neither a binary nor a text mask") from e
    return _parse_text(text, path)
