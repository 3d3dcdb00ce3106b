"""
Fixed-point matrices, quantization, softmax, binarization and the dense
attention reference.

Every matrix that flows through the simulated fabric is a FixedPointMatrix:
signed 32-bit fractions sharing one matrix-wide exponent. Products are formed
exactly from 16-bit partial products (each partial sum fits a 64-bit
accumulator) and then re-normalized to 32-bit fractions.
"""

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from .config import QuantConfig
from .exceptions import DimensionError

FRACTION_BITS = 32
FRACTION_MAX = (1 << (FRACTION_BITS - 1)) - 1
FRACTION_MIN = -(1 << (FRACTION_BITS - 1))

_HALF_BITS = 16
_HALF_MASK = (1 << _HALF_BITS) - 1


@dataclass(frozen=True, eq=False)
class FixedPointMatrix:
    """
    2-D matrix of signed 32-bit fractions with a shared exponent.

    The value of entry (i, j) is ``data[i, j] * 2**exponent`` exactly.
    """
    data: np.ndarray
    exponent: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.int64)
        if data.ndim != 2:
            raise DimensionError(f"FixedPointMatrix needs 2-D data, got shape {data.shape}")
        if data.size and (data.max() > FRACTION_MAX or data.min() < FRACTION_MIN):
            raise ValueError("fraction outside the signed 32-bit range")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "exponent", int(self.exponent))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def to_real(self) -> np.ndarray:
        """Reconstruct the real values (exact in float64)."""
        return np.ldexp(self.data.astype(np.float64), self.exponent)

    def transpose(self) -> "FixedPointMatrix":
        return FixedPointMatrix(self.data.T.copy(), self.exponent)

    @property
    def T(self) -> "FixedPointMatrix":
        return self.transpose()

    def __eq__(self, other) -> bool:
        if not isinstance(other, FixedPointMatrix):
            return NotImplemented
        return self.exponent == other.exponent and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.exponent, self.data.shape, self.data.tobytes()))

    def __repr__(self) -> str:
        return f"FixedPointMatrix({self.rows}x{self.cols}, exponent={self.exponent})"

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "FixedPointMatrix":
        return cls(np.zeros((rows, cols), dtype=np.int64), 0)

    @classmethod
    def from_exact(cls, values: np.ndarray, exponent: int) -> "FixedPointMatrix":
        """
        Normalize exact integer values scaled by ``2**exponent`` to 32-bit fractions.

        Args:
            values: Integer array (int64 or Python ints in an object array)
            exponent: Binary weight of one unit of ``values``

        Returns:
            FixedPointMatrix whose largest fraction magnitude lies in [2^30, 2^31)
        """
        values = np.asarray(values, dtype=object)
        if values.ndim != 2:
            raise DimensionError(f"expected 2-D values, got shape {values.shape}")
        if values.size == 0:
            return cls(np.zeros(values.shape, dtype=np.int64), 0)
        max_abs = int(np.max(np.abs(values)))
        if max_abs == 0:
            return cls(np.zeros(values.shape, dtype=np.int64), 0)

        shift = max_abs.bit_length() - (FRACTION_BITS - 1)
        if shift <= 0:
            data = values * (1 << -shift)
        else:
            # round half away from zero
            half = 1 << (shift - 1)
            magnitude = (np.abs(values) + half) // (1 << shift)
            data = np.where(values < 0, -magnitude, np.minimum(magnitude, FRACTION_MAX))
        return cls(data.astype(np.int64), exponent + shift)


@dataclass(frozen=True, eq=False)
class IntMatrix:
    """Quantized integer matrix; real value = values / scale."""
    values: np.ndarray
    scale: float = 1.0
    bits: Optional[int] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.int64)
        if values.ndim != 2:
            raise DimensionError(f"IntMatrix needs 2-D values, got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape

    def transpose(self) -> "IntMatrix":
        return IntMatrix(self.values.T.copy(), self.scale, self.bits)


@dataclass(eq=False)
class MaskMatrix:
    """Dense bit matrix marking the retained score entries."""
    bits: np.ndarray
    density: float = field(init=False, default=0.0)

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise DimensionError(f"MaskMatrix needs 2-D bits, got shape {bits.shape}")
        self.bits = bits
        self._refresh()

    def _refresh(self) -> None:
        size = self.bits.size
        self.density = float(np.count_nonzero(self.bits)) / size if size else 0.0

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self):
        return self.bits.shape

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.bits))

    def set(self, row: int, col: int, value: bool) -> None:
        """Set one bit and refresh the cached density."""
        self.bits[row, col] = bool(value)
        self._refresh()

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskMatrix):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    def __repr__(self) -> str:
        return f"MaskMatrix({self.rows}x{self.cols}, density={self.density:.4f})"

    @classmethod
    def ones(cls, rows: int, cols: Optional[int] = None) -> "MaskMatrix":
        return cls(np.ones((rows, rows if cols is None else cols), dtype=bool))

    @classmethod
    def zeros(cls, rows: int, cols: Optional[int] = None) -> "MaskMatrix":
        return cls(np.zeros((rows, rows if cols is None else cols), dtype=bool))

    @classmethod
    def identity(cls, n: int) -> "MaskMatrix":
        return cls(np.eye(n, dtype=bool))

    @classmethod
    def from_rows(cls, rows: Iterable[str]) -> "MaskMatrix":
        """Build a mask from strings such as ``"1100"``."""
        return cls(np.array([[ch == "1" for ch in row] for row in rows], dtype=bool))


MatrixLike = Union[FixedPointMatrix, np.ndarray, Sequence[Sequence[float]]]


def _real(m: MatrixLike) -> np.ndarray:
    if isinstance(m, FixedPointMatrix):
        return m.to_real()
    values = np.asarray(m, dtype=np.float64)
    if values.ndim == 1:
        values = values.reshape(1, -1)
    return values


def extract_exponent(values: MatrixLike) -> FixedPointMatrix:
    """
    Convert real values to a FixedPointMatrix with one matrix-wide exponent.

    The exponent is chosen so the largest magnitude fills the top fraction
    bits. Per-entry round-trip error is at most 2^(k-31), with k the binary
    exponent of the largest magnitude.

    Args:
        values: Real matrix (or FixedPointMatrix, which is re-normalized)

    Returns:
        FixedPointMatrix

    Raises:
        ValueError: If any value is NaN or infinite
    """
    values = _real(values)
    if values.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("extract_exponent requires finite values")
    if values.size == 0:
        return FixedPointMatrix(np.zeros(values.shape, dtype=np.int64), 0)
    max_abs = float(np.max(np.abs(values)))
    if max_abs == 0.0:
        return FixedPointMatrix(np.zeros(values.shape, dtype=np.int64), 0)

    _, k = np.frexp(max_abs)
    exponent = int(k) - (FRACTION_BITS - 1)
    fractions = np.rint(np.ldexp(values, -exponent))
    fractions = np.clip(fractions, FRACTION_MIN, FRACTION_MAX).astype(np.int64)
    return FixedPointMatrix(fractions, exponent)


def _split_halves(data: np.ndarray):
    hi = (data >> _HALF_BITS).astype(np.float64)
    lo = (data & _HALF_MASK).astype(np.float64)
    return hi, lo


def exact_product(a: FixedPointMatrix, b: FixedPointMatrix) -> Tuple[np.ndarray, int]:
    """
    Exact integer product of the fractions and its binary weight.

    Args:
        a: Left operand (m x k)
        b: Right operand (k x n)

    Returns:
        (object array of Python ints, exponent)

    Raises:
        DimensionError: If inner dimensions disagree
    """
    if a.cols != b.rows:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    if a.rows == 0 or b.cols == 0 or a.cols == 0:
        return np.zeros((a.rows, b.cols), dtype=np.int64).astype(object), 0

    a_hi, a_lo = _split_halves(a.data)
    b_hi, b_lo = _split_halves(b.data)
    # each partial sum stays below 2^53 for k < 2^21, so float64 products are exact
    hh = (a_hi @ b_hi).astype(np.int64).astype(object)
    mid = ((a_hi @ b_lo) + (a_lo @ b_hi)).astype(np.int64).astype(object)
    ll = (a_lo @ b_lo).astype(np.int64).astype(object)
    exact = hh * (1 << (2 * _HALF_BITS)) + mid * (1 << _HALF_BITS) + ll
    return exact, a.exponent + b.exponent


def fixed_matmul(a: FixedPointMatrix, b: FixedPointMatrix) -> FixedPointMatrix:
    """Exact fixed-point product, re-normalized to 32-bit fractions."""
    exact, exponent = exact_product(a, b)
    return FixedPointMatrix.from_exact(exact, exponent)


def scale_matrix(m: FixedPointMatrix, factor: float) -> FixedPointMatrix:
    """Multiply every entry by a real factor and re-extract the exponent."""
    return extract_exponent(m.to_real() * factor)


def hard_mask(m: FixedPointMatrix, mask: "MaskMatrix") -> FixedPointMatrix:
    """Zero every entry outside the mask."""
    if m.shape != mask.shape:
        raise DimensionError(f"mask {mask.shape} does not match matrix {m.shape}")
    return FixedPointMatrix(np.where(mask.bits, m.data, 0), m.exponent)


def default_gamma(values: np.ndarray, bits: int) -> float:
    """Per-matrix scaling factor 2^(bits-2) / max|x| (1.0 for an all-zero matrix)."""
    max_abs = float(np.max(np.abs(values))) if values.size else 0.0
    if max_abs == 0.0:
        return 1.0
    return float(2 ** (bits - 2)) / max_abs


def quantize(m: MatrixLike, q: QuantConfig, gamma: Optional[float] = None) -> IntMatrix:
    """
    Quantize to ``q.bits`` signed integers: round(gamma * x), saturated.

    Args:
        m: Matrix to quantize
        q: Quantization settings
        gamma: Explicit scaling factor; falls back to q.gamma, then to the per-matrix default

    Returns:
        IntMatrix carrying the scaling factor used
    """
    values = _real(m)
    if gamma is None:
        gamma = q.gamma if q.gamma is not None else default_gamma(values, q.bits)
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    quantized = np.clip(np.rint(gamma * values), q.qmin, q.qmax).astype(np.int64)
    return IntMatrix(quantized, float(gamma), q.bits)


def int_matmul(a: IntMatrix, b: IntMatrix) -> IntMatrix:
    """Product of quantized operands accumulated in 64 bits."""
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return IntMatrix(a.values @ b.values, a.scale * b.scale, None)


def dequantize(m: Union[IntMatrix, np.ndarray], q: QuantConfig, power: int = 1) -> FixedPointMatrix:
    """
    Map quantized values back to fixed point: value / gamma**power.

    With ``q.gamma`` unset, the scale recorded on the IntMatrix is used and
    already reflects the product's power.

    Args:
        m: Quantized matrix
        q: Quantization settings
        power: Number of quantized factors in the product (1 or more)

    Returns:
        FixedPointMatrix

    Raises:
        ValueError: If power is not a positive integer or no gamma is known
    """
    if isinstance(power, bool) or not isinstance(power, (int, np.integer)) or power < 1:
        raise ValueError(f"gamma power must be a positive integer, got {power!r}")
    if q.gamma is not None:
        divisor = q.gamma ** power
    elif isinstance(m, IntMatrix):
        divisor = m.scale
    else:
        raise ValueError("dequantize needs q.gamma for a bare integer array")
    values = m.values if isinstance(m, IntMatrix) else np.asarray(m)
    if values.ndim == 1:
        values = values.reshape(1, -1)
    return extract_exponent(values.astype(np.float64) / divisor)


def _softmax_real(x: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    row_max = np.max(x, axis=1, keepdims=True)
    empty = ~np.isfinite(row_max)
    row_max = np.where(empty, 0.0, row_max)
    e = np.exp(x - row_max)
    sums = np.sum(e, axis=1, keepdims=True)
    sums = np.where(sums == 0.0, 1.0, sums)
    return e / sums


def softmax_rows(m: FixedPointMatrix, mask: Optional[MaskMatrix] = None) -> FixedPointMatrix:
    """
    Row-wise softmax with max subtraction, re-quantized to fixed point.

    Entries outside ``mask`` take no part and come out as zero; a row with
    no retained entry is all zero.

    Args:
        m: Score matrix
        mask: Optional retention mask

    Returns:
        FixedPointMatrix of row-normalized weights

    Raises:
        ValueError: On an empty matrix
    """
    if m.rows == 0 or m.cols == 0:
        raise ValueError("softmax_rows needs a non-empty matrix")
    if mask is not None and mask.shape != m.shape:
        raise DimensionError(f"mask {mask.shape} does not match matrix {m.shape}")
    return extract_exponent(_softmax_real(m.to_real(), None if mask is None else mask.bits))


def binarize(m: FixedPointMatrix, theta: float) -> MaskMatrix:
    """Mask bit = 1 iff entry >= theta."""
    if not 0 < theta <= 1:
        raise ValueError(f"theta must be in (0, 1], got {theta}")
    return MaskMatrix(m.to_real() >= theta)


def precompute_score_weights(w_q: FixedPointMatrix, w_k: FixedPointMatrix) -> FixedPointMatrix:
    """W_S = W_Q . W_K^T, so that Q . K^T = X . W_S . X^T."""
    if w_q.shape != w_k.shape:
        raise DimensionError(f"W_Q {w_q.shape} and W_K {w_k.shape} differ")
    return fixed_matmul(w_q, w_k.transpose())


def dense_attention_oracle(x: FixedPointMatrix, w_q: FixedPointMatrix, w_k: FixedPointMatrix,
                           w_v: FixedPointMatrix, mask: Optional[MaskMatrix] = None) -> FixedPointMatrix:
    """
    Reference attention Z = softmax(Q K^T / sqrt(d)) V by plain dense matmul.

    With ``mask`` the scores are hard-masked to -inf off the mask before the
    softmax.

    Args:
        x: Input embeddings (n x d_model)
        w_q: Query weights (d_model x d)
        w_k: Key weights (d_model x d)
        w_v: Value weights (d_model x d_v)
        mask: Optional n x n retention mask

    Returns:
        FixedPointMatrix Z (n x d_v)

    Raises:
        DimensionError: If the shapes disagree
    """
    if not (x.cols == w_q.rows == w_k.rows == w_v.rows):
        raise DimensionError(
            f"embedding width {x.cols} does not match weights {w_q.shape}, {w_k.shape}, {w_v.shape}"
        )
    if w_q.cols != w_k.cols or w_q.cols == 0:
        raise DimensionError(f"query/key widths disagree or are zero: {w_q.cols} vs {w_k.cols}")
    if mask is not None and mask.shape != (x.rows, x.rows):
        raise DimensionError(f"mask {mask.shape} is not {x.rows}x{x.rows}")

    xr = x.to_real()
    q = xr @ w_q.to_real()
    k = xr @ w_k.to_real()
    v = xr @ w_v.to_real()
    scores = (q @ k.T) / math.sqrt(w_q.cols)
    weights = _softmax_real(scores, None if mask is None else mask.bits)
    return extract_exponent(weights @ v)
