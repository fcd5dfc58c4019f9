"""Dense matrix arithmetic with a pinned accumulation order.

Every reduction in this module is an ascending-index, single-accumulator
fold in a stated precision, so results are bit-reproducible and match a
naive scalar loop exactly.  That determinism is what lets the checksum
machinery distinguish rounding noise from injected faults.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

__all__ = [
    "Matrix2D",
    "Precision",
    "gemm",
    "reduce_rows",
    "reduce_cols",
    "flip_bit",
    "round_to",
    "FLOAT_DTYPES",
    "INT_DTYPES",
    "DTYPE_TAGS",
    "encoding_of",
]

# dtype tag -> (storage numpy dtype, unsigned view dtype, encoding bit width)
_ENCODINGS = {
    "binary64": (np.float64, np.uint64, 64),
    "binary32": (np.float32, np.uint32, 32),
    "binary16-emulated": (np.float16, np.uint16, 16),
    "int8": (np.int8, np.uint8, 8),
    "int32": (np.int32, np.uint32, 32),
}

# (mantissa bits, exponent bits) of the IEEE-754 encodings
_FLOAT_FIELDS = {
    "binary64": (52, 11),
    "binary32": (23, 8),
    "binary16-emulated": (10, 5),
}

FLOAT_DTYPES = frozenset(_FLOAT_FIELDS)
INT_DTYPES = frozenset(("int8", "int32"))
DTYPE_TAGS = tuple(_ENCODINGS)

# working dtype used to hold element values in memory; binary16-emulated
# values live as binary64 numbers constrained to the binary16 lattice
_STORAGE = {
    "binary64": np.float64,
    "binary32": np.float32,
    "binary16-emulated": np.float64,
    "int8": np.int8,
    "int32": np.int32,
}


def encoding_of(dtype: str) -> tuple[np.dtype, np.dtype, int]:
    """Return (storage dtype, unsigned view dtype, bit width) for a dtype tag."""
    try:
        sdt, udt, bits = _ENCODINGS[dtype]
    except KeyError:
        raise ValueError(f"unknown dtype tag {dtype!r}") from None
    return np.dtype(sdt), np.dtype(udt), bits


def float_fields(dtype: str) -> tuple[int, int]:
    """Return (mantissa bits, exponent bits) of a floating dtype's encoding."""
    if dtype not in _FLOAT_FIELDS:
        raise ValueError(f"{dtype!r} is not a floating dtype")
    return _FLOAT_FIELDS[dtype]


class Precision(enum.Enum):
    """Accumulation precision for GEMM and checksum reductions."""

    BINARY16 = "binary16-emulated"
    BINARY32 = "binary32"
    BINARY64 = "binary64"
    INT64 = "int64-exact"

    @property
    def is_float(self) -> bool:
        return self is not Precision.INT64

    @property
    def width(self) -> int:
        return {"binary16-emulated": 16, "binary32": 32, "binary64": 64, "int64-exact": 64}[
            self.value
        ]

    @property
    def accumulator_dtype(self) -> np.dtype:
        return np.dtype(
            {
                Precision.BINARY16: np.float16,
                Precision.BINARY32: np.float32,
                Precision.BINARY64: np.float64,
                Precision.INT64: np.int64,
            }[self]
        )

    @classmethod
    def from_tag(cls, tag: str) -> "Precision":
        for member in cls:
            if member.value == tag:
                return member
        raise ValueError(f"unknown precision tag {tag!r}")


_DTYPE_WIDTH = {"binary16-emulated": 16, "binary32": 32, "binary64": 64}


def _validate_values(arr: np.ndarray, dtype: str) -> None:
    if dtype == "binary16-emulated":
        widened = np.asarray(arr, dtype=np.float64)
        with np.errstate(over="ignore"):
            roundtrip = widened.astype(np.float16).astype(np.float64)
        same = (roundtrip == widened) | (np.isnan(roundtrip) & np.isnan(widened))
        if not bool(same.all()):
            raise ValueError("element not representable on the binary16 lattice")


class Matrix2D:
    """Dense row-major matrix with an explicit element-type tag.

    binary16-emulated matrices store binary64 values constrained to the
    binary16 lattice (every element round-trips through the 16-bit
    encoding unchanged).
    """

    __slots__ = ("rows", "cols", "dtype", "data")

    def __init__(self, data, dtype: str = "binary64", *, _trusted: bool = False):
        if dtype not in _ENCODINGS:
            raise ValueError(f"unknown dtype tag {dtype!r}")
        arr = np.asarray(data)
        if arr.ndim != 2:
            raise ValueError(f"Matrix2D requires 2-D data, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"Matrix2D requires positive dims, got shape {arr.shape}")
        storage = _STORAGE[dtype]
        if dtype in INT_DTYPES:
            cast = np.asarray(arr)
            if not np.issubdtype(cast.dtype, np.integer):
                raise ValueError(f"{dtype} matrix requires integer data")
            out = cast.astype(storage)
            if not _trusted and not np.array_equal(out.astype(np.int64), cast.astype(np.int64)):
                raise ValueError(f"element out of range for {dtype}")
            arr = out
        else:
            arr = arr.astype(storage, copy=True)
            if not _trusted:
                _validate_values(arr, dtype)
        self.rows, self.cols = int(arr.shape[0]), int(arr.shape[1])
        self.dtype = dtype
        self.data = np.ascontiguousarray(arr)

    @classmethod
    def zeros(cls, rows: int, cols: int, dtype: str = "binary64") -> "Matrix2D":
        return cls(np.zeros((rows, cols), dtype=_STORAGE[dtype]), dtype, _trusted=True)

    @classmethod
    def identity(cls, n: int, dtype: str = "binary64") -> "Matrix2D":
        return cls(np.eye(n, dtype=_STORAGE[dtype]), dtype, _trusted=True)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def copy(self) -> "Matrix2D":
        return Matrix2D(self.data.copy(), self.dtype, _trusted=True)

    def widened(self) -> np.ndarray:
        """Element values as float64 (floats) or int64 (ints); exact widening."""
        if self.dtype in INT_DTYPES:
            return self.data.astype(np.int64)
        return self.data.astype(np.float64)

    def tolist(self):
        return self.data.tolist()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Matrix2D):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def __hash__(self):
        raise TypeError("Matrix2D is unhashable")

    def __repr__(self) -> str:
        return f"Matrix2D({self.rows}x{self.cols}, {self.dtype})"


def _round_array(arr: np.ndarray, dtype: str) -> np.ndarray:
    """Round float values onto a dtype's lattice; overflow becomes +/-Inf (RNE)."""
    storage = _STORAGE[dtype]
    with np.errstate(over="ignore"):
        if dtype == "binary16-emulated":
            return arr.astype(np.float16).astype(np.float64)
        return arr.astype(storage)


def _accumulate(products: np.ndarray, axis: int) -> np.ndarray:
    """Ascending-index single-accumulator fold along ``axis`` in the array dtype."""
    with np.errstate(over="ignore", invalid="ignore"):
        acc = np.add.accumulate(products, axis=axis)
    return np.take(acc, -1, axis=axis)


# beyond this many product elements, fold over k instead of materializing B*I*O
_PRODUCT_LIMIT = 1 << 26


def _gemm_accumulate(xb: np.ndarray, wb: np.ndarray, acc_dtype: np.dtype) -> np.ndarray:
    b, i = xb.shape
    o = wb.shape[1]
    if b * i * o <= _PRODUCT_LIMIT:
        with np.errstate(over="ignore", invalid="ignore"):
            prod = xb[:, :, None] * wb[None, :, :]
            np.add.accumulate(prod, axis=1, out=prod)
        return np.ascontiguousarray(prod[:, -1, :])
    acc = np.zeros((b, o), dtype=acc_dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(i):
            acc += xb[:, k : k + 1] * wb[k : k + 1, :]
    return acc


def gemm(
    X: Matrix2D,
    Wt: Matrix2D,
    bias: Sequence[float] | np.ndarray | None = None,
    accum: Precision | None = None,
) -> Matrix2D:
    """Y[b,o] = sum_k X[b,k] * Wt[k,o] + bias[o], accumulated in ``accum``.

    Products and partial sums are rounded in the accumulation precision at
    every step, in ascending k with a single accumulator per output element,
    then the result is rounded to the operand dtype.  Integer operands
    accumulate in int32 and yield an int32 result (``accum`` must be
    int64-exact, which selects the exact integer path).
    """
    if X.cols != Wt.rows:
        raise ValueError(f"gemm dims mismatch: X is {X.shape}, Wt is {Wt.shape}")
    if X.dtype != Wt.dtype:
        raise ValueError(f"gemm operand dtypes differ: {X.dtype} vs {Wt.dtype}")
    dtype = X.dtype
    out_cols = Wt.cols
    if bias is not None:
        bias = np.asarray(bias)
        if bias.ndim != 1 or bias.shape[0] != out_cols:
            raise ValueError(f"bias length {bias.shape} does not match out dim {out_cols}")

    if dtype in INT_DTYPES:
        if accum is None:
            accum = Precision.INT64
        if accum is not Precision.INT64:
            raise ValueError("integer gemm requires the int64-exact accumulation tag")
        xb = X.data.astype(np.int32)
        wb = Wt.data.astype(np.int32)
        y = _gemm_accumulate(xb, wb, np.dtype(np.int32))
        if bias is not None:
            y = y + bias.astype(np.int32)
        return Matrix2D(y.astype(np.int32), "int32", _trusted=True)

    if accum is None:
        accum = Precision.BINARY64 if dtype == "binary64" else Precision.BINARY32
    if not accum.is_float:
        raise ValueError("float gemm requires a floating accumulation precision")
    if accum.width < _DTYPE_WIDTH[dtype]:
        raise ValueError(f"accumulation {accum.value} narrower than operand dtype {dtype}")
    if dtype == "binary16-emulated" and accum.width < 32:
        raise ValueError("binary16-emulated gemm accumulates in binary32 or wider")
    acc_dtype = accum.accumulator_dtype
    xb = X.data.astype(acc_dtype)
    wb = Wt.data.astype(acc_dtype)
    y = _gemm_accumulate(xb, wb, acc_dtype)
    if bias is not None:
        with np.errstate(over="ignore", invalid="ignore"):
            y = y + bias.astype(acc_dtype)
    return Matrix2D(_round_array(y.astype(np.float64), dtype), dtype, _trusted=True)


def reduce_rows(M: Matrix2D) -> np.ndarray:
    """Per-row sums s[b] = sum_j M[b,j], accumulated in binary64 (int64 for ints)."""
    if M.rows == 0 or M.cols == 0:
        raise ValueError("reduce_rows of empty matrix")
    acc = np.int64 if M.dtype in INT_DTYPES else np.float64
    return _accumulate(M.data.astype(acc), axis=1)


def reduce_cols(M: Matrix2D) -> np.ndarray:
    """Per-column sums s[j] = sum_b M[b,j], accumulated in binary64 (int64 for ints)."""
    if M.rows == 0 or M.cols == 0:
        raise ValueError("reduce_cols of empty matrix")
    acc = np.int64 if M.dtype in INT_DTYPES else np.float64
    return _accumulate(M.data.astype(acc), axis=0)


def flip_bit(value, bit_index: int, dtype: str):
    """Flip one bit of ``value``'s storage encoding; returns a numpy scalar.

    The result is a pure bit manipulation: no value conversion happens, so
    NaN payloads (including signaling ones) survive and a second flip of the
    same bit restores the original encoding exactly.
    """
    sdt, udt, bits = encoding_of(dtype)
    if not 0 <= bit_index < bits:
        raise ValueError(f"bit index {bit_index} out of range for {dtype} ({bits} bits)")
    with np.errstate(over="ignore"):
        enc = np.array([value], dtype=sdt).view(udt)
    enc ^= udt.type(1) << udt.type(bit_index)
    return enc.view(sdt)[0]


def round_to(value: float, p: Precision) -> float:
    """Round-to-nearest-even into precision ``p``, widened back to binary64.

    Overflow yields +/-Inf (RNE semantics); NaN maps to NaN.
    """
    if not p.is_float:
        raise ValueError("round_to requires a floating precision")
    with np.errstate(over="ignore"):
        if p is Precision.BINARY16:
            return float(np.float16(value))
        if p is Precision.BINARY32:
            return float(np.float32(value))
    return float(np.float64(value))
