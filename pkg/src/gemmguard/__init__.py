"""Fault-injection and checksum-protection workbench for GEMM-pipeline inference."""

from gemmguard.numerics import (
    Matrix2D,
    Precision,
    flip_bit,
    gemm,
    reduce_cols,
    reduce_rows,
    round_to,
)

__version__ = "0.1.0"

__all__ = [
    "Matrix2D",
    "Precision",
    "flip_bit",
    "gemm",
    "reduce_cols",
    "reduce_rows",
    "round_to",
    "__version__",
]
