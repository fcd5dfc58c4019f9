import math

import numpy as np
import pytest

from gemmguard.numerics import (
    Matrix2D,
    Precision,
    flip_bit,
    gemm,
    reduce_cols,
    reduce_rows,
    round_to,
)

# ---------------------------------------------------------------------------
# independent oracles

ACC_DTYPES = {
    Precision.BINARY32: np.float32,
    Precision.BINARY64: np.float64,
    Precision.INT64: np.int32,  # integer gemm accumulates in int32
}


def gemm_oracle(X, Wt, bias, accum):
    """Naive triple loop: scalar single accumulator, ascending k."""
    dt = ACC_DTYPES[accum]
    B, I = X.shape
    O = Wt.shape[1]
    Y = np.zeros((B, O), dtype=dt)
    for b in range(B):
        for o in range(O):
            acc = dt(0)
            for k in range(I):
                acc = dt(acc + dt(dt(X[b, k]) * dt(Wt[k, o])))
            if bias is not None:
                acc = dt(acc + dt(bias[o]))
            Y[b, o] = acc
    return Y


def sum_oracle(values):
    """Ascending-order scalar binary64 summation."""
    acc = 0.0
    for v in values:
        acc += float(v)
    return acc


def random_matrix(rng, rows, cols, dtype):
    if dtype == "int8":
        return Matrix2D(rng.integers(-100, 101, (rows, cols)), "int8")
    if dtype == "int32":
        return Matrix2D(rng.integers(-(2**20), 2**20, (rows, cols)), "int32")
    vals = rng.standard_normal((rows, cols))
    if dtype == "binary16-emulated":
        vals = vals.astype(np.float16).astype(np.float64)
    elif dtype == "binary32":
        vals = vals.astype(np.float32)
    return Matrix2D(vals, dtype)


# ---------------------------------------------------------------------------
# gemm


def test_gemm_basic_example():
    X = Matrix2D([[1, 2], [3, 4]])
    Wt = Matrix2D([[5, 6], [7, 8]])
    Y = gemm(X, Wt, accum=Precision.BINARY64)
    assert Y.tolist() == [[19, 22], [43, 50]]


def test_gemm_identity():
    X = Matrix2D([[3.5, -2.25]])
    Y = gemm(X, Matrix2D.identity(2), accum=Precision.BINARY64)
    assert Y.tolist() == [[3.5, -2.25]]


def test_gemm_bias():
    X = Matrix2D([[1, 1]])
    Wt = Matrix2D([[1, 2], [3, 4]])
    Y = gemm(X, Wt, bias=[1, 1], accum=Precision.BINARY64)
    assert Y.tolist() == [[5, 7]]


@pytest.mark.parametrize(
    "dtype,accum",
    [
        ("binary64", Precision.BINARY64),
        ("binary32", Precision.BINARY32),
        ("binary32", Precision.BINARY64),
        ("binary16-emulated", Precision.BINARY32),
        ("binary16-emulated", Precision.BINARY64),
        ("int8", Precision.INT64),
    ],
)
def test_gemm_matches_triple_loop_oracle(dtype, accum):
    rng = np.random.default_rng(1234)
    for trial in range(3):
        X = random_matrix(rng, 5, 17, dtype)
        Wt = random_matrix(rng, 17, 7, dtype)
        if dtype == "int8":
            bias = rng.integers(-50, 50, 7).astype(np.int32)
        else:
            bias = random_matrix(rng, 1, 7, dtype).data[0]
        got = gemm(X, Wt, bias=bias, accum=accum)
        want = gemm_oracle(X.data, Wt.data, bias, accum)
        if dtype == "binary16-emulated":
            want = want.astype(np.float16).astype(np.float64)
        elif dtype == "binary32" and accum is Precision.BINARY64:
            want = want.astype(np.float32)
        assert got.data.tobytes() == want.astype(got.data.dtype).tobytes()


def test_gemm_dim_mismatch():
    with pytest.raises(ValueError, match="dims"):
        gemm(Matrix2D([[1, 2]]), Matrix2D([[1, 2]]))


def test_gemm_bad_bias_length():
    with pytest.raises(ValueError, match="bias"):
        gemm(Matrix2D([[1, 2]]), Matrix2D([[1], [2]]), bias=[1, 2])


def test_gemm_accum_narrower_than_dtype():
    X = Matrix2D([[1.0]], "binary64")
    with pytest.raises(ValueError, match="narrower"):
        gemm(X, X, accum=Precision.BINARY32)
    X16 = Matrix2D([[1.0]], "binary16-emulated")
    with pytest.raises(ValueError, match="binary32 or wider"):
        gemm(X16, X16, accum=Precision.BINARY16)


def test_gemm_integer_requires_exact_tag():
    X = Matrix2D([[1]], "int8")
    with pytest.raises(ValueError, match="int64-exact"):
        gemm(X, X, accum=Precision.BINARY64)


def test_gemm_deterministic():
    rng = np.random.default_rng(7)
    X = random_matrix(rng, 4, 9, "binary32")
    Wt = random_matrix(rng, 9, 6, "binary32")
    a = gemm(X, Wt, accum=Precision.BINARY32)
    b = gemm(X, Wt, accum=Precision.BINARY32)
    assert a == b


# ---------------------------------------------------------------------------
# reductions


def test_reduce_rows_basic():
    assert reduce_rows(Matrix2D([[1, 2], [3, 4]])).tolist() == [3, 7]


def test_reduce_rows_zero():
    assert reduce_rows(Matrix2D.zeros(2, 3)).tolist() == [0, 0]


def test_reduce_cols_basic():
    assert reduce_cols(Matrix2D([[1, 2], [3, 4]])).tolist() == [4, 6]
    assert reduce_cols(Matrix2D.identity(3)).tolist() == [1, 1, 1]


def test_reduce_matches_extended_precision_oracle():
    rng = np.random.default_rng(99)
    M = random_matrix(rng, 8, 8, "binary32")
    got = reduce_rows(M)
    for b in range(8):
        assert got[b] == sum_oracle(M.data[b, :])
    gotc = reduce_cols(M)
    for j in range(8):
        assert gotc[j] == sum_oracle(M.data[:, j])


def test_reduce_totals_agree():
    rng = np.random.default_rng(3)
    Mi = random_matrix(rng, 6, 9, "int32")
    assert int(reduce_rows(Mi).sum()) == int(reduce_cols(Mi).sum())
    Mf = random_matrix(rng, 6, 9, "binary64")
    assert math.isclose(
        float(reduce_rows(Mf).sum()), float(reduce_cols(Mf).sum()), rel_tol=1e-12
    )


def test_reduce_empty_rejected():
    with pytest.raises(ValueError):
        Matrix2D(np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# bit flips


def test_flip_sign_bit_binary32():
    assert flip_bit(np.float32(1.0), 31, "binary32") == np.float32(-1.0)


def test_flip_lsb_int8():
    assert flip_bit(np.int8(4), 0, "int8") == 5


def test_flip_exponent_to_inf():
    # 0x3F800000 ^ bit30 = 0x7F800000
    assert np.isinf(flip_bit(np.float32(1.0), 30, "binary32"))


def test_flip_bit_out_of_range():
    with pytest.raises(ValueError, match="bit index"):
        flip_bit(1.0, 64, "binary64")
    with pytest.raises(ValueError, match="bit index"):
        flip_bit(np.int8(1), 8, "int8")


@pytest.mark.parametrize("dtype", ["binary64", "binary32", "binary16-emulated", "int8", "int32"])
def test_flip_bit_involution_all_bits(dtype):
    from gemmguard.numerics import encoding_of

    sdt, udt, bits = encoding_of(dtype)
    rng = np.random.default_rng(17)
    if dtype.startswith("binary"):
        values = [sdt.type(v) for v in (0.0, -1.5, 3.14159, np.nan, np.inf)]
        # signaling NaN: exponent all ones, quiet bit clear, payload nonzero
        snan_bits = udt.type((1 << (bits - 1)) - (1 << (bits - int(np.finfo(sdt).nmant) - 1)) + 1)
        values.append(np.array([snan_bits], dtype=udt).view(sdt)[0])
    else:
        values = [sdt.type(v) for v in rng.integers(np.iinfo(sdt).min, np.iinfo(sdt).max, 5)]
    for v in values:
        for i in range(bits):
            once = flip_bit(v, i, dtype)
            twice = flip_bit(once, i, dtype)
            assert (
                np.array([twice], dtype=sdt).tobytes() == np.array([v], dtype=sdt).tobytes()
            ), f"involution failed for {dtype} value {v!r} bit {i}"
            assert (
                np.array([once], dtype=sdt).tobytes() != np.array([v], dtype=sdt).tobytes()
            )


# ---------------------------------------------------------------------------
# rounding


def test_round_to_exact():
    assert round_to(1.0, Precision.BINARY16) == 1.0


def test_round_to_overflow_inf():
    # binary16 max finite is 65504; 65520 rounds up under RNE
    assert round_to(65520.0, Precision.BINARY16) == math.inf
    assert round_to(-65520.0, Precision.BINARY16) == -math.inf


def test_round_to_subnormal_underflow():
    assert round_to(2.0**-25, Precision.BINARY16) == 0.0


def test_round_to_nan():
    assert math.isnan(round_to(math.nan, Precision.BINARY32))


def test_round_to_rejects_integer_precision():
    with pytest.raises(ValueError):
        round_to(1.0, Precision.INT64)


@pytest.mark.parametrize("p", [Precision.BINARY16, Precision.BINARY32, Precision.BINARY64])
def test_round_to_idempotent(p):
    rng = np.random.default_rng(5)
    for v in rng.standard_normal(100) * 10.0 ** rng.integers(-8, 8, 100):
        once = round_to(float(v), p)
        assert round_to(once, p) == once or (math.isnan(once) and math.isnan(round_to(once, p)))


# ---------------------------------------------------------------------------
# Matrix2D validation


def test_matrix_shape_validation():
    with pytest.raises(ValueError, match="2-D"):
        Matrix2D([1, 2, 3])


def test_matrix_b16_lattice_enforced():
    with pytest.raises(ValueError, match="lattice"):
        Matrix2D([[1.0 + 2.0**-20]], "binary16-emulated")
    Matrix2D([[1.0 + 2.0**-10]], "binary16-emulated")  # representable


def test_matrix_int8_range_enforced():
    with pytest.raises(ValueError):
        Matrix2D([[300]], "int8")


def test_matrix_equality_is_bitwise():
    a = Matrix2D([[0.0]])
    b = Matrix2D([[-0.0]])
    assert not (a == b)
    assert a == Matrix2D([[0.0]])
