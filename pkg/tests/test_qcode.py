from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vfedsec.qcode import (
    QConfig,
    QuantizationError,
    add_mod,
    decode_qmatrix,
    decode_real,
    dequantize_sum,
    encode_qmatrix,
    encode_real,
    quantize_matrix,
    quantize_scalar,
    sum_mod,
)

CFG = QConfig()


def rng(seed=0):
    return np.random.default_rng(seed)


@pytest.mark.parametrize("x,expected", [(0.0, 67108864), (4.0, 134217728), (1.0, 83886080), (-5.0, 0)])
def test_scalar_examples(x, expected):
    assert quantize_scalar(x, CFG, rng()) == expected


def test_scalar_rejects_non_finite():
    for bad in (float("nan"), float("inf"), -float("inf")):
        with pytest.raises(QuantizationError, match="non-finite input"):
            quantize_scalar(bad, CFG, rng())


def test_matrix_examples():
    q = quantize_matrix(np.array([[0.0], [4.0]]), CFG, rng())
    assert q.dtype == np.uint32
    assert q.ravel().tolist() == [67108864, 134217728]
    assert np.all(quantize_matrix(np.zeros((5, 3)), CFG, rng()) == CFG.r // 2)


def test_dequantize_examples():
    assert dequantize_sum(np.array([[67108864]]), 1, CFG)[0, 0] == 0.0
    assert dequantize_sum(np.array([[150994944]]), 2, CFG)[0, 0] == 1.0
    assert dequantize_sum(np.array([[0]]), 1, CFG)[0, 0] == -4.0
    with pytest.raises(QuantizationError):
        dequantize_sum(np.array([[0]]), 0, CFG)


def test_config_validation():
    with pytest.raises(QuantizationError):
        QConfig(t=0)
    with pytest.raises(QuantizationError):
        QConfig(r=3 << 20)
    with pytest.raises(QuantizationError):
        QConfig(field_modulus=1 << 31)
    assert CFG.max_summands == 31
    assert CFG.max_summands * CFG.r < CFG.field_modulus
    CFG.check_summands(31)
    with pytest.raises(QuantizationError):
        CFG.check_summands(32)
    assert QConfig(t_update=0.5).for_updates().t == 0.5


def test_roundtrip_within_one_step():
    x = rng(1).uniform(-4, 4, (64, 32))
    back = dequantize_sum(quantize_matrix(x, CFG, rng(2)), 1, CFG)
    assert np.max(np.abs(back - x)) <= CFG.step


@settings(max_examples=200, deadline=None)
@given(st.floats(-4, 4, allow_nan=False), st.integers(0, 2**32 - 1))
def test_scalar_in_adjacent_bucket(x, seed):
    q = quantize_scalar(x, CFG, rng(seed))
    exact = (Fraction(x) + 4) / 8 * CFG.r
    assert 0 <= q <= CFG.r
    assert abs(Fraction(q) - exact) < 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-4, 4, allow_nan=False), min_size=1, max_size=31), st.integers(0, 2**32 - 1))
def test_sum_decodes_to_sum_of_inputs(xs, seed):
    # decoding a modular sum of n codes recovers the real sum within n steps
    qs = [quantize_matrix(np.array([[x]]), CFG, rng(seed + i)) for i, x in enumerate(xs)]
    got = dequantize_sum(sum_mod(qs), len(xs), CFG)[0, 0]
    assert abs(Fraction(got) - sum(Fraction(x) for x in xs)) <= len(xs) * Fraction(CFG.step)


@settings(max_examples=50, deadline=None)
@given(st.floats(-4, 4, allow_nan=False), st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_zero_padding_is_neutral(x, pads, seed):
    q = quantize_matrix(np.array([[x]]), CFG, rng(seed))
    zeros = [quantize_matrix(np.zeros((1, 1)), CFG, rng(seed + 1 + i)) for i in range(pads)]
    alone = dequantize_sum(q, 1, CFG)
    padded = dequantize_sum(sum_mod([q, *zeros]), pads + 1, CFG)
    assert padded[0, 0] == alone[0, 0]


def test_rounding_unbiased():
    x = np.full((1, 200_000), 0.123456789)
    back = dequantize_sum(quantize_matrix(x, CFG, rng(3)), 1, CFG)
    err = back - x
    se = err.std(ddof=1) / np.sqrt(err.size)
    assert abs(err.mean()) < 4 * se


def test_modular_wraparound():
    a = np.array([[2**32 - 1, 5]], dtype=np.uint32)
    b = np.array([[2, 2**32 - 5]], dtype=np.uint32)
    assert add_mod(a, b).tolist() == [[1, 0]]
    with pytest.raises(ValueError):
        add_mod(a, np.zeros((2, 2), dtype=np.uint32))
    with pytest.raises(ValueError):
        sum_mod([])


def test_qmatrix_encoding():
    q = rng(4).integers(0, 2**32, (3, 5), dtype=np.uint32)
    buf = encode_qmatrix(q)
    assert len(buf) == 8 + 4 * 15
    assert buf[:8] == (3).to_bytes(4, "little") + (5).to_bytes(4, "little")
    assert np.array_equal(decode_qmatrix(buf), q)
    with pytest.raises(ValueError):
        decode_qmatrix(buf[:-1])


def test_real_encoding_has_qmatrix_size():
    x = rng(5).normal(size=(4, 6))
    assert len(encode_real(x)) == len(encode_qmatrix(np.zeros((4, 6), dtype=np.uint32)))
    assert np.allclose(decode_real(encode_real(x)), x, atol=1e-6)
    assert np.array_equal(decode_real(encode_real(x, "<f8"), "<f8"), x)
