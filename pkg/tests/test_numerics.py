import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import bf16_nearest_even, brute_logsumexp
from treeattn.numerics import (
    DType,
    InvalidDataError,
    logsumexp,
    lse_combine,
    round_to_dtype,
    seeded_random_tensor,
)

finite = st.floats(min_value=-50, max_value=50, allow_nan=False)


def test_logsumexp_examples():
    assert logsumexp([0.0, 0.0]) == pytest.approx(0.6931472, abs=1e-7)
    assert logsumexp([-3.5]) == -3.5
    assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000 + math.log(2), abs=1e-12)
    assert logsumexp([]) == -math.inf


def test_logsumexp_rejects_nan():
    with pytest.raises(InvalidDataError):
        logsumexp([1.0, float("nan")])
    with pytest.raises(InvalidDataError):
        lse_combine(float("nan"), 0.0)


def test_logsumexp_axis_matches_rows():
    x = np.random.default_rng(1).normal(size=(3, 5)) * 10
    got = logsumexp(x, axis=1)
    for row, val in zip(x, got):
        assert val == pytest.approx(brute_logsumexp(row), abs=1e-12)


def test_lse_combine_examples():
    assert lse_combine(0.0, 0.0) == pytest.approx(math.log(2), abs=1e-15)
    assert lse_combine(2.25, -math.inf) == 2.25
    assert lse_combine(-math.inf, -math.inf) == -math.inf


@given(finite, finite, finite)
def test_lse_combine_associative_commutative(x, y, z):
    assert abs(lse_combine(lse_combine(x, y), z) - lse_combine(x, lse_combine(y, z))) <= 1e-12
    assert abs(lse_combine(x, y) - lse_combine(y, x)) <= 1e-12
    assert lse_combine(x, lse_combine(y, z)) == pytest.approx(brute_logsumexp([x, y, z]), abs=1e-12)


@given(st.lists(finite, min_size=1, max_size=30))
def test_logsumexp_bounds(xs):
    val = logsumexp(xs)
    assert max(xs) <= val <= max(xs) + math.log(len(xs)) + 1e-12


def test_round_examples():
    assert round_to_dtype(1.0, DType.BF16EMU) == 1.0
    assert round_to_dtype(1 + 2**-9, DType.BF16EMU) == bf16_nearest_even(1 + 2**-9) == 1.0
    x = 0.1234567890123
    assert round_to_dtype(x, DType.FLOAT64) == x
    assert round_to_dtype(x, DType.FLOAT32) == float(np.float32(x))


def test_bf16_ties_go_to_even():
    # halfway between 1 and 1 + 2**-7 rounds down; halfway above 1 + 2**-7 rounds up
    assert round_to_dtype(1 + 2**-8, DType.BF16EMU) == 1.0
    assert round_to_dtype(1 + 3 * 2**-8, DType.BF16EMU) == 1 + 2**-6


def test_bf16_overflow_and_specials():
    assert round_to_dtype(3.5e38, DType.BF16EMU) == math.inf
    assert round_to_dtype(-math.inf, DType.BF16EMU) == -math.inf
    assert round_to_dtype(0.0, DType.BF16EMU) == 0.0


bf16_range = st.floats(min_value=-3.0e38, max_value=3.0e38, allow_nan=False, allow_infinity=False)


@given(bf16_range)
def test_bf16_matches_enumeration(x):
    assert round_to_dtype(x, DType.BF16EMU) == bf16_nearest_even(x)


@given(st.floats(min_value=-1e-36, max_value=1e-36))
def test_bf16_subnormals_match_enumeration(x):
    assert round_to_dtype(x, DType.BF16EMU) == bf16_nearest_even(x)


@pytest.mark.parametrize("dtype", list(DType))
@given(bf16_range)
def test_rounding_idempotent(dtype, x):
    r = round_to_dtype(x, dtype)
    assert round_to_dtype(r, dtype) == r


@pytest.mark.parametrize("dtype", list(DType))
@given(bf16_range, bf16_range)
def test_rounding_monotone(dtype, x, y):
    x, y = min(x, y), max(x, y)
    assert round_to_dtype(x, dtype) <= round_to_dtype(y, dtype)


def test_array_rounding_matches_scalar():
    x = np.random.default_rng(3).normal(size=50) * 1e3
    arr = round_to_dtype(x, DType.BF16EMU)
    assert [round_to_dtype(float(v), DType.BF16EMU) for v in x] == list(arr)


def test_dtype_parse():
    assert DType.parse("bf16") is DType.BF16EMU
    assert DType.parse("float32") is DType.FLOAT32
    with pytest.raises(ValueError):
        DType.parse("f16")


def test_seeded_tensor_determinism():
    a = seeded_random_tensor((3, 4), seed=5, scale=2.0)
    b = seeded_random_tensor((3, 4), seed=5, scale=2.0)
    c = seeded_random_tensor((3, 4), seed=6, scale=2.0)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert seeded_random_tensor((0, 3), seed=1).size == 0
    with pytest.raises(ValueError):
        seeded_random_tensor((2,), seed=1, scale=0.0)


def test_seeded_tensor_moments():
    scale = 3.0
    x = seeded_random_tensor((10**6,), seed=11, scale=scale)
    assert abs(x.mean()) <= 5 * scale * 1e-3
    assert x.std() == pytest.approx(scale, rel=5e-3)


def test_seeded_tensor_shipped_vectors():
    data = json.loads((Path(__file__).parent / "data" / "random_vectors.json").read_text())
    for vec in data["vectors"]:
        got = seeded_random_tensor(vec["shape"], vec["seed"], vec["scale"]).ravel()
        assert [float(x).hex() for x in got] == vec["values_hex"]
