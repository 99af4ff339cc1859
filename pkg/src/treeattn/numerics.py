"""Scalar and array primitives: stable logsumexp, dtype rounding, seeded data.

All tensors in this package are ``numpy`` float64 arrays. Reduced precision is
emulated by rounding values after each primitive operation, so results are
reproducible on any CPU.
"""

from __future__ import annotations

import enum
import math
from typing import Sequence

import numpy as np

__all__ = [
    "DType",
    "InvalidDataError",
    "ShapeError",
    "logsumexp",
    "lse_combine",
    "round_to_dtype",
    "seeded_random_tensor",
]


class InvalidDataError(ValueError):
    """Raised when an input contains NaN."""


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent."""


# bfloat16 shares the float32 exponent range; 8 significant bits
_BF16_PRECISION = 8
_BF16_MIN_EXP = -126
_BF16_MAX = float.fromhex("0x1.fe00000000000p+127")


def _round_bf16(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    finite = np.isfinite(x) & (x != 0.0)
    if not finite.any():
        return out
    xf = x[finite]
    _, e = np.frexp(xf)  # xf = mant * 2**e, mant in [0.5, 1)
    # spacing of representable values around xf; clamped below for subnormals
    ulp_exp = np.maximum(e - _BF16_PRECISION, _BF16_MIN_EXP - (_BF16_PRECISION - 1))
    ulp = np.ldexp(1.0, ulp_exp)
    r = np.round(xf / ulp) * ulp  # np.round is half-to-even
    r = np.where(np.abs(r) > _BF16_MAX, np.copysign(np.inf, r), r)
    out[finite] = r
    return out


class DType(enum.Enum):
    """Arithmetic precision emulated on top of float64 storage."""

    FLOAT64 = "f64"
    FLOAT32 = "f32"
    BF16EMU = "bf16"

    @property
    def itemsize(self) -> int:
        return {"f64": 8, "f32": 4, "bf16": 2}[self.value]

    @classmethod
    def parse(cls, name: "str | DType") -> "DType":
        if isinstance(name, DType):
            return name
        for member in cls:
            if name.lower() in (member.value, member.name.lower()):
                return member
        raise ValueError(f"unknown dtype {name!r}")

    @property
    def accum(self) -> "DType":
        """Precision of scores, softmax statistics and running sums.

        bf16 tensors accumulate in f32, as mixed-precision attention kernels do.
        """
        return DType.FLOAT32 if self is DType.BF16EMU else self

    def round(self, x):
        """Round ``x`` (scalar or array) to this precision, returning float64."""
        return round_to_dtype(x, self)


def round_to_dtype(x, dtype: DType):
    if dtype is DType.FLOAT64:
        return x
    scalar = np.ndim(x) == 0
    arr = np.asarray(x, dtype=np.float64)
    if dtype is DType.FLOAT32:
        with np.errstate(over="ignore"):
            out = arr.astype(np.float32).astype(np.float64)
    elif dtype is DType.BF16EMU:
        out = _round_bf16(arr)
    else:  # pragma: no cover
        raise ValueError(dtype)
    return float(out) if scalar else out


def _check_nan(*values) -> None:
    for v in values:
        if np.isnan(v).any():
            raise InvalidDataError("NaN in input")


def logsumexp(xs: Sequence[float] | np.ndarray, axis=None):
    """Stable ``log(sum(exp(xs)))``.

    Returns ``-inf`` for an empty reduction, which is the identity of
    :func:`lse_combine`. With ``axis`` given, reduces along that axis.
    """
    xs = np.asarray(xs, dtype=np.float64)
    _check_nan(xs)
    if axis is None:
        if xs.size == 0:
            return -math.inf
        m = float(np.max(xs))
        if math.isinf(m):
            return m
        return m + math.log(float(np.sum(np.exp(xs - m))))
    if xs.shape[axis] == 0:
        shape = list(xs.shape)
        del shape[axis]
        return np.full(shape, -np.inf)
    m = np.max(xs, axis=axis, keepdims=True)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(xs - safe_m), axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = safe_m + np.log(s)
    out = np.where(np.isposinf(m), np.inf, out)
    return np.squeeze(out, axis=axis)


def lse_combine(a, b):
    """Logsumexp of the union of two disjoint index sets; ``-inf`` is the unit.

    Works elementwise on arrays.
    """
    _check_nan(a, b)
    if np.ndim(a) == 0 and np.ndim(b) == 0:
        a, b = float(a), float(b)
        m = max(a, b)
        if math.isinf(m):
            return m
        return m + math.log(math.exp(a - m) + math.exp(b - m))
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = np.maximum(a, b)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    out = safe_m + np.log(np.exp(a - safe_m) + np.exp(b - safe_m))
    return np.where(np.isinf(m), m, out)


def seeded_random_tensor(shape, seed: int, scale: float = 1.0) -> np.ndarray:
    """I.i.d. normal samples with standard deviation ``scale``.

    Uses numpy's PCG64 bit generator with ``standard_normal`` (ziggurat), so a
    given ``(shape, seed, scale)`` yields bitwise-identical data on every run.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal(tuple(shape)) * scale
