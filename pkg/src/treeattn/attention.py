"""Exact single-device attention: naive, online, and chunked partials.

Shapes follow ``[batch, heads, rows, head_dim]``: ``q`` is ``[b, h, Nq, dh]``
and ``k``, ``v`` are ``[b, h, N, dh]``. In causal mode, query row ``j`` sees
keys ``i <= j + (N - Nq)``, i.e. queries are aligned to the end of the keys.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import DType, ShapeError, _check_nan, lse_combine

__all__ = [
    "SoftmaxPartial",
    "attention_naive",
    "attention_online",
    "attention_chunk_partial",
    "chunk_sizes",
    "chunk_bounds",
    "combine_partials",
    "merge_partials",
    "pack_partial",
    "unpack_partial",
    "merge_packed",
    "partial_to_triple",
]


def _check_qkv(q, k, v) -> None:
    if q.ndim != 4 or k.ndim != 4 or v.ndim != 4:
        raise ShapeError("q, k, v must be 4-d [b, heads, rows, head_dim]")
    if k.shape != v.shape:
        raise ShapeError(f"k {k.shape} and v {v.shape} differ")
    if q.shape[:2] != k.shape[:2] or q.shape[3] != k.shape[3]:
        raise ShapeError(f"q {q.shape} incompatible with k {k.shape}")
    _check_nan(q, k, v)


def _causal_mask(n_q: int, n: int) -> np.ndarray:
    """Boolean ``[n_q, n]``: True where key ``i`` is visible to query ``j``."""
    offset = n - n_q
    return np.arange(n)[None, :] <= np.arange(n_q)[:, None] + offset


def chunk_sizes(n: int, p: int) -> list[int]:
    """Sizes of ``p`` contiguous chunks covering ``n`` items.

    The first ``n % p`` chunks get one extra item.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    base, extra = divmod(n, p)
    return [base + 1 if i < extra else base for i in range(p)]


def chunk_bounds(n: int, p: int) -> list[tuple[int, int]]:
    bounds, start = [], 0
    for size in chunk_sizes(n, p):
        bounds.append((start, start + size))
        start += size
    return bounds


def scores(q, k, scale: float = 1.0, dtype: DType = DType.FLOAT64) -> np.ndarray:
    """Scaled ``q . k`` in the accumulator precision of ``dtype``."""
    acc = dtype.accum.round
    s = acc(np.einsum("bhqd,bhkd->bhqk", q, k))
    if scale != 1.0:
        s = acc(s * scale)
    return s


def attention_naive(q, k, v, *, causal=False, scale=1.0, dtype=DType.FLOAT64):
    """Softmax-weighted average of values, materialising the full score matrix."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    _check_qkv(q, k, v)
    rnd, acc = dtype.round, dtype.accum.round
    s = scores(q, k, scale, dtype)
    if causal:
        s = np.where(_causal_mask(q.shape[2], k.shape[2]), s, -np.inf)
    m = np.max(s, axis=-1, keepdims=True)
    e = acc(np.exp(acc(s - m)))
    den = acc(np.sum(e, axis=-1, keepdims=True))
    num = acc(np.einsum("bhqk,bhkd->bhqd", e, v))
    return rnd(num / den)


def attention_online(q, k, v, *, causal=False, scale=1.0, dtype=DType.FLOAT64):
    """Single pass over keys keeping a running max, numerator and denominator."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    _check_qkv(q, k, v)
    rnd, acc = dtype.round, dtype.accum.round
    b, h, n_q, dh = q.shape
    n = k.shape[2]
    m = np.full((b, h, n_q), -np.inf)
    num = np.zeros((b, h, n_q, dh))
    den = np.zeros((b, h, n_q))
    visible = _causal_mask(n_q, n) if causal else None
    for i in range(n):
        s_i = acc(np.einsum("bhqd,bhd->bhq", q, k[:, :, i, :]))
        if scale != 1.0:
            s_i = acc(s_i * scale)
        active = np.ones(n_q, dtype=bool) if visible is None else visible[:, i]
        if not active.any():
            continue
        m_new = np.where(active, np.maximum(m, s_i), m)
        # rows that have seen no key yet keep m = -inf; exp(-inf) scales zeros
        with np.errstate(invalid="ignore"):
            alpha = np.where(active & np.isfinite(m), acc(np.exp(acc(m - m_new))), 0.0)
            w = np.where(active, acc(np.exp(acc(s_i - m_new))), 0.0)
        alpha = np.where(active, alpha, 1.0)
        num = acc(num * alpha[..., None] + acc(w[..., None] * v[:, :, i, None, :]))
        den = acc(den * alpha + w)
        m = m_new
    return rnd(num / den[..., None])


@dataclass(frozen=True)
class SoftmaxPartial:
    """Associative attention state over one chunk of keys.

    ``m`` and ``lse`` are ``[b, h, Nq]``; ``o`` is ``[b, h, Nq, dh]`` and is
    already normalised by the chunk's own denominator.
    """

    m: np.ndarray
    lse: np.ndarray
    o: np.ndarray

    @property
    def empty(self) -> bool:
        return bool(np.all(np.isneginf(self.lse)))


def attention_chunk_partial(q, k_chunk, v_chunk, scale=1.0, dtype=DType.FLOAT64) -> SoftmaxPartial:
    """Local ``(m, lse, o)`` over a key chunk; an empty chunk gives the identity."""
    q, k_chunk, v_chunk = (np.asarray(a, dtype=np.float64) for a in (q, k_chunk, v_chunk))
    _check_qkv(q, k_chunk, v_chunk)
    rnd, acc = dtype.round, dtype.accum.round
    b, h, n_q, dh = q.shape
    if k_chunk.shape[2] == 0:
        neg = np.full((b, h, n_q), -np.inf)
        return SoftmaxPartial(neg, neg.copy(), np.zeros((b, h, n_q, dh)))
    s = scores(q, k_chunk, scale, dtype)
    m = np.max(s, axis=-1)
    e = acc(np.exp(acc(s - m[..., None])))
    den = acc(np.sum(e, axis=-1))
    o = rnd(acc(np.einsum("bhqk,bhkd->bhqd", e, v_chunk)) / den[..., None])
    lse = acc(m + acc(np.log(den)))
    return SoftmaxPartial(m, lse, o)


def merge_partials(a: SoftmaxPartial, b: SoftmaxPartial, dtype=DType.FLOAT64) -> SoftmaxPartial:
    """Pairwise combine of two partials over disjoint chunks."""
    rnd, acc = dtype.round, dtype.accum.round
    lse = acc(lse_combine(a.lse, b.lse))
    safe = np.where(np.isfinite(lse), lse, 0.0)
    wa = np.where(np.isneginf(a.lse), 0.0, acc(np.exp(acc(a.lse - safe))))
    wb = np.where(np.isneginf(b.lse), 0.0, acc(np.exp(acc(b.lse - safe))))
    o = rnd(acc(a.o * wa[..., None]) + acc(b.o * wb[..., None]))
    return SoftmaxPartial(np.maximum(a.m, b.m), lse, o)


def combine_partials(parts: Sequence[SoftmaxPartial], dtype=DType.FLOAT64) -> np.ndarray:
    """Merge partials as a global max over ``lse`` then a rescaled sum.

    The max is taken over the partials' ``lse`` values, not their score maxima;
    any common shift gives the same quotient.
    """
    if not parts:
        raise ValueError("no partials to combine")
    rnd, acc = dtype.round, dtype.accum.round
    lse = np.stack([p.lse for p in parts])
    if np.any(np.all(np.isneginf(lse), axis=0)):
        raise ValueError("all partials empty: no keys attended")
    m_g = np.max(lse, axis=0)
    w = np.where(np.isneginf(lse), 0.0, acc(np.exp(acc(lse - m_g))))
    num = np.zeros_like(parts[0].o)
    den = np.zeros_like(m_g)
    for wi, p in zip(w, parts):
        num = rnd(num + rnd(p.o * wi[..., None]))
        den = acc(den + wi)
    return rnd(num / den[..., None])


def partial_to_triple(part: SoftmaxPartial, m_g=None, dtype=DType.FLOAT64):
    """Convert ``(o, lse)`` to unnormalised ``(n, d, m)`` relative to shift ``m_g``."""
    rnd, acc = dtype.round, dtype.accum.round
    if m_g is None:
        m_g = part.lse
    safe = np.where(np.isfinite(m_g), m_g, 0.0)
    d = np.where(np.isneginf(part.lse), 0.0, acc(np.exp(acc(part.lse - safe))))
    n = rnd(part.o * d[..., None])
    return n, d, m_g


# Row-packed form: one row per (b, h, q) with columns [m, lse, o_0 .. o_{dh-1}].
# Row-wise merges let the reduction engine split partials into segments.

def pack_partial(part: SoftmaxPartial) -> np.ndarray:
    dh = part.o.shape[-1]
    return np.concatenate(
        [part.m.reshape(-1, 1), part.lse.reshape(-1, 1), part.o.reshape(-1, dh)], axis=1
    )


def unpack_partial(packed: np.ndarray, shape) -> SoftmaxPartial:
    b, h, n_q, dh = shape
    return SoftmaxPartial(
        packed[:, 0].reshape(b, h, n_q),
        packed[:, 1].reshape(b, h, n_q),
        packed[:, 2:].reshape(b, h, n_q, dh),
    )


def merge_packed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    pa = SoftmaxPartial(a[:, 0], a[:, 1], a[:, 2:])
    pb = SoftmaxPartial(b[:, 0], b[:, 1], b[:, 2:])
    return pack_partial(merge_partials(pa, pb))
