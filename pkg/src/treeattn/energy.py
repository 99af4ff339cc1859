"""The energy (cumulant-generating) function of attention and its gradient.

For one query row the energy is

    F(zeta) = log sum_a exp(q . k_a + zeta . v_a)

and ``dF/dzeta`` at ``zeta = 0`` is the attention output. ``zeta`` (the
source) has the shape of the queries' output, ``[b, h, Nq, dh]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import _causal_mask, _check_qkv, chunk_bounds
from .numerics import ShapeError, logsumexp, lse_combine
from .reduction import tree_reduce

__all__ = [
    "EnergyEval",
    "PartitionOverflowError",
    "exponents",
    "probabilities",
    "partition_with_source",
    "energy",
    "energy_total_causal",
    "grad_energy_wrt_source",
    "energy_forward_parallel",
    "energy_grad_parallel",
    "gamma_log_likelihood",
    "moment_via_source",
]

_LOG_MAX_FLOAT = math.log(np.finfo(np.float64).max)


class PartitionOverflowError(OverflowError):
    """Z does not fit in a float; work with :func:`energy` (log Z) instead."""


@dataclass(frozen=True)
class EnergyEval:
    """Energy per query row, with the max ``m`` and shifted logsumexp ``O``
    saved for the gradient pass (``value == O + m``)."""

    value: np.ndarray
    m: np.ndarray
    O: np.ndarray


def _prepare(q, k, v, zeta):
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    _check_qkv(q, k, v)
    if zeta is None:
        zeta = np.zeros(q.shape)
    zeta = np.asarray(zeta, dtype=np.float64)
    if zeta.shape != q.shape:
        raise ShapeError(f"source {zeta.shape} must match queries {q.shape}")
    return q, k, v, zeta


def exponents(q, k, v, zeta=None, *, causal=False) -> np.ndarray:
    """``q . k_a + zeta . v_a`` for every (row, key); masked entries are -inf."""
    q, k, v, zeta = _prepare(q, k, v, zeta)
    r = np.einsum("bhqd,bhkd->bhqk", q, k) + np.einsum("bhqd,bhkd->bhqk", zeta, v)
    if causal:
        r = np.where(_causal_mask(q.shape[2], k.shape[2]), r, -np.inf)
    return r


def _shifted(r, shift):
    if shift is None:
        return r
    return r - np.asarray(shift, dtype=np.float64)[..., None]


def probabilities(q, k, *, causal=False) -> np.ndarray:
    """Attention distribution ``P_a`` over keys for each query row."""
    v = np.zeros_like(np.asarray(k, dtype=np.float64))
    r = exponents(q, k, v, causal=causal)
    return np.exp(r - logsumexp(r, axis=-1)[..., None])


def energy(q, k, v, zeta=None, *, causal=False, shift=None) -> EnergyEval:
    """Energy per query row.

    ``shift`` (``[b, h, Nq]``) subtracts a per-row constant inside the
    exponent, which lowers the value by exactly that constant and leaves the
    gradient unchanged.
    """
    r = _shifted(exponents(q, k, v, zeta, causal=causal), shift)
    m = np.max(r, axis=-1)
    O = logsumexp(r - m[..., None], axis=-1)
    return EnergyEval(O + m, m, O)


def partition_with_source(q, k, v, zeta=None, *, causal=False) -> np.ndarray:
    """``Z(zeta) = sum_a exp(q . k_a + zeta . v_a)`` per query row."""
    f = energy(q, k, v, zeta, causal=causal).value
    if np.any(f > _LOG_MAX_FLOAT):
        raise PartitionOverflowError("partition function overflows float64; use energy() for log Z")
    return np.exp(f)


def energy_total_causal(q, k, v, zeta=None) -> float:
    """Sum over batch, heads and positions of the causally truncated energy.

    Each head is evaluated on its own slice and the per-head totals are added.
    """
    q, k, v, zeta = _prepare(q, k, v, zeta)
    if q.shape[2] != k.shape[2]:
        raise ShapeError("causal total energy needs one query and one source per position")
    total = 0.0
    for h in range(q.shape[1]):
        sl = slice(h, h + 1)
        total += float(np.sum(energy(q[:, sl], k[:, sl], v[:, sl], zeta[:, sl], causal=True).value))
    return total


def grad_energy_wrt_source(q, k, v, zeta=None, *, causal=False, shift=None) -> np.ndarray:
    """Analytic ``dF/dzeta``: the softmax of the exponents applied to the values."""
    q, k, v, zeta = _prepare(q, k, v, zeta)
    r = _shifted(exponents(q, k, v, zeta, causal=causal), shift)
    f = logsumexp(r, axis=-1)
    w = np.exp(r - f[..., None])
    return np.einsum("bhqk,bhkd->bhqd", w, v)


def energy_forward_parallel(q, k, v, zeta=None, p: int = 1) -> EnergyEval:
    """Chunked energy: local exponents per chunk, tree max, shift, tree logsumexp."""
    q, k, v, zeta = _prepare(q, k, v, zeta)
    n = k.shape[2]
    if not 1 <= p <= n:
        raise ValueError(f"need 1 <= p <= N, got p={p}, N={n}")
    r_chunks = [
        exponents(q, k[:, :, a:b], v[:, :, a:b], zeta) for a, b in chunk_bounds(n, p)
    ]
    m, _ = tree_reduce([np.max(r, axis=-1) for r in r_chunks], np.maximum)
    shifted = [r - m[..., None] for r in r_chunks]
    O, _ = tree_reduce([logsumexp(r, axis=-1) for r in shifted], lse_combine)
    return EnergyEval(O + m, m, O)


def energy_grad_parallel(q, k, v, saved: EnergyEval, p: int = 1) -> np.ndarray:
    """Attention output from the saved ``(O, m)`` with a tree sum over chunks.

    The source is never materialised; each chunk contributes
    ``exp(q . k - m - O) v``.
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    _check_qkv(q, k, v)
    rows = q.shape[:3]
    if np.shape(saved.m) != rows or np.shape(saved.O) != rows:
        raise ShapeError(f"saved energy shape {np.shape(saved.m)} does not match queries {rows}")
    n = k.shape[2]
    if not 1 <= p <= n:
        raise ValueError(f"need 1 <= p <= N, got p={p}, N={n}")
    parts = []
    for a, b in chunk_bounds(n, p):
        r = np.einsum("bhqd,bhkd->bhqk", q, k[:, :, a:b]) - saved.m[..., None]
        parts.append(np.einsum("bhqk,bhkd->bhqd", np.exp(r - saved.O[..., None]), v[:, :, a:b]))
    z, _ = tree_reduce(parts, np.add)
    return z


def gamma_log_likelihood(zeta, z, q, k, v) -> float:
    """``sum(z * zeta)`` minus the causal energy, counted once per position."""
    zeta = np.asarray(zeta, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != zeta.shape:
        raise ShapeError(f"z {z.shape} and zeta {zeta.shape} differ")
    return float(np.sum(z * zeta)) - energy_total_causal(q, k, v, zeta)


def moment_via_source(q, k, v, order: int, coords) -> np.ndarray:
    """First or second moment of the value coordinates under ``P_a``, per query row."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    coords = (coords,) if np.ndim(coords) == 0 else tuple(coords)
    if len(coords) != order:
        raise ValueError(f"order {order} needs {order} coordinate(s)")
    v = np.asarray(v, dtype=np.float64)
    P = probabilities(q, k)
    prod = v[..., coords[0]]
    if order == 2:
        prod = prod * v[..., coords[1]]
    return np.einsum("bhqk,bhk->bhq", P, prod)
