"""Distributed single-query decoding over a sequence-sharded KV cache.

:func:`tree_decode` computes a local ``(o, lse)`` per shard and merges them
with a max-allreduce followed by one fused sum-allreduce of numerator and
denominator. :func:`ring_decode` is the ring attention baseline: k/v chunks
rotate around the ring for ``p - 1`` rounds and every worker folds each
incoming chunk into a running partial.

Both run on a simulated cluster; the returned :class:`DecodeResult` carries
the numeric output and the :class:`~treeattn.cluster.CostAccount`.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import (
    SoftmaxPartial,
    _check_qkv,
    attention_chunk_partial,
    chunk_bounds,
    merge_partials,
    partial_to_triple,
)
from .cluster import CostAccount, MemoryTracker, Topology, p2p_cost, simulate_schedule
from .numerics import DType, ShapeError
from .reduction import (
    ReductionSchedule,
    Strategy,
    Transfer,
    build_allreduce_schedule,
    execute_schedule,
)

__all__ = [
    "KVChunk",
    "ShardedKVCache",
    "CollectiveRun",
    "DecodeResult",
    "ComputeModel",
    "shard_kv",
    "tree_decode",
    "ring_decode",
    "tree_decode_cost",
    "ring_decode_cost",
    "ring_rotation_schedule",
    "overlap_feasibility",
]


@dataclass(frozen=True)
class KVChunk:
    k: np.ndarray
    v: np.ndarray
    owner: int
    start: int

    @property
    def length(self) -> int:
        return self.k.shape[2]


@dataclass(frozen=True)
class ShardedKVCache:
    chunks: tuple[KVChunk, ...]

    @property
    def p(self) -> int:
        return len(self.chunks)

    @property
    def sizes(self) -> list[int]:
        return [c.length for c in self.chunks]

    @property
    def n(self) -> int:
        return sum(self.sizes)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        """``(b, heads, N, head_dim)`` of the unsharded cache."""
        b, h, _, dh = self.chunks[0].k.shape
        return b, h, self.n, dh

    def reassemble(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.concatenate([c.k for c in self.chunks], axis=2),
            np.concatenate([c.v for c in self.chunks], axis=2),
        )


def shard_kv(k, v, p: int) -> ShardedKVCache:
    """Contiguous sequence shards; worker ``i`` owns chunk ``i``."""
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if k.shape != v.shape or k.ndim != 4:
        raise ShapeError("k and v must share a 4-d shape")
    n = k.shape[2]
    if p < 1 or p > n:
        raise ValueError(f"cannot shard {n} positions over {p} workers")
    return ShardedKVCache(
        tuple(KVChunk(k[:, :, a:b], v[:, :, a:b], i, a) for i, (a, b) in enumerate(chunk_bounds(n, p)))
    )


@dataclass(frozen=True)
class CollectiveRun:
    name: str
    strategy: Strategy
    payload_elems: int
    reduce_rounds: int
    total_rounds: int


@dataclass
class DecodeResult:
    output: np.ndarray
    cost: CostAccount
    collectives: list[CollectiveRun] = field(default_factory=list)
    overlap_feasible: bool | None = None
    overlap_ratio: float | None = None


@dataclass(frozen=True)
class ComputeModel:
    """Per-chunk decode attention time as ``4 b t d`` flops at a fixed rate.

    The default rate puts an 80k-token chunk at hidden size 2048 at about
    1e-5 s, the single-GPU decode time quoted for H100.
    """

    flops_per_s: float = 6.5e13

    def chunk_time(self, b: int, t: int, d: int) -> float:
        return 4.0 * b * t * d / self.flops_per_s


def _check_decode(q, cache: ShardedKVCache, topology: Topology):
    q = np.asarray(q, dtype=np.float64)
    if cache.p == 0:
        raise ValueError("empty KV cache")
    if cache.p != topology.p:
        raise ValueError(f"cache has {cache.p} shards but topology has {topology.p} workers")
    if q.ndim != 4 or q.shape[2] != 1:
        raise ShapeError("decoding takes a single query row: q must be [b, heads, 1, head_dim]")
    _check_qkv(q, cache.chunks[0].k, cache.chunks[0].v)
    return q


def _tree_worker_peak(b: int, n_h: int, d_h: int, t: int) -> int:
    mem = MemoryTracker()
    d = n_h * d_h
    mem.alloc("q", b * d)
    mem.alloc("k", b * n_h * t * d_h)
    mem.alloc("v", b * n_h * t * d_h)
    mem.alloc("o", b * d)
    mem.alloc("lse", b * n_h)
    mem.alloc("m", b * n_h)  # max-allreduce result
    # n and d overwrite o and lse; the sum-allreduce and the final divide run in place
    mem.rename("o", "n")
    mem.rename("lse", "d")
    return mem.peak


def _ring_worker_peak(b: int, n_h: int, d_h: int, sizes: Sequence[int], worker: int) -> int:
    # running (m, lse) row statistics are not counted, only tensor buffers
    p = len(sizes)
    mem = MemoryTracker()
    row = b * n_h * d_h
    mem.alloc("q", b * n_h * d_h)
    mem.alloc("k", row * sizes[worker])
    mem.alloc("v", row * sizes[worker])
    mem.alloc("o", b * n_h * d_h)
    for r in range(p - 1):
        incoming = sizes[(worker - r - 1) % p]
        mem.alloc("k_in", row * incoming)
        mem.alloc("v_in", row * incoming)
        mem.free("k")
        mem.free("v")
        mem.rename("k_in", "k")
        mem.rename("v_in", "v")
    return mem.peak


def tree_decode_cost(b, n_h, d_h, sizes: Sequence[int], topology: Topology, allreduce_strategy="hier"):
    """Communication and memory accounting of :func:`tree_decode` from shapes alone."""
    strategy = Strategy.parse(allreduce_strategy)
    p = len(sizes)
    if p != topology.p:
        raise ValueError(f"{p} shards but topology has {topology.p} workers")
    acc = CostAccount(workers=p)
    runs = []
    for name, payload in (("max", b * n_h), ("sum", b * n_h * d_h + b * n_h)):
        sched = build_allreduce_schedule(strategy, topology.nodes, topology.gpus_per_node)
        simulate_schedule(sched, payload, topology, acc)
        runs.append(
            CollectiveRun(name, strategy, payload, sched.count("reduce", "intra-reduce", "inter-reduce"), sched.n_rounds)
        )
    acc.peak_elems_per_worker = max(_tree_worker_peak(b, n_h, d_h, t) for t in sizes)
    return acc, runs


def ring_rotation_schedule(p: int) -> ReductionSchedule:
    """``p - 1`` rounds; in round ``r`` worker ``i`` forwards chunk ``(i - r) mod p`` to ``i + 1``."""
    sched = ReductionSchedule(None, p, num_segments=p)
    for r in range(p - 1):
        sched.add_round([Transfer(i, (i + 1) % p, (i - r) % p, False) for i in range(p)], "rotate")
    return sched


def ring_decode_cost(b, n_h, d_h, sizes: Sequence[int], topology: Topology) -> CostAccount:
    """Accounting of :func:`ring_decode` from shapes alone."""
    p = len(sizes)
    if p != topology.p:
        raise ValueError(f"{p} shards but topology has {topology.p} workers")
    acc = CostAccount(workers=p)
    payload = [2 * b * n_h * t * d_h for t in sizes]
    simulate_schedule(ring_rotation_schedule(p), payload, topology, acc)
    acc.peak_elems_per_worker = max(_ring_worker_peak(b, n_h, d_h, sizes, i) for i in range(p))
    return acc


def tree_decode(
    q,
    cache: ShardedKVCache,
    topology: Topology,
    allreduce_strategy: Strategy | str = Strategy.HIERARCHICAL,
    *,
    dtype: DType = DType.FLOAT64,
    scale: float = 1.0,
    max_workers: int | None = None,
) -> DecodeResult:
    q = _check_decode(q, cache, topology)
    rnd = dtype.round
    b, n_h, _, d_h = cache.shape
    strategy = Strategy.parse(allreduce_strategy)

    acc = dtype.accum.round
    local = [attention_chunk_partial(q, c.k, c.v, scale, dtype) for c in cache.chunks]
    row_shape = local[0].lse.shape

    m_all, _ = _allreduce([p.lse.ravel() for p in local], np.maximum, strategy, topology, max_workers)

    # fused payload, one row per (batch, head): [n_0 .. n_{dh-1}, d]
    payloads = []
    for part, m in zip(local, m_all):
        n, d, _ = partial_to_triple(part, m.reshape(row_shape), dtype)
        payloads.append(np.concatenate([n.reshape(-1, d_h), d.reshape(-1, 1)], axis=1))

    def add(x, y):
        return np.concatenate([rnd(x[:, :-1] + y[:, :-1]), acc(x[:, -1:] + y[:, -1:])], axis=1)

    summed, _ = _allreduce(payloads, add, strategy, topology, max_workers)

    # every worker ends with the same n_g, d_g; report worker 0's result
    n_g = summed[0][:, :-1].reshape(*row_shape, d_h)
    d_g = summed[0][:, -1].reshape(row_shape)
    out = rnd(n_g / d_g[..., None])

    cost, runs = tree_decode_cost(b, n_h, d_h, cache.sizes, topology, strategy)
    return DecodeResult(out, cost, runs)


def _allreduce(items, combiner, strategy, topology, max_workers):
    sched = build_allreduce_schedule(strategy, topology.nodes, topology.gpus_per_node)
    return execute_schedule(sched, items, combiner, max_workers), sched


def ring_decode(
    q,
    cache: ShardedKVCache,
    topology: Topology,
    *,
    dtype: DType = DType.FLOAT64,
    scale: float = 1.0,
    max_workers: int | None = None,
    compute_model: ComputeModel | None = None,
) -> DecodeResult:
    q = _check_decode(q, cache, topology)
    p = cache.p

    # block outputs are in dtype; the running partial is held at accumulator precision
    def run_worker(i: int) -> SoftmaxPartial:
        c = cache.chunks[i]
        running = attention_chunk_partial(q, c.k, c.v, scale, dtype)
        for r in range(p - 1):
            c = cache.chunks[(i - r - 1) % p]
            running = merge_partials(running, attention_chunk_partial(q, c.k, c.v, scale, dtype), dtype.accum)
        return running

    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            finals = list(pool.map(run_worker, range(p)))
    else:
        finals = [run_worker(i) for i in range(p)]

    b, n_h, _, d_h = cache.shape
    cost = ring_decode_cost(b, n_h, d_h, cache.sizes, topology)
    flag, ratio = overlap_feasibility(topology, b, max(cache.sizes), n_h * d_h, compute_model or ComputeModel())
    return DecodeResult(dtype.round(finals[0].o), cost, [], flag, ratio)


def overlap_feasibility(topology: Topology, b: int, t: int, d: int, compute_model: ComputeModel | None = None):
    """Can one chunk's attention compute hide the transfer of the next k/v chunk?

    Returns ``(feasible, compute_time / transfer_time)``. The transfer uses the
    slowest link a ring over ``topology`` crosses. With nothing to transfer
    there is nothing to hide and the answer is trivially yes.
    """
    compute_model = compute_model or ComputeModel()
    elems = 2 * b * t * d
    if elems == 0:
        return True, float("inf")
    link = topology.inter if topology.nodes > 1 else topology.intra
    transfer = p2p_cost(elems, link, topology.element_bytes)
    ratio = compute_model.chunk_time(b, t, d) / transfer
    return ratio >= 1.0, ratio
