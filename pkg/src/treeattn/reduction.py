"""Associative reductions over ``p`` participants as explicit round schedules.

A schedule is plain data: a list of synchronous rounds, each a list of
:class:`Transfer` records. Executing a schedule and costing it (see
:mod:`treeattn.cluster`) are separate, so the numeric path and the cost model
always see the same communication pattern.

Operand order is fixed: when two values meet, the one coming from the lower
participant index is the left operand of the combiner. Together with the
synchronous rounds this makes results bitwise reproducible, including in the
threaded executor.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "Strategy",
    "Transfer",
    "ReductionSchedule",
    "tree_schedule",
    "ring_schedule",
    "hierarchical_schedule",
    "build_allreduce_schedule",
    "execute_schedule",
    "tree_reduce",
    "ring_allreduce",
    "hierarchical_allreduce",
    "allreduce",
    "complexity_model",
    "ceil_log2",
]

Combiner = Callable[[Any, Any], Any]


class Strategy(enum.Enum):
    TREE_BINARY = "tree"
    RING = "ring"
    HIERARCHICAL = "hier"

    @classmethod
    def parse(cls, name: "str | Strategy") -> "Strategy":
        if isinstance(name, Strategy):
            return name
        for member in cls:
            if name.lower() in (member.value, member.name.lower()):
                return member
        raise ValueError(f"unknown allreduce strategy {name!r}")


@dataclass(frozen=True)
class Transfer:
    """Send segment ``segment`` from ``src`` to ``dst``.

    With ``combine`` the receiver folds the value into its own copy of the
    segment, otherwise it overwrites it.
    """

    src: int
    dst: int
    segment: int = 0
    combine: bool = True


@dataclass
class ReductionSchedule:
    strategy: Strategy | None
    participants: int
    num_segments: int = 1
    rounds: list[list[Transfer]] = field(default_factory=list)
    phases: list[str] = field(default_factory=list)

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)

    def count(self, *phases: str) -> int:
        """Number of rounds whose phase label is one of ``phases``."""
        return sum(1 for ph in self.phases if ph in phases)

    def add_round(self, transfers: list[Transfer], phase: str) -> None:
        if transfers:
            self.rounds.append(transfers)
            self.phases.append(phase)

    def extend(self, other: "ReductionSchedule") -> None:
        self.rounds.extend(other.rounds)
        self.phases.extend(other.phases)


def ceil_log2(p: int) -> int:
    return 0 if p <= 1 else (p - 1).bit_length()


def _tree_rounds(ranks: Sequence[int], segment: int = 0) -> tuple[list[list[Transfer]], list[list[Transfer]]]:
    """Binary tree over ``ranks``: reduce into ranks[0], then mirrored broadcast.

    Neighbours pair up and the count halves each round; an unpaired rank
    carries its value forward untouched.
    """
    n = len(ranks)
    reduce_rounds, strides = [], []
    stride = 1
    while stride < n:
        reduce_rounds.append(
            [Transfer(ranks[i + stride], ranks[i], segment, True) for i in range(0, n, 2 * stride) if i + stride < n]
        )
        strides.append(stride)
        stride *= 2
    bcast_rounds = [
        [Transfer(ranks[i], ranks[i + s], segment, False) for i in range(0, n, 2 * s) if i + s < n]
        for s in reversed(strides)
    ]
    return reduce_rounds, bcast_rounds


def tree_schedule(p: int, allreduce: bool = True) -> ReductionSchedule:
    sched = ReductionSchedule(Strategy.TREE_BINARY, p)
    red, bcast = _tree_rounds(list(range(p)))
    for r in red:
        sched.add_round(r, "reduce")
    if allreduce:
        for r in bcast:
            sched.add_round(r, "bcast")
    return sched


def _ring_rounds(ranks: Sequence[int], seg_offset: int = 0):
    """Reduce-scatter then allgather around ``ranks`` with ``len(ranks)`` segments.

    After reduce-scatter, position ``j`` owns the fully reduced segment ``j + 1``.
    """
    g = len(ranks)
    rs, ag = [], []
    for r in range(g - 1):
        rs.append([Transfer(ranks[j], ranks[(j + 1) % g], seg_offset + (j - r) % g, True) for j in range(g)])
    for r in range(g - 1):
        ag.append([Transfer(ranks[j], ranks[(j + 1) % g], seg_offset + (j + 1 - r) % g, False) for j in range(g)])
    return rs, ag


def ring_schedule(p: int) -> ReductionSchedule:
    sched = ReductionSchedule(Strategy.RING, p, num_segments=max(p, 1))
    rs, ag = _ring_rounds(list(range(p)))
    for r in rs:
        sched.add_round(r, "reduce")
    for r in ag:
        sched.add_round(r, "bcast")
    return sched


def hierarchical_schedule(nodes: int, gpus_per_node: int) -> ReductionSchedule:
    """Ring reduce-scatter inside each node, per-rail binary trees across nodes,
    then the mirrored broadcast and intra-node allgather.

    Ranks are placed contiguously: node ``j`` holds ranks ``j*g .. j*g+g-1``.
    The ``g`` segments travel on ``g`` parallel rails between nodes.
    """
    g = gpus_per_node
    p = nodes * g
    sched = ReductionSchedule(Strategy.HIERARCHICAL, p, num_segments=g)
    per_node = [_ring_rounds(list(range(j * g, (j + 1) * g))) for j in range(nodes)]
    for r in range(g - 1):
        sched.add_round([t for rs, _ in per_node for t in rs[r]], "intra-reduce")
    n_inter = ceil_log2(nodes)
    rails = [_tree_rounds([j * g + pos for j in range(nodes)], segment=(pos + 1) % g) for pos in range(g)]
    for r in range(n_inter):
        sched.add_round([t for red, _ in rails for t in red[r]], "inter-reduce")
    for r in range(n_inter):
        sched.add_round([t for _, bc in rails for t in bc[r]], "inter-bcast")
    for r in range(g - 1):
        sched.add_round([t for _, ag in per_node for t in ag[r]], "intra-bcast")
    return sched


def build_allreduce_schedule(strategy: Strategy | str, nodes: int, gpus_per_node: int) -> ReductionSchedule:
    strategy = Strategy.parse(strategy)
    p = nodes * gpus_per_node
    if strategy is Strategy.TREE_BINARY:
        return tree_schedule(p)
    if strategy is Strategy.RING:
        return ring_schedule(p)
    return hierarchical_schedule(nodes, gpus_per_node)


def _split(value, nseg: int):
    arr = np.atleast_1d(np.asarray(value))
    return list(np.array_split(arr, nseg, axis=0))


def _join(segments, like):
    out = np.concatenate(segments, axis=0)
    return out.reshape(np.shape(like)) if np.ndim(like) == 0 else out


def execute_schedule(
    schedule: ReductionSchedule,
    items: Sequence[Any],
    combiner: Combiner,
    max_workers: int | None = None,
) -> list[Any]:
    """Run ``schedule`` on per-participant ``items``; return every participant's final value.

    Multi-segment schedules split array items along axis 0 (scalars are
    promoted to length-1 arrays), so ``combiner`` must act row-wise.
    """
    p = schedule.participants
    if len(items) != p:
        raise ValueError(f"schedule has {p} participants, got {len(items)} items")
    nseg = schedule.num_segments
    if nseg == 1:
        state = [[item] for item in items]
    else:
        state = [_split(item, nseg) for item in items]

    def apply(t: Transfer, incoming):
        if not t.combine:
            return incoming
        local = state[t.dst][t.segment]
        return combiner(incoming, local) if t.src < t.dst else combiner(local, incoming)

    pool = ThreadPoolExecutor(max_workers) if max_workers and max_workers > 1 else None
    try:
        for transfers in schedule.rounds:
            for t in transfers:
                if not (0 <= t.src < p and 0 <= t.dst < p):
                    raise IndexError(f"transfer {t} outside 0..{p - 1}")
            incoming = [state[t.src][t.segment] for t in transfers]
            if pool is None:
                results = [apply(t, x) for t, x in zip(transfers, incoming)]
            else:
                results = list(pool.map(apply, transfers, incoming))
            for t, res in zip(transfers, results):
                state[t.dst][t.segment] = res
    finally:
        if pool is not None:
            pool.shutdown()

    if nseg == 1:
        return [s[0] for s in state]
    return [_join(s, item) for s, item in zip(state, items)]


def tree_reduce(items: Sequence[Any], combiner: Combiner, identity: Any = None) -> tuple[Any, int]:
    """Fold ``items`` pairwise as a binary tree; returns ``(value, rounds)``."""
    if not items:
        return identity, 0
    sched = tree_schedule(len(items), allreduce=False)
    return execute_schedule(sched, list(items), combiner)[0], sched.n_rounds


def ring_allreduce(items: Sequence[Any], combiner: Combiner, identity: Any = None) -> tuple[Any, int]:
    """Reduce-scatter plus allgather ring; ``2(p - 1)`` rounds."""
    if not items:
        return identity, 0
    sched = ring_schedule(len(items))
    return execute_schedule(sched, list(items), combiner)[0], sched.n_rounds


def hierarchical_allreduce(items: Sequence[Any], combiner: Combiner, identity: Any = None, topology=None):
    """Two-tier allreduce; returns ``(value, intra_rounds, inter_rounds)`` of the reduce phase.

    ``topology`` is anything with ``nodes`` and ``gpus_per_node`` attributes,
    or a ``(nodes, gpus_per_node)`` pair.
    """
    if topology is None:
        raise ValueError("hierarchical_allreduce needs a topology")
    nodes, g = (topology.nodes, topology.gpus_per_node) if hasattr(topology, "nodes") else topology
    if nodes * g != len(items):
        raise ValueError(f"{len(items)} items do not match {nodes} x {g} topology")
    if not items:
        return identity, 0, 0
    sched = hierarchical_schedule(nodes, g)
    value = execute_schedule(sched, list(items), combiner)[0]
    return value, sched.count("intra-reduce"), sched.count("inter-reduce")


def allreduce(items, combiner, strategy, nodes: int, gpus_per_node: int, max_workers=None):
    """Allreduce with any strategy; returns ``(per-participant values, schedule)``."""
    sched = build_allreduce_schedule(strategy, nodes, gpus_per_node)
    return execute_schedule(sched, list(items), combiner, max_workers), sched


def complexity_model(n: int, p: int) -> tuple[int, int]:
    """Local work ``ceil(N/p)`` and communication rounds ``ceil(log2 p)``."""
    if not 1 <= p <= n:
        raise ValueError("need 1 <= p <= N")
    return -(-n // p), ceil_log2(p)
