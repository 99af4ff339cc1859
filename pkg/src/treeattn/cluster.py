"""Two-tier GPU cluster cost model.

Transfers are costed with the latency/bandwidth model
``latency + bytes / bandwidth``. Rounds are synchronous: a round lasts as long
as its slowest transfer. Ranks are placed contiguously on nodes, so rank ``r``
lives on node ``r // gpus_per_node``.

Default link parameters describe a DGX H100 cluster: NVLink 4.0 at 900 GB/s
inside a node and one 400 Gb/s InfiniBand NDR port per GPU between nodes.
The two latencies are not measured values; they are round numbers that keep
inter-node messages noticeably slower than intra-node ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from .attention import chunk_sizes
from .reduction import ReductionSchedule

__all__ = [
    "LinkParams",
    "Topology",
    "CostAccount",
    "MemoryTracker",
    "p2p_cost",
    "simulate_schedule",
    "peak_memory_formula",
    "comm_volume_formula",
    "ring_total_volume",
    "load_topology",
    "CONFIG_KEYS",
]

INTRA_BW_BPS = 900e9
INTER_BW_BPS = 400e9 / 8  # 400 Gb/s per GPU
INTRA_LAT_S = 5e-6
INTER_LAT_S = 25e-6


@dataclass(frozen=True)
class LinkParams:
    latency_s: float
    bandwidth_Bps: float

    def __post_init__(self):
        if self.latency_s < 0:
            raise ValueError("latency must be non-negative")
        if not self.bandwidth_Bps > 0:
            raise ValueError("bandwidth must be positive")


@dataclass(frozen=True)
class Topology:
    nodes: int = 1
    gpus_per_node: int = 8
    intra: LinkParams = LinkParams(INTRA_LAT_S, INTRA_BW_BPS)
    inter: LinkParams = LinkParams(INTER_LAT_S, INTER_BW_BPS)
    element_bytes: int = 2

    def __post_init__(self):
        if self.nodes < 1 or self.gpus_per_node < 1:
            raise ValueError("topology needs at least one node and one GPU per node")

    @property
    def p(self) -> int:
        return self.nodes * self.gpus_per_node

    def node_of(self, rank: int) -> int:
        return rank // self.gpus_per_node

    def link(self, src: int, dst: int) -> LinkParams:
        return self.intra if self.node_of(src) == self.node_of(dst) else self.inter

    def with_shape(self, nodes: int, gpus_per_node: int) -> "Topology":
        return replace(self, nodes=nodes, gpus_per_node=gpus_per_node)

    @classmethod
    def for_workers(cls, p: int, gpus_per_node: int = 8, **kw) -> "Topology":
        """Smallest contiguous layout for ``p`` workers: one partial node if ``p`` is small."""
        if p % gpus_per_node == 0:
            return cls(nodes=p // gpus_per_node, gpus_per_node=gpus_per_node, **kw)
        if p < gpus_per_node:
            return cls(nodes=1, gpus_per_node=p, **kw)
        raise ValueError(f"{p} workers do not fill nodes of {gpus_per_node}")

    def to_config(self) -> dict:
        return {
            "nodes": self.nodes,
            "gpus_per_node": self.gpus_per_node,
            "intra_bw_Bps": self.intra.bandwidth_Bps,
            "inter_bw_Bps": self.inter.bandwidth_Bps,
            "intra_lat_s": self.intra.latency_s,
            "inter_lat_s": self.inter.latency_s,
            "element_bytes": self.element_bytes,
        }


CONFIG_KEYS = (
    "nodes",
    "gpus_per_node",
    "intra_bw_Bps",
    "inter_bw_Bps",
    "intra_lat_s",
    "inter_lat_s",
    "element_bytes",
)


def load_topology(path: str | Path) -> Topology:
    """Read a ``key = value`` topology file. ``#`` starts a comment.

    Missing keys keep their defaults.
    """
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = val
    base = Topology()
    return Topology(
        nodes=int(values.get("nodes", base.nodes)),
        gpus_per_node=int(values.get("gpus_per_node", base.gpus_per_node)),
        intra=LinkParams(
            float(values.get("intra_lat_s", base.intra.latency_s)),
            float(values.get("intra_bw_Bps", base.intra.bandwidth_Bps)),
        ),
        inter=LinkParams(
            float(values.get("inter_lat_s", base.inter.latency_s)),
            float(values.get("inter_bw_Bps", base.inter.bandwidth_Bps)),
        ),
        element_bytes=int(values.get("element_bytes", base.element_bytes)),
    )


@dataclass
class CostAccount:
    """Counters for one simulated run.

    ``elems_sent_*`` are totals over all workers; :attr:`elems_per_worker` is
    the mean per worker, the quantity the usual collective volume formulas
    describe.
    """

    workers: int = 1
    elems_sent_intra: int = 0
    elems_sent_inter: int = 0
    rounds: int = 0
    sim_time_s: float = 0.0
    peak_elems_per_worker: int = 0
    per_round_elems: list[int] = field(default_factory=list)

    @property
    def elems_total(self) -> int:
        return self.elems_sent_intra + self.elems_sent_inter

    @property
    def elems_per_worker(self) -> Fraction:
        return Fraction(self.elems_total, self.workers)


def p2p_cost(elems: int, link: LinkParams, element_bytes: int = 2) -> float:
    if elems < 0:
        raise ValueError("negative element count")
    return link.latency_s + (elems * element_bytes) / link.bandwidth_Bps


def simulate_schedule(
    schedule: ReductionSchedule,
    payload_elems_per_step: int | Sequence[int],
    topology: Topology,
    account: CostAccount | None = None,
) -> CostAccount:
    """Cost ``schedule`` on ``topology``.

    ``payload_elems_per_step`` is either the whole payload, split into the
    schedule's segments with the same rule as ``numpy.array_split``, or an
    explicit element count per segment.
    """
    if schedule.participants > topology.p:
        raise ValueError(f"schedule needs {schedule.participants} workers, topology has {topology.p}")
    if isinstance(payload_elems_per_step, int):
        seg = chunk_sizes(payload_elems_per_step, schedule.num_segments)
    else:
        seg = list(payload_elems_per_step)
    acc = account if account is not None else CostAccount(workers=topology.p)
    for transfers in schedule.rounds:
        duration, sent = 0.0, 0
        for t in transfers:
            if not (0 <= t.src < topology.p and 0 <= t.dst < topology.p):
                raise IndexError(f"transfer {t} outside topology of {topology.p}")
            elems = seg[t.segment]
            link = topology.link(t.src, t.dst)
            duration = max(duration, p2p_cost(elems, link, topology.element_bytes))
            if topology.node_of(t.src) == topology.node_of(t.dst):
                acc.elems_sent_intra += elems
            else:
                acc.elems_sent_inter += elems
            sent += elems
        acc.rounds += 1
        acc.sim_time_s += duration
        acc.per_round_elems.append(sent)
    return acc


class MemoryTracker:
    """High-water mark of live named buffers on one worker, in elements."""

    def __init__(self):
        self.live: dict[str, int] = {}
        self.peak = 0

    def alloc(self, name: str, elems: int) -> None:
        if name in self.live:
            raise ValueError(f"buffer {name!r} already live")
        self.live[name] = elems
        self.peak = max(self.peak, sum(self.live.values()))

    def free(self, name: str) -> None:
        del self.live[name]

    def rename(self, old: str, new: str) -> None:
        """Reuse a buffer in place under a new name."""
        self.live[new] = self.live.pop(old)


def _num(x):
    return x if isinstance(x, Fraction) else Fraction(x)


def peak_memory_formula(algo: str, b, t, d, n_h):
    """Closed-form peak elements per worker; ``d`` is the full hidden size."""
    b, t, d, n_h = map(_num, (b, t, d, n_h))
    algo = algo.lower()
    if algo == "ring":
        out = 4 * b * t * d + 2 * b * d
    elif algo == "tree":
        out = 2 * b * t * d + 2 * b * d + 2 * b * n_h
    else:
        raise ValueError(f"unknown algorithm {algo!r}")
    return int(out) if out.denominator == 1 else out


def comm_volume_formula(algo: str, b, t, d, n_h, p):
    """Elements communicated per decode step.

    ring: one rotation of every worker's k/v chunk, summed over workers.
    tree: ``2 (p - 1) / p`` times the fused ``(n, d, m)`` payload.
    """
    b, t, d, n_h, p = map(_num, (b, t, d, n_h, p))
    algo = algo.lower()
    if algo == "ring":
        out = 2 * b * t * d * p
    elif algo == "tree":
        out = 2 * (p - 1) / p * (b * d + 2 * b * n_h)
    else:
        raise ValueError(f"unknown algorithm {algo!r}")
    return int(out) if out.denominator == 1 else out


def ring_total_volume(b, t, d, p):
    """Volume of a full ring pass: ``p - 1`` rotations."""
    return comm_volume_formula("ring", b, t, d, 1, p) * (p - 1)
