"""Parameter sweeps over sequence length and cluster size, and their reports.

Times in the records are modeled by the cluster cost model, not measured.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attention import attention_naive
from .cluster import Topology
from .decode import ring_decode, shard_kv, tree_decode
from .numerics import DType, seeded_random_tensor
from .reduction import Strategy

CSV_FIELDS = [
    "algo",
    "N",
    "p",
    "nodes",
    "sim_time_s",
    "elems_intra",
    "elems_inter",
    "peak_elems",
    "rounds",
    "max_abs_err",
]

# dtype -> (kind, bound) where kind is "abs" or "rel" (relative to max |reference|)
TOLERANCES = {
    DType.FLOAT64: ("abs", 1e-10),
    DType.FLOAT32: ("rel", 1e-4),
    DType.BF16EMU: ("rel", 2e-2),
}

MODELED_NOTE = "sim_time_s is modeled with the latency/bandwidth cost model, not measured"


class ReportError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass
class SweepSpec:
    seq_lens: list[int] = field(default_factory=lambda: [8192])
    cluster_sizes: list[tuple[int, int]] = field(default_factory=lambda: [(1, 8)])
    b: int = 1
    n_h: int = 16
    d_h: int = 128
    dtype: DType = DType.BF16EMU
    algorithms: tuple[str, ...] = ("tree", "ring")
    seed: int = 0
    per_device: bool = False
    allreduce: Strategy = Strategy.HIERARCHICAL

    def __post_init__(self):
        if not self.seq_lens or not self.cluster_sizes or not self.algorithms:
            raise ValueError("sweep lists must be non-empty")
        if min(self.b, self.n_h, self.d_h, *self.seq_lens) < 1:
            raise ValueError("all dimensions must be positive")
        if any(a not in ("tree", "ring") for a in self.algorithms):
            raise ValueError(f"unknown algorithm in {self.algorithms}")

    def metadata(self, topology: Topology) -> dict:
        meta = asdict(self)
        meta["dtype"] = self.dtype.value
        meta["allreduce"] = self.allreduce.value
        meta["cluster_sizes"] = [list(c) for c in self.cluster_sizes]
        meta["algorithms"] = list(self.algorithms)
        meta["topology"] = topology.to_config()
        return meta


@dataclass
class BenchRecord:
    algo: str
    N: int
    p: int
    nodes: int
    sim_time_s: float
    elems_intra: int
    elems_inter: int
    peak_elems: int
    rounds: int
    max_abs_err: float


def _within_tolerance(err: float, ref_scale: float, dtype: DType) -> bool:
    kind, bound = TOLERANCES[dtype]
    return err <= (bound if kind == "abs" else bound * ref_scale)


def _cell_inputs(spec: SweepSpec, n: int):
    seed = spec.seed * 1_000_003 + n
    # q and k at d_h**-0.25 keep scores at unit scale
    s = spec.d_h ** -0.25
    rnd = spec.dtype.round
    q = rnd(seeded_random_tensor((spec.b, spec.n_h, 1, spec.d_h), seed, s))
    k = rnd(seeded_random_tensor((spec.b, spec.n_h, n, spec.d_h), seed + 1, s))
    v = rnd(seeded_random_tensor((spec.b, spec.n_h, n, spec.d_h), seed + 2, 1.0))
    return q, k, v


def run_sweep(spec: SweepSpec, topology: Topology | None = None) -> tuple[list[BenchRecord], bool]:
    """Run every ``(N, cluster, algo)`` cell; returns records and whether all were within tolerance."""
    base = topology or Topology(element_bytes=spec.dtype.itemsize)
    records, ok = [], True
    oracle_cache: dict[int, tuple] = {}
    for seq in spec.seq_lens:
        for nodes, g in spec.cluster_sizes:
            topo = base.with_shape(nodes, g)
            p = topo.p
            n = seq * p if spec.per_device else seq
            if p > n:
                raise ValueError(f"N={n} is smaller than p={p}")
            if n not in oracle_cache:
                q, k, v = _cell_inputs(spec, n)
                oracle_cache = {n: (q, k, v, attention_naive(q, k, v))}
            q, k, v, ref = oracle_cache[n]
            cache = shard_kv(k, v, p)
            for algo in spec.algorithms:
                if algo == "tree":
                    res = tree_decode(q, cache, topo, spec.allreduce, dtype=spec.dtype)
                else:
                    res = ring_decode(q, cache, topo, dtype=spec.dtype)
                err = float(np.max(np.abs(res.output - ref)))
                ok &= _within_tolerance(err, float(np.max(np.abs(ref))), spec.dtype)
                c = res.cost
                records.append(
                    BenchRecord(algo, n, p, nodes, c.sim_time_s, c.elems_sent_intra, c.elems_sent_inter,
                                c.peak_elems_per_worker, c.rounds, err)
                )
    return records, ok


def records_to_csv(records: Iterable[BenchRecord], meta: dict | None = None) -> str:
    buf = io.StringIO()
    if meta is not None:
        buf.write("# treeattn bench " + json.dumps(meta, sort_keys=True) + "\n")
        buf.write(f"# {MODELED_NOTE}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([repr(x) if isinstance(x, float) else x for x in (getattr(r, f) for f in CSV_FIELDS)])
    return buf.getvalue()


def records_to_json(records: Iterable[BenchRecord]) -> str:
    return json.dumps([asdict(r) for r in records], indent=1) + "\n"


_TYPES = {f.name: f.type for f in fields(BenchRecord)}


def _coerce(name: str, raw, lineno: int):
    kind = _TYPES[name]
    try:
        if kind == "str":
            return str(raw)
        if kind == "int":
            if isinstance(raw, float) or (isinstance(raw, str) and not raw.lstrip("-").isdigit()):
                raise ValueError(raw)
            return int(raw)
        return float(raw)
    except (TypeError, ValueError):
        raise ReportError(lineno, f"bad value {raw!r} for {name}") from None


def parse_records(text: str) -> list[BenchRecord]:
    """Parse CSV or JSON bench output; raises :class:`ReportError` with a line number."""
    stripped = text.lstrip()
    if stripped.startswith("["):
        try:
            rows = json.loads(text)
        except json.JSONDecodeError as e:
            raise ReportError(e.lineno, e.msg) from None
        if not isinstance(rows, list):
            raise ReportError(1, "expected a JSON array of records")
        out = []
        for i, row in enumerate(rows):
            if not isinstance(row, dict) or set(row) != set(CSV_FIELDS):
                raise ReportError(1, f"record {i} does not have the bench fields")
            out.append(BenchRecord(**{k: _coerce(k, row[k], 1) for k in CSV_FIELDS}))
        return out

    lines = text.splitlines()
    header_seen, out = False, []
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        cells = next(csv.reader([line]))
        if not header_seen:
            if cells != CSV_FIELDS:
                raise ReportError(lineno, "unexpected CSV header")
            header_seen = True
            continue
        if len(cells) != len(CSV_FIELDS):
            raise ReportError(lineno, f"expected {len(CSV_FIELDS)} columns, got {len(cells)}")
        out.append(BenchRecord(**{k: _coerce(k, c, lineno) for k, c in zip(CSV_FIELDS, cells)}))
    if not header_seen:
        raise ReportError(max(len(lines), 1), "no CSV header found")
    return out


@dataclass
class Comparison:
    N: int
    p: int
    nodes: int
    speedup: float
    volume_ratio: float
    memory_ratio: float

    @property
    def tree_not_faster(self) -> bool:
        # single-worker cells tie by construction
        return self.p > 1 and self.speedup <= 1.0


def _ratio(num: float, den: float) -> float:
    if den == 0:
        return 1.0 if num == 0 else math.inf
    return num / den


def compare(records: Sequence[BenchRecord]) -> list[Comparison]:
    """Pair tree and ring records of the same cell; ratios are ring over tree."""
    cells: dict[tuple[int, int, int], dict[str, BenchRecord]] = {}
    for r in records:
        cells.setdefault((r.N, r.p, r.nodes), {})[r.algo] = r
    rows = []
    for (n, p, nodes), by_algo in cells.items():
        if "tree" not in by_algo or "ring" not in by_algo:
            continue
        t, r = by_algo["tree"], by_algo["ring"]
        rows.append(
            Comparison(
                n,
                p,
                nodes,
                _ratio(r.sim_time_s, t.sim_time_s),
                _ratio(r.elems_intra + r.elems_inter, t.elems_intra + t.elems_inter),
                _ratio(r.peak_elems, t.peak_elems),
            )
        )
    return rows


def format_report(rows: Sequence[Comparison]) -> str:
    lines = [
        f"# {MODELED_NOTE}",
        f"{'N':>10} {'p':>5} {'nodes':>5} {'speedup':>10} {'volume':>12} {'memory':>8}  flag",
    ]
    for c in rows:
        flag = "tree-not-faster" if c.tree_not_faster else ""
        lines.append(
            f"{c.N:>10} {c.p:>5} {c.nodes:>5} {c.speedup:>10.2f} {c.volume_ratio:>12.2f} {c.memory_ratio:>8.3f}  {flag}".rstrip()
        )
    return "\n".join(lines) + "\n"


def write_output(text: str, out_path: str | Path | None) -> None:
    if out_path in (None, "-"):
        print(text, end="")
    else:
        Path(out_path).write_text(text, encoding="utf-8")
