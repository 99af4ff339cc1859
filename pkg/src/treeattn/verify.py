"""Property suites run by ``treeattn verify``.

Each suite draws ``grid_size`` random cases from a fixed seed and returns
``(ok, detail)``; ``detail`` names the first failing case. Reports contain no
timings so a fixed seed always prints the same text.
"""

from __future__ import annotations

import functools
from fractions import Fraction
from typing import Callable

import numpy as np

from . import attention as att
from .energy import (
    energy,
    energy_forward_parallel,
    energy_grad_parallel,
    exponents,
    gamma_log_likelihood,
    grad_energy_wrt_source,
)
from .cluster import Topology, comm_volume_formula, peak_memory_formula
from .decode import ComputeModel, overlap_feasibility, ring_decode, shard_kv, tree_decode
from .numerics import DType, lse_combine, round_to_dtype, seeded_random_tensor
from .reduction import (
    build_allreduce_schedule,
    ceil_log2,
    hierarchical_allreduce,
    ring_allreduce,
    tree_reduce,
)

FAULT_PERTURBATION = 1e-6


def _qkv(seed, b, h, n_q, n, dh, scale=1.0):
    return (
        seeded_random_tensor((b, h, n_q, dh), seed, scale),
        seeded_random_tensor((b, h, n, dh), seed + 1, scale),
        seeded_random_tensor((b, h, n, dh), seed + 2, scale),
    )


def _case_rng(seed, i):
    return np.random.default_rng([seed, i])


def _lse_combiner(fault: bool) -> Callable:
    if not fault:
        return lse_combine
    return lambda a, b: lse_combine(b, a) + FAULT_PERTURBATION


def suite_lse_associativity(seed, grid, fault=False):
    comb = _lse_combiner(fault)
    for i in range(grid):
        x, y, z = _case_rng(seed, i).normal(scale=5.0, size=3)
        left, right = comb(comb(x, y), z), comb(x, comb(y, z))
        if abs(left - right) > 1e-12 or abs(comb(x, y) - comb(y, x)) > 1e-12:
            return False, f"case {i}: x={float(x)!r} y={float(y)!r} z={float(z)!r}"
    return True, f"{grid} triples"


@functools.lru_cache(maxsize=1)
def _bf16_table():
    bits = np.arange(1 << 16, dtype=np.uint32)
    with np.errstate(invalid="ignore"):
        vals = (bits << 16).view(np.float32).astype(np.float64)
    keep = np.isfinite(vals)
    order = np.argsort(vals[keep], kind="stable")
    return vals[keep][order], bits[keep][order]


def _bf16_oracle(x: float) -> float:
    vals, bits = _bf16_table()
    i = int(np.searchsorted(vals, x))
    cands = [j for j in (i - 1, i) if 0 <= j < len(vals)]
    best = min(cands, key=lambda j: (abs(vals[j] - x), int(bits[j]) & 1))
    return float(vals[best])


def suite_bf16_rounding(seed, grid, fault=False):
    rng = np.random.default_rng(seed)
    xs = rng.normal(size=grid) * 10.0 ** rng.uniform(-30, 30, size=grid)
    for x in xs:
        if round_to_dtype(float(x), DType.BF16EMU) != _bf16_oracle(float(x)):
            return False, f"x={float(x)!r}"
    return True, f"{grid} values vs bit-pattern enumeration"


def suite_attention_equivalence(seed, grid, fault=False):
    for i in range(grid):
        rng = _case_rng(seed, i)
        n, dh, h = int(rng.integers(1, 40)), int(rng.integers(1, 9)), int(rng.integers(1, 3))
        causal = bool(rng.integers(0, 2))
        q, k, v = _qkv(seed * 1000 + i, 1, h, n if causal else 1, n, dh)
        ref = att.attention_naive(q, k, v, causal=causal)
        onl = att.attention_online(q, k, v, causal=causal)
        err = np.max(np.abs(onl - ref))
        if not causal:
            p = int(rng.integers(1, n + 1))
            parts = [att.attention_chunk_partial(q, k[:, :, a:b], v[:, :, a:b]) for a, b in att.chunk_bounds(n, p)]
            err = max(err, np.max(np.abs(att.combine_partials(parts) - ref)))
        if err > 1e-10:
            return False, f"case {i}: n={n} dh={dh} causal={causal} err={err:.3e}"
    return True, f"{grid} cases"


def suite_partition_invariance(seed, grid, fault=False):
    merge = att.merge_partials
    if fault:
        def merge(a, b, dtype=DType.FLOAT64):
            out = att.merge_partials(b, a, dtype)
            return att.SoftmaxPartial(out.m, out.lse, out.o + FAULT_PERTURBATION)
    for i in range(grid):
        rng = _case_rng(seed, i)
        n = int(rng.integers(2, 48))
        q, k, v = _qkv(seed * 1000 + i, 1, 2, 1, n, 4)
        ref = att.attention_naive(q, k, v)
        for p in {1, 2, int(rng.integers(1, n + 1)), n}:
            parts = [att.attention_chunk_partial(q, k[:, :, a:b], v[:, :, a:b]) for a, b in att.chunk_bounds(n, p)]
            folded, _ = tree_reduce(parts, merge)
            err = max(np.max(np.abs(att.combine_partials(parts) - ref)), np.max(np.abs(folded.o - ref)))
            if err > 1e-12:
                return False, f"case {i}: n={n} p={p} err={err:.3e}"
    return True, f"{grid} sequences, several partitions each"


def _fd_grad(f, x, h):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def suite_gradient_identity(seed, grid, fault=False):
    for i in range(grid):
        rng = _case_rng(seed, i)
        n, dh = int(rng.integers(1, 65)), int(rng.integers(1, 17))
        q, k, v = _qkv(seed * 1000 + i, 1, 1, 1, n, dh, scale=0.7)
        grad = grad_energy_wrt_source(q, k, v)
        err = np.max(np.abs(grad - att.attention_naive(q, k, v)))
        fd = _fd_grad(lambda z: float(energy(q, k, v, z).value.sum()), np.zeros_like(q), 1e-5)
        rel = np.max(np.abs(fd - grad)) / max(np.max(np.abs(grad)), 1e-300)
        if err > 1e-12 or rel > 1e-6:
            return False, f"case {i}: n={n} dh={dh} abs={err:.3e} fd_rel={rel:.3e}"
    return True, f"{grid} configs"


def suite_gamma_stationarity(seed, grid, fault=False):
    for i in range(grid):
        rng = _case_rng(seed, i)
        n, dh = int(rng.integers(1, 17)), int(rng.integers(1, 6))
        q, k, v = _qkv(seed * 1000 + i, 1, 1, n, n, dh, scale=0.7)
        zeta0 = np.zeros_like(q)
        z_star = att.attention_naive(q, k, v, causal=True)
        gz = _fd_grad(lambda zt: gamma_log_likelihood(zt, z_star, q, k, v), zeta0, 1e-5)
        gzz = _fd_grad(lambda zz: gamma_log_likelihood(zeta0, zz, q, k, v), z_star, 1e-5)
        worst = max(np.max(np.abs(gz)), np.max(np.abs(gzz)))
        if worst > 1e-8:
            return False, f"case {i}: n={n} dh={dh} max|dGamma|={worst:.3e}"
    return True, f"{grid} configs"


def suite_safe_softmax(seed, grid, fault=False):
    for i in range(grid):
        rng = _case_rng(seed, i)
        n, dh = int(rng.integers(1, 33)), int(rng.integers(1, 9))
        q, k, v = _qkv(seed * 1000 + i, 1, 2, n, n, dh)
        zeta = seeded_random_tensor(q.shape, seed * 1000 + i + 3, 0.1)
        shift = np.max(exponents(q, k, v, causal=True), axis=-1)
        g0 = grad_energy_wrt_source(q, k, v, zeta, causal=True)
        g1 = grad_energy_wrt_source(q, k, v, zeta, causal=True, shift=shift)
        err = np.max(np.abs(g0 - g1))
        if err > 1e-12:
            return False, f"case {i}: n={n} dh={dh} err={err:.3e}"
    return True, f"{grid} cases"


def suite_parallel_energy(seed, grid, fault=False):
    for i in range(grid):
        rng = _case_rng(seed, i)
        n, dh = int(rng.integers(1, 40)), int(rng.integers(1, 9))
        q, k, v = _qkv(seed * 1000 + i, 1, 2, 1, n, dh)
        zeta = seeded_random_tensor(q.shape, seed * 1000 + i + 3, 0.3)
        p = int(rng.integers(1, n + 1))
        fwd = energy_forward_parallel(q, k, v, zeta, p)
        e_err = np.max(np.abs(fwd.value - energy(q, k, v, zeta).value))
        saved = energy_forward_parallel(q, k, v, None, p)
        g_err = np.max(np.abs(energy_grad_parallel(q, k, v, saved, p) - att.attention_naive(q, k, v)))
        if e_err > 1e-12 or g_err > 1e-12:
            return False, f"case {i}: n={n} p={p} energy={e_err:.3e} grad={g_err:.3e}"
    return True, f"{grid} cases"


def suite_round_counts(seed, grid, fault=False):
    for p in range(1, 34):
        items = list(range(p))
        if tree_reduce(items, lambda a, b: a + b)[1] != ceil_log2(p):
            return False, f"tree p={p}"
        if ring_allreduce(items, lambda a, b: a + b)[1] != 2 * (p - 1):
            return False, f"ring p={p}"
    for nodes in range(1, 6):
        for g in range(1, 6):
            _, ri, rx = hierarchical_allreduce(list(range(nodes * g)), lambda a, b: a + b, 0, (nodes, g))
            sched = build_allreduce_schedule("hier", nodes, g)
            if (ri, rx) != (g - 1, ceil_log2(nodes)) or sched.n_rounds != 2 * (g - 1) + 2 * ceil_log2(nodes):
                return False, f"hier {nodes}x{g}"
    return True, "p=1..33 and 5x5 hierarchical layouts"


def suite_schedule_equivalence(seed, grid, fault=False):
    comb = _lse_combiner(fault)
    for p in range(1, 34):
        xs = list(_case_rng(seed, p).normal(scale=4.0, size=p))
        flat = functools.reduce(lse_combine, xs)
        vals = [tree_reduce(xs, comb)[0], ring_allreduce(xs, comb)[0]]
        for g in (g for g in range(1, p + 1) if p % g == 0):
            vals.append(hierarchical_allreduce(xs, comb, topology=(p // g, g))[0])
        err = max(abs(float(x) - flat) for x in vals)
        if err > 1e-12:
            return False, f"p={p}: err={err:.3e}"
    return True, "tree, ring, hierarchical for p=1..33"


def _decode_grid(grid):
    ps = [1, 2, 3, 4, 7, 8, 16]
    return [(p, n) for n in (17, 64) for p in ps][: max(grid, 1)]


def suite_decode_exactness(seed, grid, fault=False):
    for p, n in _decode_grid(grid):
        q, k, v = _qkv(seed + p * 31 + n, 1, 4, 1, n, 8)
        ref = att.attention_naive(q, k, v)
        topo = Topology.for_workers(p)
        cache = shard_kv(k, v, p)
        for label, out in (
            ("tree", tree_decode(q, cache, topo).output),
            ("ring", ring_decode(q, cache, topo).output),
        ):
            err = np.max(np.abs(out - ref))
            if err > 1e-10:
                return False, f"{label} p={p} n={n} err={err:.3e}"
    return True, "tree and ring decode vs naive attention"


def suite_volume_formulas(seed, grid, fault=False):
    b, h, dh = 1, 4, 8
    d = h * dh
    for p, n in _decode_grid(grid):
        q, k, v = _qkv(seed + p, b, h, 1, n, dh)
        topo = Topology.for_workers(p)
        cache = shard_kv(k, v, p)
        tree = tree_decode(q, cache, topo).cost
        ring = ring_decode(q, cache, topo).cost
        if tree.elems_per_worker != comm_volume_formula("tree", b, Fraction(n, p), d, h, p):
            return False, f"tree volume p={p} n={n}"
        v_ring = comm_volume_formula("ring", b, Fraction(n, p), d, h, p)
        if any(x != v_ring for x in ring.per_round_elems) or len(ring.per_round_elems) != p - 1:
            return False, f"ring volume p={p} n={n}"
    return True, "per-rotation ring and allreduce volumes"


def suite_memory_formulas(seed, grid, fault=False):
    b, h, dh = 1, 4, 8
    d = h * dh
    for p in (2, 4, 8, 16):
        n = 8 * p
        q, k, v = _qkv(seed + p, b, h, 1, n, dh)
        topo = Topology.for_workers(p)
        cache = shard_kv(k, v, p)
        if tree_decode(q, cache, topo).cost.peak_elems_per_worker != peak_memory_formula("tree", b, 8, d, h):
            return False, f"tree memory p={p}"
        if ring_decode(q, cache, topo).cost.peak_elems_per_worker != peak_memory_formula("ring", b, 8, d, h):
            return False, f"ring memory p={p}"
    return True, "tracked peaks equal closed forms"


def suite_overlap(seed, grid, fault=False):
    flag, ratio = overlap_feasibility(Topology(nodes=1, gpus_per_node=8), 1, 640000 // 8, 2048, ComputeModel())
    if flag or ratio > 0.1:
        return False, f"ratio={ratio:.3e}"
    return True, f"compute/transfer ratio {ratio:.3e}"


SUITES = [
    ("lse-associativity", suite_lse_associativity),
    ("bf16-rounding", suite_bf16_rounding),
    ("attention-equivalence", suite_attention_equivalence),
    ("partition-invariance", suite_partition_invariance),
    ("gradient-identity", suite_gradient_identity),
    ("gamma-stationarity", suite_gamma_stationarity),
    ("safe-softmax-invariance", suite_safe_softmax),
    ("parallel-energy", suite_parallel_energy),
    ("round-counts", suite_round_counts),
    ("schedule-equivalence", suite_schedule_equivalence),
    ("decode-exactness", suite_decode_exactness),
    ("volume-formulas", suite_volume_formulas),
    ("memory-formulas", suite_memory_formulas),
    ("overlap-infeasibility", suite_overlap),
]


def run_verify(seed: int = 0, grid_size: int = 20, fault: bool = False, out=print) -> int:
    failures = 0
    out(f"treeattn verify seed={seed} grid_size={grid_size}")
    for name, suite in SUITES:
        ok, detail = suite(seed, grid_size, fault)
        failures += not ok
        status = "PASS" if ok else "FAIL"
        out(f"{status}  {name:<26} {detail}" + ("" if ok else f" (seed={seed})"))
    out(f"{len(SUITES) - failures}/{len(SUITES)} suites passed")
    return 0 if failures == 0 else 1
