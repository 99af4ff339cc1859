import numpy as np
import pytest

from conftest import make_qkv
from treeattn.attention import attention_naive
from treeattn.cluster import LinkParams, Topology, comm_volume_formula, peak_memory_formula
from treeattn.decode import (
    ComputeModel,
    overlap_feasibility,
    ring_decode,
    ring_decode_cost,
    shard_kv,
    tree_decode,
    tree_decode_cost,
)
from treeattn.numerics import DType, ShapeError, round_to_dtype
from treeattn.reduction import Strategy


def decode_inputs(seed, n, h=2, dh=4, b=1):
    return make_qkv(seed, b=b, h=h, n_q=1, n=n, dh=dh)


def test_shard_sizes_and_reassembly():
    _, k, v = decode_inputs(0, 8)
    assert shard_kv(k, v, 4).sizes == [2, 2, 2, 2]
    _, k, v = decode_inputs(0, 10)
    cache = shard_kv(k, v, 4)
    assert cache.sizes == [3, 3, 2, 2]
    assert [c.start for c in cache.chunks] == [0, 3, 6, 8]
    assert [c.owner for c in cache.chunks] == [0, 1, 2, 3]
    k2, v2 = cache.reassemble()
    assert k2.tobytes() == k.tobytes() and v2.tobytes() == v.tobytes()
    with pytest.raises(ValueError):
        shard_kv(k, v, 11)


def test_single_worker_is_naive():
    q, k, v = decode_inputs(1, 33)
    topo = Topology(nodes=1, gpus_per_node=1)
    ref = attention_naive(q, k, v)
    for res in (tree_decode(q, shard_kv(k, v, 1), topo), ring_decode(q, shard_kv(k, v, 1), topo)):
        assert np.array_equal(res.output, ref)
        assert res.cost.sim_time_s == 0 and res.cost.elems_total == 0


@pytest.mark.parametrize("strategy", list(Strategy))
def test_tree_decode_p8_n1024(strategy):
    q, k, v = decode_inputs(2, 1024, h=4, dh=8)
    res = tree_decode(q, shard_kv(k, v, 8), Topology(), strategy)
    assert np.max(np.abs(res.output - attention_naive(q, k, v))) <= 1e-10


def test_tree_binary_reduce_rounds():
    q, k, v = decode_inputs(3, 64)
    res = tree_decode(q, shard_kv(k, v, 8), Topology(), Strategy.TREE_BINARY)
    assert [r.name for r in res.collectives] == ["max", "sum"]
    assert all(r.reduce_rounds == 3 for r in res.collectives)


def test_ring_matches_tree_p4():
    q, k, v = decode_inputs(4, 64)
    topo = Topology(nodes=1, gpus_per_node=4)
    cache = shard_kv(k, v, 4)
    a = tree_decode(q, cache, topo).output
    b = ring_decode(q, cache, topo).output
    assert np.max(np.abs(a - b)) <= 1e-10


def test_ring_per_rotation_volume():
    b, h, dh, n, p = 2, 3, 4, 48, 8
    q, k, v = decode_inputs(5, n, h=h, dh=dh, b=b)
    res = ring_decode(q, shard_kv(k, v, p), Topology(nodes=2, gpus_per_node=4))
    t, d = n // p, h * dh
    assert res.cost.rounds == p - 1
    assert res.cost.per_round_elems == [comm_volume_formula("ring", b, t, d, h, p)] * (p - 1)


@pytest.mark.parametrize("nodes,g", [(1, 1), (1, 3), (1, 8), (2, 4), (4, 8)])
@pytest.mark.parametrize("strategy", list(Strategy))
def test_tree_volume_equals_formula(nodes, g, strategy):
    b, h, dh = 2, 4, 8
    topo = Topology(nodes=nodes, gpus_per_node=g)
    p = topo.p
    for n in (64, 1024):
        acc, _ = tree_decode_cost(b, h, dh, [n // p] * p, topo, strategy)
        assert acc.elems_per_worker == comm_volume_formula("tree", b, n // p, h * dh, h, p)


@pytest.mark.parametrize("p", [2, 4, 8, 16])
def test_memory_equals_formula(p):
    b, h, dh, t = 1, 16, 8, 32
    topo = Topology.for_workers(p)
    tree, _ = tree_decode_cost(b, h, dh, [t] * p, topo)
    ring = ring_decode_cost(b, h, dh, [t] * p, topo)
    assert tree.peak_elems_per_worker == peak_memory_formula("tree", b, t, h * dh, h)
    assert ring.peak_elems_per_worker == peak_memory_formula("ring", b, t, h * dh, h)


def test_cost_only_matches_numeric_run():
    q, k, v = decode_inputs(6, 100, h=2, dh=4)
    topo = Topology(nodes=2, gpus_per_node=4)
    cache = shard_kv(k, v, 8)
    tree = tree_decode(q, cache, topo)
    acc, _ = tree_decode_cost(1, 2, 4, cache.sizes, topo)
    assert tree.cost == acc
    assert ring_decode(q, cache, topo).cost == ring_decode_cost(1, 2, 4, cache.sizes, topo)


def test_determinism_and_threads():
    q, k, v = decode_inputs(7, 200, h=3, dh=5)
    topo = Topology(nodes=2, gpus_per_node=4)
    cache = shard_kv(k, v, 8)
    a = tree_decode(q, cache, topo)
    b = tree_decode(q, cache, topo, max_workers=4)
    assert a.output.tobytes() == b.output.tobytes() and a.cost == b.cost
    c = ring_decode(q, cache, topo)
    d = ring_decode(q, cache, topo, max_workers=4)
    assert c.output.tobytes() == d.output.tobytes() and c.cost == d.cost


@pytest.mark.parametrize("dtype,bound", [(DType.FLOAT32, 1e-4), (DType.BF16EMU, 2e-2)])
def test_low_precision_tolerance(dtype, bound):
    q, k, v = (round_to_dtype(x, dtype) for x in decode_inputs(8, 256, h=4, dh=16))
    q = q * 0.5
    ref = attention_naive(q, k, v)
    cache = shard_kv(k, v, 8)
    for res in (tree_decode(q, cache, Topology(), dtype=dtype), ring_decode(q, cache, Topology(), dtype=dtype)):
        assert np.max(np.abs(res.output - ref)) <= bound * np.max(np.abs(ref))


def test_decode_errors():
    q, k, v = decode_inputs(9, 16)
    cache = shard_kv(k, v, 4)
    with pytest.raises(ValueError):
        tree_decode(q, cache, Topology())
    q2, _, _ = make_qkv(9, h=2, n_q=2, n=16)
    with pytest.raises(ShapeError):
        ring_decode(q2, cache, Topology(nodes=1, gpus_per_node=4))


def test_overlap_640k_tokens_on_8_workers():
    n, p, d = 640_000, 8, 2048
    flag, ratio = overlap_feasibility(Topology(), 1, n // p, d)
    assert flag is False and ratio <= 0.1
    compute = ComputeModel().chunk_time(1, n // p, d)
    assert 1e-6 <= compute <= 1e-4


def test_overlap_edge_cases():
    assert overlap_feasibility(Topology(), 1, 0, 2048)[0] is True
    fast = Topology(
        intra=LinkParams(Topology().intra.latency_s / 1000, Topology().intra.bandwidth_Bps * 1000),
    )
    assert overlap_feasibility(fast, 1, 80_000, 2048)[0] is True


def test_ring_decode_reports_overlap():
    q, k, v = decode_inputs(10, 32)
    res = ring_decode(q, shard_kv(k, v, 4), Topology(nodes=1, gpus_per_node=4))
    assert res.overlap_feasible is not None and res.overlap_ratio > 0
