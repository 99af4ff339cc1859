import math
import operator
from collections import Counter

import numpy as np
import pytest

from conftest import make_qkv
from oracles import brute_logsumexp
from treeattn.attention import attention_chunk_partial, attention_naive, chunk_bounds, merge_packed, pack_partial, unpack_partial
from treeattn.cluster import Topology
from treeattn.numerics import lse_combine
from treeattn.reduction import (
    Strategy,
    allreduce,
    build_allreduce_schedule,
    ceil_log2,
    complexity_model,
    execute_schedule,
    hierarchical_allreduce,
    hierarchical_schedule,
    ring_allreduce,
    ring_schedule,
    tree_reduce,
    tree_schedule,
)


def test_tree_reduce_examples():
    assert tree_reduce([1, 2, 3, 4], operator.add, 0) == (10, 2)
    xs = list(np.random.default_rng(0).normal(size=8))
    assert tree_reduce(xs, max, -math.inf) == (max(xs), 3)
    ys = list(np.random.default_rng(1).normal(size=7) * 5)
    val, rounds = tree_reduce(ys, lse_combine, -math.inf)
    assert rounds == 3 and val == pytest.approx(brute_logsumexp(ys), abs=1e-12)
    assert tree_reduce([], operator.add, 0) == (0, 0)


def test_ring_allreduce_examples():
    assert ring_allreduce([1, 1, 1, 1], operator.add, 0)[1] == 6
    assert float(ring_allreduce([1, 1, 1, 1], operator.add, 0)[0]) == 4
    assert ring_allreduce([2.5], operator.add, 0) == (2.5, 0)
    assert ring_allreduce([], operator.add, 0) == (0, 0)
    xs = list(np.random.default_rng(2).normal(size=5))
    assert float(ring_allreduce(xs, lse_combine)[0]) == pytest.approx(tree_reduce(xs, lse_combine)[0], abs=1e-12)


def test_hierarchical_examples():
    val, intra, inter = hierarchical_allreduce(list(range(1, 9)), operator.add, 0, (2, 4))
    assert int(val) == 36 and (intra, inter) == (3, 1)
    xs = list(np.random.default_rng(3).normal(size=4))
    val, _, _ = hierarchical_allreduce(xs, lse_combine, -math.inf, Topology(nodes=2, gpus_per_node=2))
    assert float(val) == pytest.approx(brute_logsumexp(xs), abs=1e-12)
    with pytest.raises(ValueError):
        hierarchical_allreduce([1, 2, 3], operator.add, 0, (2, 2))


def test_single_node_hierarchical_is_ring():
    h = hierarchical_schedule(1, 6)
    r = ring_schedule(6)
    assert h.rounds == r.rounds


def test_complexity_model_examples():
    assert complexity_model(1024, 1) == (1024, 0)
    assert complexity_model(1024, 1024) == (1, 10)
    assert complexity_model(1000, 8) == (125, 3)
    with pytest.raises(ValueError):
        complexity_model(4, 5)


@pytest.mark.parametrize("p", range(1, 34))
def test_round_counts(p):
    assert tree_schedule(p, allreduce=False).n_rounds == ceil_log2(p) == math.ceil(math.log2(p))
    assert tree_schedule(p).n_rounds == 2 * ceil_log2(p)
    assert ring_schedule(p).n_rounds == 2 * (p - 1)
    assert ring_schedule(p).count("reduce") == p - 1


@pytest.mark.parametrize("nodes,g", [(1, 1), (1, 8), (2, 4), (3, 2), (4, 8), (5, 3), (16, 8)])
def test_hierarchical_round_counts(nodes, g):
    s = hierarchical_schedule(nodes, g)
    assert s.count("intra-reduce") == s.count("intra-bcast") == g - 1
    assert s.count("inter-reduce") == s.count("inter-bcast") == ceil_log2(nodes)
    assert s.n_rounds == 2 * (g - 1 + ceil_log2(nodes))


def contributions(schedule):
    """Symbolic execution: each participant's value is a multiset of origin ids."""
    items = [np.array([Counter({i: 1}) for _ in range(schedule.num_segments)], dtype=object) for i in range(schedule.participants)]
    return execute_schedule(schedule, items, lambda a, b: np.array([x + y for x, y in zip(a, b)], dtype=object))


@pytest.mark.parametrize("strategy,nodes,g", [("tree", 1, 7), ("ring", 1, 7), ("hier", 3, 4), ("tree", 1, 16), ("hier", 5, 1)])
def test_every_contribution_appears_once(strategy, nodes, g):
    p = nodes * g
    for final in contributions(build_allreduce_schedule(strategy, nodes, g)):
        for seg in final:
            assert seg == Counter({i: 1 for i in range(p)})


def _factor(p):
    for g in (8, 4, 3, 2):
        if p % g == 0 and p > g:
            return p // g, g
    return 1, p


@pytest.mark.parametrize("p", range(1, 34))
def test_schedule_equivalence_against_flat_fold(p):
    rng = np.random.default_rng(p)
    xs = [rng.normal(size=5) * 4 for _ in range(p)]
    flat = xs[0]
    for x in xs[1:]:
        flat = lse_combine(flat, x)
    ints = [rng.integers(-100, 100, size=5) for _ in range(p)]
    nodes, g = _factor(p)
    for strat in Strategy:
        vals, _ = allreduce(xs, lse_combine, strat, nodes, g)
        for v in vals:
            assert np.max(np.abs(v - flat)) <= 1e-12
        ivals, _ = allreduce(ints, np.add, strat, nodes, g)
        for v in ivals:
            assert np.array_equal(v, np.sum(ints, axis=0))


@pytest.mark.parametrize("strategy", list(Strategy))
def test_softmax_partials_through_schedules(strategy):
    q, k, v = make_qkv(4, b=2, h=3, n=40, dh=5)
    nodes, g = 2, 4
    items = [pack_partial(attention_chunk_partial(q, k[:, :, a:b], v[:, :, a:b])) for a, b in chunk_bounds(40, nodes * g)]
    vals, _ = allreduce(items, merge_packed, strategy, nodes, g)
    ref = attention_naive(q, k, v)
    for val in vals:
        assert np.max(np.abs(unpack_partial(val, q.shape).o - ref)) <= 1e-10


@pytest.mark.parametrize("strategy", list(Strategy))
def test_threaded_execution_is_bitwise_identical(strategy):
    rng = np.random.default_rng(5)
    xs = [rng.normal(size=37) for _ in range(16)]
    seq, _ = allreduce(xs, lse_combine, strategy, 2, 8)
    par, _ = allreduce(xs, lse_combine, strategy, 2, 8, max_workers=4)
    for a, b in zip(seq, par):
        assert a.tobytes() == b.tobytes()


def test_execute_rejects_wrong_item_count():
    with pytest.raises(ValueError):
        execute_schedule(tree_schedule(4), [1, 2, 3], operator.add)


def test_strategy_parse():
    assert Strategy.parse("hier") is Strategy.HIERARCHICAL
    assert Strategy.parse("TREE_BINARY") is Strategy.TREE_BINARY
    with pytest.raises(ValueError):
        Strategy.parse("mesh")
