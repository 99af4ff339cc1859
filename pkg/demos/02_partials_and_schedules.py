"""
Combining attention over chunks
===============================

Attention over disjoint key chunks is recovered exactly from per-chunk
(max, logsumexp, output) triples. The merge is associative, so any reduction
schedule (binary tree, ring, or a two-tier mix) gives the same answer.
"""

import operator

import numpy as np

from treeattn import attention_chunk_partial, attention_naive, combine_partials, seeded_random_tensor
from treeattn.attention import chunk_bounds
from treeattn.reduction import Strategy, build_allreduce_schedule, tree_reduce

q = seeded_random_tensor((1, 2, 1, 16), seed=10)
k = seeded_random_tensor((1, 2, 1000, 16), seed=11)
v = seeded_random_tensor((1, 2, 1000, 16), seed=12)
ref = attention_naive(q, k, v)

# split the 1000 keys seven ways; chunk sizes differ by at most one
parts = [attention_chunk_partial(q, k[:, :, a:b], v[:, :, a:b]) for a, b in chunk_bounds(1000, 7)]
print("chunks:", [b - a for a, b in chunk_bounds(1000, 7)])
print("max |combined - naive| =", np.max(np.abs(combine_partials(parts) - ref)))

# a binary tree needs ceil(log2 p) rounds
for p in (1, 2, 5, 8, 33):
    total, rounds = tree_reduce(list(range(p)), operator.add, 0)
    print(f"p={p:>2}: sum={total:>3}, rounds={rounds}")

# the same allreduce as three schedules on 2 nodes of 4 GPUs
for strategy in Strategy:
    sched = build_allreduce_schedule(strategy, nodes=2, gpus_per_node=4)
    phases = {ph: sched.count(ph) for ph in dict.fromkeys(sched.phases)}
    print(f"{strategy.value:>4}: {sched.n_rounds} rounds {phases}")
