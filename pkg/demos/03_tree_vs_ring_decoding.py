"""
Tree decoding versus ring attention
===================================

The KV cache is split along the sequence across p workers. Tree decoding
computes a local partial on each worker and merges them with two allreduces.
Ring attention passes the k/v chunks around the ring instead. Both are exact;
they differ in what crosses the network and in peak memory.
"""

import numpy as np

from treeattn import Topology, attention_naive, comm_volume_formula, peak_memory_formula
from treeattn import ring_decode, seeded_random_tensor, shard_kv, tree_decode

b, heads, head_dim, n = 1, 16, 128, 4096
q = seeded_random_tensor((b, heads, 1, head_dim), seed=0, scale=head_dim**-0.25)
k = seeded_random_tensor((b, heads, n, head_dim), seed=1, scale=head_dim**-0.25)
v = seeded_random_tensor((b, heads, n, head_dim), seed=2)
ref = attention_naive(q, k, v)

# two nodes of eight GPUs with the default link parameters
topo = Topology(nodes=2, gpus_per_node=8)
cache = shard_kv(k, v, topo.p)
tree = tree_decode(q, cache, topo)
ring = ring_decode(q, cache, topo)
print("tree error:", np.max(np.abs(tree.output - ref)))
print("ring error:", np.max(np.abs(ring.output - ref)))

t, d = n // topo.p, heads * head_dim
print(f"\n{'':>6} {'elements sent':>14} {'peak elements':>14} {'modeled time':>13}")
for name, res in (("tree", tree), ("ring", ring)):
    c = res.cost
    print(f"{name:>6} {c.elems_total:>14} {c.peak_elems_per_worker:>14} {c.sim_time_s:>12.2e}s")

# the counters match the closed forms
print("\nper-worker tree volume:", tree.cost.elems_per_worker, "=", comm_volume_formula("tree", b, t, d, heads, topo.p))
print("ring volume per rotation:", ring.cost.per_round_elems[0], "=", comm_volume_formula("ring", b, t, d, heads, topo.p))
print("tree peak:", peak_memory_formula("tree", b, t, d, heads), " ring peak:", peak_memory_formula("ring", b, t, d, heads))
