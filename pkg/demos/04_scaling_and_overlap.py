"""
How the gap grows with cluster size
===================================

With a fixed chunk per device, ring attention moves every chunk across the
slow inter-node links p - 1 times, while tree decoding exchanges a payload
that does not depend on the sequence length. Times below come from the
latency/bandwidth cost model, not from hardware.
"""

from treeattn import LinkParams, Topology, overlap_feasibility
from treeattn.decode import ring_decode_cost, tree_decode_cost

heads, head_dim, per_device = 16, 128, 80_000

print(f"{'p':>5} {'tree (s)':>10} {'ring (s)':>10} {'ring/tree':>10}")
for nodes in (1, 2, 4, 8, 16):
    topo = Topology(nodes=nodes)
    sizes = [per_device] * topo.p
    tree, _ = tree_decode_cost(1, heads, head_dim, sizes, topo)
    ring = ring_decode_cost(1, heads, head_dim, sizes, topo)
    print(f"{topo.p:>5} {tree.sim_time_s:>10.2e} {ring.sim_time_s:>10.2e} {ring.sim_time_s / tree.sim_time_s:>10.1f}")

# can ring attention hide its transfers behind compute? 640k tokens on 8 GPUs:
feasible, ratio = overlap_feasibility(Topology(), b=1, t=640_000 // 8, d=2048)
print(f"\ncompute/transfer per chunk = {ratio:.3f}, overlap feasible: {feasible}")

# only with links a thousand times faster would it be
base = Topology().intra
fast = Topology(intra=LinkParams(base.latency_s / 1000, base.bandwidth_Bps * 1000))
print("with 1000x bandwidth:", overlap_feasibility(fast, b=1, t=640_000 // 8, d=2048))
