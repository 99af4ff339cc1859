"""
Emulated bf16
=============

All values are stored as float64 and rounded after each operation. bf16 keeps
8 significant bits; scores, softmax statistics and running sums stay in f32.
"""

import numpy as np

from treeattn import DType, Topology, attention_naive, ring_decode, round_to_dtype, seeded_random_tensor, shard_kv, tree_decode

x = np.array([1.0, 1 + 2**-9, 1 + 2**-8, 1 + 3 * 2**-8, 3.14159265, 1e-40, 3.5e38])
print("value          bf16           f32")
for a in x:
    print(f"{a:<14.9g} {round_to_dtype(a, DType.BF16EMU):<14.9g} {round_to_dtype(a, DType.FLOAT32):.9g}")

n, heads, head_dim = 2048, 4, 64
q, k, v = (
    round_to_dtype(seeded_random_tensor((1, heads, rows, head_dim), seed=s, scale=sc), DType.BF16EMU)
    for s, rows, sc in ((0, 1, head_dim**-0.25), (1, n, head_dim**-0.25), (2, n, 1.0))
)
ref = attention_naive(q, k, v)
for dtype in DType:
    topo = Topology(nodes=2, gpus_per_node=8, element_bytes=dtype.itemsize)
    cache = shard_kv(k, v, topo.p)
    tree = tree_decode(q, cache, topo, dtype=dtype).output
    ring = ring_decode(q, cache, topo, dtype=dtype).output
    scale = np.max(np.abs(ref))
    print(f"{dtype.value:>4}: tree rel err {np.max(np.abs(tree - ref)) / scale:.1e}, "
          f"ring rel err {np.max(np.abs(ring - ref)) / scale:.1e}")
