"""Exact tree-reduction attention decoding and a two-tier cluster cost model."""

from .attention import (
    SoftmaxPartial,
    attention_chunk_partial,
    attention_naive,
    attention_online,
    chunk_sizes,
    combine_partials,
    merge_partials,
)
from .cluster import (
    CostAccount,
    LinkParams,
    Topology,
    comm_volume_formula,
    load_topology,
    p2p_cost,
    peak_memory_formula,
    simulate_schedule,
)
from .decode import (
    ComputeModel,
    DecodeResult,
    ShardedKVCache,
    overlap_feasibility,
    ring_decode,
    shard_kv,
    tree_decode,
)
from .energy import (
    EnergyEval,
    energy,
    energy_forward_parallel,
    energy_grad_parallel,
    energy_total_causal,
    gamma_log_likelihood,
    grad_energy_wrt_source,
    moment_via_source,
    partition_with_source,
)
from .numerics import DType, logsumexp, lse_combine, round_to_dtype, seeded_random_tensor
from .reduction import (
    ReductionSchedule,
    Strategy,
    complexity_model,
    hierarchical_allreduce,
    ring_allreduce,
    tree_reduce,
)

__version__ = "0.1.0"
