"""Rank-wise sparsely activated low-rank adapters.

One LoRA whose individual ranks are top-k routed experts, together with
loss-free load balancing, the indexed sparse-matmul kernels behind it, the
usual multi-LoRA mixture baselines, the blockwise-equivalence check, and a
desk-scale multi-task training/analysis harness.
"""

from .adapter import (
    ForwardCache,
    Grads,
    LoraParams,
    SmoraLayer,
    count_params,
    lora_forward,
    smora_backward,
    smora_forward,
    smora_forward_dense_oracle,
)
from .baselines import (
    HydraParams,
    MoeLoraParams,
    MosloraParams,
    gumbel_gate,
    hydra_forward,
    moe_forward,
    moslora_forward,
    smear_forward,
    smear_merge,
)
from .equivalence import (
    BlockwiseLora,
    check_equivalence,
    concat_experts,
    expand_gates,
    run_equivalence_suite,
)
from .kernels import (
    BenchConfig,
    IndexBatch,
    KernelReport,
    bench_kernels,
    indexed_cols_accumulate,
    indexed_gated_delta,
    indexed_rows_matmul,
    oracle_loop_per_expert,
)
from .numerics import (
    child_rng,
    child_seed,
    dense_matmul,
    kaiming_init,
    make_rng,
    softmax,
    top_k_indices,
)
from .routing import (
    GateDecision,
    RouterParams,
    RoutingStats,
    accumulate_stats,
    gate,
    init_router,
    max_vio,
    update_bias,
)
from .training import (
    RunMetrics,
    TaskGenSpec,
    TaskSuite,
    TrainConfig,
    TrainingDiverged,
    default_suite,
    enumerate_granularity_configs,
    evaluate,
    gen_multitask_data,
    granularity_sweep,
    rank_ablation,
    train_adapter,
)

__version__ = "0.1.0"
