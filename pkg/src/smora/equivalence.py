"""Numerical check that a multi-LoRA mixture collapses into one blockwise LoRA.

Stacking the expert down-projections row-wise and up-projections column-wise
gives a single factor pair whose ranks, gated blockwise by the expanded
per-expert gates, reproduce the mixture output exactly. Both sides are
evaluated by independent code paths so the comparison is a genuine oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import LoraParams
from .numerics import child_rng, dense_matmul, softmax, top_k_indices

__all__ = [
    "BlockwiseLora",
    "concat_experts",
    "split_blockwise",
    "expand_gates",
    "check_equivalence",
    "run_equivalence_suite",
    "EquivalenceReport",
]


@dataclass
class BlockwiseLora:
    """Row-stacked A factors and column-stacked B factors of n experts."""

    a_tilde: np.ndarray  # (R, d_in)
    b_tilde: np.ndarray  # (d_out, R)
    block_ranks: list[int]

    def __post_init__(self) -> None:
        r_total = int(sum(self.block_ranks))
        if self.a_tilde.shape[0] != r_total or self.b_tilde.shape[1] != r_total:
            raise ValueError("block_ranks inconsistent with stacked shapes")


def concat_experts(experts: list[LoraParams]) -> BlockwiseLora:
    """Stack expert factors so that a_tilde maps d_in -> R and b_tilde maps R -> d_out."""
    if not experts:
        raise ValueError("need at least one expert")
    d_in, d_out = experts[0].d_in, experts[0].d_out
    for e in experts:
        if (e.d_in, e.d_out) != (d_in, d_out):
            raise ValueError("experts must share d_in and d_out")
    return BlockwiseLora(
        a_tilde=np.vstack([e.a for e in experts]),
        b_tilde=np.hstack([e.b for e in experts]),
        block_ranks=[e.rank for e in experts],
    )


def split_blockwise(bw: BlockwiseLora) -> list[LoraParams]:
    """Inverse of concat_experts."""
    experts = []
    start = 0
    for r in bw.block_ranks:
        experts.append(
            LoraParams(a=bw.a_tilde[start : start + r].copy(), b=bw.b_tilde[:, start : start + r].copy())
        )
        start += r
    return experts


def expand_gates(gates: np.ndarray, block_ranks: list[int]) -> np.ndarray:
    """Repeat each expert gate across its block of ranks."""
    gates = np.asarray(gates, dtype=np.float64)
    if gates.ndim != 1 or gates.size != len(block_ranks):
        raise ValueError("one gate per block required")
    return np.repeat(gates, block_ranks)


def check_equivalence(
    experts: list[LoraParams],
    gates: np.ndarray,
    w0: np.ndarray,
    x: np.ndarray,
) -> float:
    """Max absolute difference between the mixture and its blockwise form.

    Left side: per-expert forwards summed. Right side: stacked factors with an
    explicitly materialized diagonal gate, evaluated by dense products.
    """
    gates = np.asarray(gates, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    lhs = w0 @ x
    for gi, e in zip(gates, experts):
        lhs = lhs + gi * (e.b @ (e.a @ x))

    bw = concat_experts(experts)
    g_diag = np.diag(expand_gates(gates, bw.block_ranks))
    delta = dense_matmul(dense_matmul(bw.b_tilde, g_diag), bw.a_tilde)
    rhs = w0 @ x + delta @ x
    return float(np.max(np.abs(lhs - rhs)))


@dataclass
class EquivalenceReport:
    trials: int
    max_diff: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_diff <= self.tolerance


def run_equivalence_suite(
    trials: int,
    max_experts: int = 8,
    max_rank: int = 8,
    max_dim: int = 32,
    seed: int = 0,
    tolerance: float = 1e-10,
) -> EquivalenceReport:
    """Randomized trials over sizes, gate styles (soft / hard top-k / one-hot /
    partly zero) and heterogeneous per-expert ranks."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = child_rng(seed, "equivalence")
    worst = 0.0
    for trial in range(trials):
        n = int(rng.integers(1, max_experts + 1))
        d = int(rng.integers(2, max_dim + 1))
        experts = []
        for _ in range(n):
            r_i = int(rng.integers(1, max_rank + 1))
            experts.append(
                LoraParams(a=rng.standard_normal((r_i, d)), b=rng.standard_normal((d, r_i)))
            )
        w0 = rng.standard_normal((d, d))
        x = rng.standard_normal(d)
        style = trial % 4
        scores = rng.standard_normal(n)
        if style == 0:  # soft
            gates = softmax(scores)
        elif style == 1:  # hard top-k
            m = int(rng.integers(1, n + 1))
            sel = top_k_indices(scores, m)
            gates = np.zeros(n)
            gates[sel] = softmax(scores[sel])
        elif style == 2:  # one-hot
            gates = np.zeros(n)
            gates[int(rng.integers(n))] = 1.0
        else:  # arbitrary in [0, 1] with zeros mixed in
            gates = rng.random(n) * (rng.random(n) > 0.3)
        worst = max(worst, check_equivalence(experts, gates, w0, x))
    return EquivalenceReport(trials=trials, max_diff=worst, tolerance=tolerance)
