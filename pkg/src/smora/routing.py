"""Token-to-rank routing: biased top-k gating, loss-free balancing, load stats.

The router scores every rank with a learned projection, optionally shifted by
a non-trainable balancing bias. The bias only influences *which* ranks are
selected; by default the mixing weights are the softmax of the unbiased scores
at the selected ranks (``bias_in_weights=True`` switches to the literal
"softmax over biased scores" behavior). The bias is never touched by gradient
descent; it moves by a fixed step ``u * sign(mean_load - load)`` once per
training step, which is the whole load-balancing mechanism.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import kaiming_init, softmax, top_k_indices

__all__ = [
    "RouterParams",
    "GateDecision",
    "RoutingStats",
    "init_router",
    "gate",
    "update_bias",
    "accumulate_stats",
    "counts_from_indices",
    "max_vio",
]


@dataclass
class RouterParams:
    """Learned gating projection plus the non-trainable balancing state."""

    w_g: np.ndarray  # (r, d) trainable
    bias: np.ndarray  # (r,) balancing only, excluded from gradient descent
    update_rate: float = 1e-5

    def __post_init__(self) -> None:
        self.w_g = np.asarray(self.w_g, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.w_g.ndim != 2:
            raise ValueError("w_g must be a (r, d) matrix")
        if self.bias.shape != (self.w_g.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} != ({self.w_g.shape[0]},)")
        if not np.all(np.isfinite(self.bias)):
            raise ValueError("bias must be finite")
        if not self.update_rate > 0:
            raise ValueError("update_rate must be > 0")

    @property
    def r(self) -> int:
        return self.w_g.shape[0]

    @property
    def d(self) -> int:
        return self.w_g.shape[1]


@dataclass(frozen=True)
class GateDecision:
    """Selected rank indices (ascending) and their normalized mixing weights."""

    indices: np.ndarray  # (k,) int, strictly increasing
    weights: np.ndarray  # (k,) float, nonnegative, sums to 1


@dataclass
class RoutingStats:
    """Per-rank token assignment counts over some window of decisions."""

    counts: np.ndarray  # (r,) int64
    total_tokens: int

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1:
            raise ValueError("counts must be a 1-d vector")
        if np.any(self.counts < 0) or self.total_tokens < 0:
            raise ValueError("counts and total_tokens must be nonnegative")

    def merge(self, other: "RoutingStats") -> "RoutingStats":
        if other.counts.shape != self.counts.shape:
            raise ValueError("cannot merge stats of different sizes")
        return RoutingStats(self.counts + other.counts, self.total_tokens + other.total_tokens)

    def to_json(self) -> dict:
        return {
            "counts": [int(c) for c in self.counts],
            "total_tokens": int(self.total_tokens),
            "max_vio": max_vio(self) if self.total_tokens > 0 else None,
        }


def init_router(
    r: int,
    d: int,
    rng: np.random.Generator,
    update_rate: float = 1e-5,
    skew: float = 0.0,
) -> RouterParams:
    """Kaiming-initialized projection, zero bias.

    ``skew`` > 0 rescales the score rows by exp(linspace(-skew/2, skew/2)) so
    that high-index ranks start out systematically louder; used by the
    load-balance ablation to create an unbalanced starting point.
    """
    w_g = kaiming_init(r, d, rng)
    if skew != 0.0:
        w_g *= np.exp(np.linspace(-skew / 2.0, skew / 2.0, r))[:, None]
    return RouterParams(w_g=w_g, bias=np.zeros(r), update_rate=update_rate)


def gate(
    router: RouterParams,
    x: np.ndarray,
    k: int,
    bias_in_weights: bool = False,
) -> GateDecision:
    """Select the top-k ranks by biased score and weight them by softmax.

    Selection always uses ``w_g @ x + bias``. The retained scores fed to the
    softmax are the unbiased ``w_g @ x`` unless ``bias_in_weights`` is set.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (router.d,):
        raise ValueError(f"x shape {x.shape} != ({router.d},)")
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    scores = router.w_g @ x
    selection = scores + router.bias
    idx = top_k_indices(selection, k)  # validates 1 <= k <= r
    retained = selection[idx] if bias_in_weights else scores[idx]
    return GateDecision(indices=idx, weights=softmax(retained))


def update_bias(router: RouterParams, stats: RoutingStats) -> np.ndarray:
    """One loss-free balancing step: bias += u * sign(mean_count - count).

    sign(0) is 0, so perfectly balanced ranks are left alone. Mutates the
    router and returns the new bias.
    """
    if stats.counts.shape != (router.r,):
        raise ValueError(f"stats for {stats.counts.shape[0]} ranks, router has {router.r}")
    if stats.counts.size == 0:
        raise ValueError("empty stats")
    err = stats.counts.mean() - stats.counts
    router.bias = router.bias + router.update_rate * np.sign(err)
    return router.bias


def accumulate_stats(decisions, r: int) -> RoutingStats:
    """Count how many decisions selected each rank. Associative under merge."""
    counts = np.zeros(r, dtype=np.int64)
    n = 0
    for dec in decisions:
        idx = np.asarray(dec.indices)
        if idx.size and idx.max() >= r:
            raise ValueError(f"rank index {int(idx.max())} out of range for r={r}")
        np.add.at(counts, idx, 1)
        n += 1
    return RoutingStats(counts=counts, total_tokens=n)


def counts_from_indices(idx: np.ndarray, r: int) -> RoutingStats:
    """Batched form of accumulate_stats for a (t, k) index table."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= r):
        raise ValueError("index out of range")
    counts = np.bincount(idx.ravel(), minlength=r).astype(np.int64)
    return RoutingStats(counts=counts, total_tokens=idx.shape[0] if idx.ndim == 2 else 0)


def max_vio(stats: RoutingStats) -> float:
    """Maximal load violation (max_count - mean_count) / mean_count."""
    if stats.total_tokens <= 0:
        raise ValueError("max_vio needs at least one routed token")
    c = stats.counts.astype(np.float64)
    cbar = c.mean()
    return float((c.max() - cbar) / cbar)
