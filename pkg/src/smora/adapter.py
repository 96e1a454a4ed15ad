"""Vanilla LoRA and the rank-wise sparsely activated layer built on top of it.

The sparse layer keeps one low-rank factor pair (A, B) like plain LoRA but
treats every rank as an expert: a router picks k of the r ranks per token and
only those rows of A / columns of B participate. The backward pass is written
out by hand; gradients reach only the selected ranks (hard top-k, no
straight-through relaxation) and never reach the balancing bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import dense_matmul, kaiming_init
from .routing import GateDecision, RouterParams, gate, init_router

__all__ = [
    "LoraParams",
    "SmoraLayer",
    "ForwardCache",
    "Grads",
    "lora_forward",
    "smora_forward",
    "smora_forward_dense_oracle",
    "smora_backward",
    "count_params",
]


@dataclass
class LoraParams:
    """Low-rank update factors: delta = scaling * b @ a."""

    a: np.ndarray  # (r, d_in)
    b: np.ndarray  # (d_out, r)
    scaling: float = 1.0

    def __post_init__(self) -> None:
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.a.ndim != 2 or self.b.ndim != 2:
            raise ValueError("a and b must be matrices")
        if self.a.shape[0] != self.b.shape[1]:
            raise ValueError(f"rank mismatch: a is {self.a.shape}, b is {self.b.shape}")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def d_in(self) -> int:
        return self.a.shape[1]

    @property
    def d_out(self) -> int:
        return self.b.shape[0]

    @classmethod
    def init(
        cls,
        rank: int,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        scaling: float = 1.0,
    ) -> "LoraParams":
        # A: Kaiming, B: zero, so the first forward equals the frozen model.
        return cls(a=kaiming_init(rank, d_in, rng), b=np.zeros((d_out, rank)), scaling=scaling)


@dataclass
class SmoraLayer:
    """Frozen base weight + rank-wise gated low-rank adapter."""

    w0: np.ndarray  # (d_out, d_in), frozen
    lora: LoraParams
    router: RouterParams
    k: int
    bias_in_weights: bool = False

    def __post_init__(self) -> None:
        self.w0 = np.asarray(self.w0, dtype=np.float64)
        if self.w0.shape != (self.lora.d_out, self.lora.d_in):
            raise ValueError(f"w0 shape {self.w0.shape} != ({self.lora.d_out}, {self.lora.d_in})")
        if self.router.w_g.shape != (self.lora.rank, self.lora.d_in):
            raise ValueError("router shape does not match (rank, d_in)")
        if not 1 <= self.k <= self.lora.rank:
            raise ValueError(f"k={self.k} out of range for rank {self.lora.rank}")

    @property
    def rank(self) -> int:
        return self.lora.rank

    @classmethod
    def init(
        cls,
        d_in: int,
        d_out: int,
        r: int,
        k: int,
        rng: np.random.Generator,
        w0: np.ndarray | None = None,
        scaling: float = 1.0,
        update_rate: float = 1e-5,
        bias_in_weights: bool = False,
        router_skew: float = 0.0,
    ) -> "SmoraLayer":
        if w0 is None:
            w0 = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_out, d_in))
        lora = LoraParams.init(r, d_in, d_out, rng, scaling=scaling)
        router = init_router(r, d_in, rng, update_rate=update_rate, skew=router_skew)
        return cls(w0=w0, lora=lora, router=router, k=k, bias_in_weights=bias_in_weights)


@dataclass
class ForwardCache:
    """Everything the backward pass needs for one token."""

    x: np.ndarray
    decision: GateDecision
    h: np.ndarray  # (k,) selected-row products A[sel] @ x
    h_gated: np.ndarray  # (k,) weights * h
    scores: np.ndarray  # (k,) retained pre-softmax scores


@dataclass
class Grads:
    """Full-shaped gradients; rows/cols of unselected ranks are exactly zero."""

    d_a: np.ndarray  # (r, d_in)
    d_b: np.ndarray  # (d_out, r)
    d_wg: np.ndarray  # (r, d_in)
    d_x: np.ndarray  # (d_in,)


def lora_forward(w0: np.ndarray, lora: LoraParams, x: np.ndarray) -> np.ndarray:
    """y = w0 @ x + scaling * b @ (a @ x)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (lora.d_in,):
        raise ValueError(f"x shape {x.shape} != ({lora.d_in},)")
    if w0.shape != (lora.d_out, lora.d_in):
        raise ValueError("w0 shape mismatch")
    h = lora.a @ x
    return w0 @ x + lora.scaling * (lora.b @ h)


def smora_forward(
    layer: SmoraLayer,
    x: np.ndarray,
    bypass_gate: bool = False,
) -> tuple[np.ndarray, ForwardCache]:
    """Route, then combine only the selected ranks.

    ``bypass_gate`` replaces the routing decision with the identity gate
    (every rank selected, weight 1), which reduces the layer to plain LoRA.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layer.lora.d_in,):
        raise ValueError(f"x shape {x.shape} != ({layer.lora.d_in},)")
    r = layer.rank
    if bypass_gate:
        # identity gate: every rank active at weight one, no selection applied
        dec = GateDecision(indices=np.arange(r), weights=np.ones(r))
        h = layer.lora.a @ x
        h_gated = dec.weights * h
        y = layer.w0 @ x + layer.lora.scaling * (layer.lora.b @ h_gated)
        return y, ForwardCache(x=x, decision=dec, h=h, h_gated=h_gated, scores=layer.router.w_g @ x)
    dec = gate(layer.router, x, layer.k, layer.bias_in_weights)
    scores = layer.router.w_g[dec.indices] @ x
    if layer.bias_in_weights:
        scores = scores + layer.router.bias[dec.indices]
    sel = dec.indices
    h = layer.lora.a[sel] @ x
    h_gated = dec.weights * h
    y = layer.w0 @ x + layer.lora.scaling * (layer.lora.b[:, sel] @ h_gated)
    return y, ForwardCache(x=x, decision=dec, h=h, h_gated=h_gated, scores=scores)


def smora_forward_dense_oracle(layer: SmoraLayer, x: np.ndarray) -> np.ndarray:
    """Reference path: materialize the full diagonal gate and multiply densely."""
    x = np.asarray(x, dtype=np.float64)
    dec = gate(layer.router, x, layer.k, layer.bias_in_weights)
    g_full = np.zeros(layer.rank)
    g_full[dec.indices] = dec.weights
    delta = dense_matmul(dense_matmul(layer.lora.b, np.diag(g_full)), layer.lora.a)
    return layer.w0 @ x + layer.lora.scaling * (delta @ x)


def smora_backward(layer: SmoraLayer, cache: ForwardCache, dy: np.ndarray) -> Grads:
    """Chain rule through the gated forward for one token.

    Gradient reaches A rows, B columns and router rows of the selected ranks
    only; the balancing bias gets none by construction.
    """
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != (layer.lora.d_out,):
        raise ValueError(f"dy shape {dy.shape} != ({layer.lora.d_out},)")
    sel = cache.decision.indices
    if sel.size and sel.max() >= layer.rank:
        raise ValueError("cache does not match layer")
    g = cache.decision.weights
    h = cache.h
    x = cache.x
    scl = layer.lora.scaling

    d_a = np.zeros_like(layer.lora.a)
    d_b = np.zeros_like(layer.lora.b)
    d_wg = np.zeros_like(layer.router.w_g)

    d_b[:, sel] = scl * np.outer(dy, cache.h_gated)
    d_hp = scl * (layer.lora.b[:, sel].T @ dy)  # dL/d(g*h)
    d_g = d_hp * h
    d_h = d_hp * g
    d_a[sel] = np.outer(d_h, x)
    d_s = g * (d_g - np.dot(d_g, g))  # softmax Jacobian over retained scores
    d_wg[sel] = np.outer(d_s, x)
    d_x = layer.w0.T @ dy + layer.lora.a[sel].T @ d_h + layer.router.w_g[sel].T @ d_s
    return Grads(d_a=d_a, d_b=d_b, d_wg=d_wg, d_x=d_x)


def count_params(obj) -> dict:
    """Parameter accounting: total / trainable / active per token.

    The frozen base weight is excluded everywhere (it is common to all
    methods); the router projection and balancing bias count as active on
    every token because every token is scored against all ranks.
    """
    from . import baselines  # late import, baselines depends on this module

    if isinstance(obj, SmoraLayer):
        r, d_in, d_out, k = obj.rank, obj.lora.d_in, obj.lora.d_out, obj.k
        router = r * d_in + r
        total = r * (d_in + d_out) + router
        return {
            "total": total,
            "trainable": r * (d_in + d_out) + r * d_in,
            "active_per_token": k * (d_in + d_out) + router,
        }
    if isinstance(obj, LoraParams):
        n = obj.rank * (obj.d_in + obj.d_out)
        return {"total": n, "trainable": n, "active_per_token": n}
    if isinstance(obj, baselines.MoeLoraParams):
        router = obj.n * obj.d_in
        adapter = sum(e.rank * (e.d_in + e.d_out) for e in obj.experts)
        if obj.mode == "topk":
            active_experts = sorted(obj.experts, key=lambda e: e.rank, reverse=True)[: obj.top_m]
            active = sum(e.rank * (e.d_in + e.d_out) for e in active_experts)
        elif obj.mode == "gumbel_top1":
            active = max(e.rank * (e.d_in + e.d_out) for e in obj.experts)
        else:  # soft: every expert contributes
            active = adapter
        return {
            "total": adapter + router,
            "trainable": adapter + router,
            "active_per_token": active + router,
        }
    if isinstance(obj, baselines.HydraParams):
        r, d_in = obj.shared_a.shape
        d_out = obj.bs[0].shape[0]
        n = len(obj.bs)
        total = r * d_in + n * d_out * r + n * d_in
        return {"total": total, "trainable": total, "active_per_token": total}
    if isinstance(obj, baselines.MosloraParams):
        r = obj.lora.rank
        total = obj.lora.rank * (obj.lora.d_in + obj.lora.d_out) + r * r
        return {"total": total, "trainable": total, "active_per_token": total}
    raise TypeError(f"cannot count parameters of {type(obj).__name__}")
