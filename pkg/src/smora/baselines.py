"""Multi-LoRA mixture baselines: soft/Gumbel/top-k routing, SMEAR, HydraLoRA, MoSLoRA.

Each adapter exposes a plain forward plus a cached forward/backward pair.
The backward passes follow the same hand-written chain-rule pattern as the
sparse layer; all of them are validated against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import LoraParams, lora_forward
from .numerics import kaiming_init, softmax, top_k_indices

__all__ = [
    "MoeLoraParams",
    "HydraParams",
    "MosloraParams",
    "moe_forward",
    "moe_forward_cached",
    "moe_backward",
    "gumbel_gate",
    "smear_merge",
    "smear_forward",
    "smear_forward_cached",
    "smear_backward",
    "hydra_forward",
    "hydra_forward_cached",
    "hydra_backward",
    "moslora_forward",
    "moslora_forward_cached",
    "moslora_backward",
]

_MODES = ("soft", "gumbel_top1", "topk")


@dataclass
class MoeLoraParams:
    """n LoRA experts plus a linear router; gating style set by ``mode``."""

    experts: list[LoraParams]
    router: np.ndarray  # (n, d_in)
    mode: str = "soft"
    top_m: int = 2  # for topk
    temperature: float = 1.0  # for gumbel_top1

    def __post_init__(self) -> None:
        if not self.experts:
            raise ValueError("need at least one expert")
        d_in, d_out = self.experts[0].d_in, self.experts[0].d_out
        for e in self.experts:
            if (e.d_in, e.d_out) != (d_in, d_out):
                raise ValueError("experts must share d_in and d_out")
        self.router = np.asarray(self.router, dtype=np.float64)
        if self.router.shape != (len(self.experts), d_in):
            raise ValueError(f"router shape {self.router.shape} != ({len(self.experts)}, {d_in})")
        if self.mode not in _MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "topk" and not 1 <= self.top_m <= len(self.experts):
            raise ValueError(f"top_m={self.top_m} out of range")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    @property
    def n(self) -> int:
        return len(self.experts)

    @property
    def d_in(self) -> int:
        return self.experts[0].d_in

    @property
    def d_out(self) -> int:
        return self.experts[0].d_out

    @classmethod
    def init(
        cls,
        n: int,
        rank: int,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        mode: str = "soft",
        top_m: int = 2,
        temperature: float = 1.0,
    ) -> "MoeLoraParams":
        experts = [LoraParams.init(rank, d_in, d_out, rng) for _ in range(n)]
        return cls(
            experts=experts,
            router=kaiming_init(n, d_in, rng),
            mode=mode,
            top_m=top_m,
            temperature=temperature,
        )


@dataclass
class HydraParams:
    """One shared down-projection A, several task heads B_i, softmax-gated."""

    shared_a: np.ndarray  # (r, d_in)
    bs: list[np.ndarray]  # each (d_out, r)
    router: np.ndarray  # (N, d_in)

    def __post_init__(self) -> None:
        self.shared_a = np.asarray(self.shared_a, dtype=np.float64)
        self.bs = [np.asarray(b, dtype=np.float64) for b in self.bs]
        self.router = np.asarray(self.router, dtype=np.float64)
        if not self.bs:
            raise ValueError("need at least one B matrix")
        r = self.shared_a.shape[0]
        d_out = self.bs[0].shape[0]
        for b in self.bs:
            if b.shape != (d_out, r):
                raise ValueError("all B matrices must share (d_out, r)")
        if self.router.shape != (len(self.bs), self.shared_a.shape[1]):
            raise ValueError("router shape mismatch")

    @classmethod
    def init(cls, n: int, rank: int, d_in: int, d_out: int, rng) -> "HydraParams":
        return cls(
            shared_a=kaiming_init(rank, d_in, rng),
            bs=[np.zeros((d_out, rank)) for _ in range(n)],
            router=kaiming_init(n, d_in, rng),
        )


@dataclass
class MosloraParams:
    """LoRA with a trainable square mixer between the factors."""

    lora: LoraParams
    mixer: np.ndarray  # (r, r)

    def __post_init__(self) -> None:
        self.mixer = np.asarray(self.mixer, dtype=np.float64)
        r = self.lora.rank
        if self.mixer.shape != (r, r):
            raise ValueError(f"mixer must be ({r}, {r})")

    @classmethod
    def init(cls, rank: int, d_in: int, d_out: int, rng) -> "MosloraParams":
        return cls(
            lora=LoraParams.init(rank, d_in, d_out, rng),
            mixer=kaiming_init(rank, rank, rng),
        )


# --- gating -------------------------------------------------------------------


def gumbel_gate(scores: np.ndarray, temperature: float, rng: np.random.Generator) -> np.ndarray:
    """Gumbel-softmax relaxation of discrete expert choice.

    ``scores`` must already be a probability vector (a softmax output); the
    relaxed gates are softmax((log scores + Gumbel noise) / temperature).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("scores must be a non-empty vector")
    if np.any(scores < 0) or abs(scores.sum() - 1.0) > 1e-9:
        raise ValueError("scores must be a probability vector")
    noise = rng.gumbel(0.0, 1.0, size=scores.size)
    with np.errstate(divide="ignore"):  # zero probability -> -inf logit -> zero gate
        logit = np.log(scores)
    return softmax((logit + noise) / temperature)


def _moe_gates(p: MoeLoraParams, x: np.ndarray, rng, hard: bool) -> tuple[np.ndarray, dict]:
    """Dense length-n gate vector plus whatever backward needs to redo the gating."""
    scores = p.router @ x
    aux: dict = {}
    if p.mode == "soft":
        g = softmax(scores)
    elif p.mode == "topk":
        sel = top_k_indices(scores, p.top_m)
        g = np.zeros(p.n)
        g[sel] = softmax(scores[sel])
        aux["sel"] = sel
    elif p.mode == "gumbel_top1":
        probs = softmax(scores)
        if hard:
            g = np.zeros(p.n)
            g[int(np.argmax(probs))] = 1.0
            aux["hard"] = True
        else:
            if rng is None:
                raise ValueError("gumbel_top1 training mode needs an rng")
            noise = rng.gumbel(0.0, 1.0, size=p.n)
            g = softmax((np.log(probs) + noise) / p.temperature)
            aux["probs"] = probs
            aux["noise"] = noise
    else:  # pragma: no cover - rejected at construction
        raise ValueError(p.mode)
    return g, aux


def moe_forward(
    p: MoeLoraParams,
    w0: np.ndarray,
    x: np.ndarray,
    rng: np.random.Generator | None = None,
    hard: bool = False,
) -> np.ndarray:
    y, _ = moe_forward_cached(p, w0, x, rng=rng, hard=hard)
    return y


def moe_forward_cached(
    p: MoeLoraParams,
    w0: np.ndarray,
    x: np.ndarray,
    rng: np.random.Generator | None = None,
    hard: bool = False,
):
    """y = w0 @ x + sum_i g_i * b_i @ (a_i @ x); cache carries per-expert pieces."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.d_in,):
        raise ValueError(f"x shape {x.shape} != ({p.d_in},)")
    g, aux = _moe_gates(p, x, rng, hard)
    hs = [e.a @ x for e in p.experts]
    us = [e.scaling * (e.b @ h) for e, h in zip(p.experts, hs)]
    y = w0 @ x
    for gi, u in zip(g, us):
        y = y + gi * u
    cache = {"x": x, "g": g, "hs": hs, "us": us, "aux": aux}
    return y, cache


def _softmax_vjp(g: np.ndarray, dg: np.ndarray) -> np.ndarray:
    return g * (dg - np.dot(dg, g))


def moe_backward(p: MoeLoraParams, w0: np.ndarray, cache: dict, dy: np.ndarray) -> dict:
    """Gradients for every expert pair, the router, and the input."""
    dy = np.asarray(dy, dtype=np.float64)
    x, g, hs, us = cache["x"], cache["g"], cache["hs"], cache["us"]
    aux = cache["aux"]
    d_as, d_bs = [], []
    d_x = w0.T @ dy
    for e, gi, h in zip(p.experts, g, hs):
        bt_dy = e.b.T @ dy
        d_b = (gi * e.scaling) * np.outer(dy, h)
        d_a = (gi * e.scaling) * np.outer(bt_dy, x)
        d_x = d_x + (gi * e.scaling) * (e.a.T @ bt_dy)
        d_as.append(d_a)
        d_bs.append(d_b)

    d_g = np.array([np.dot(dy, u) for u in us])
    if p.mode == "soft":
        d_scores = _softmax_vjp(g, d_g)
    elif p.mode == "topk":
        sel = aux["sel"]
        d_scores = np.zeros(p.n)
        d_scores[sel] = _softmax_vjp(g[sel], d_g[sel])
    else:  # gumbel_top1
        if aux.get("hard"):
            d_scores = np.zeros(p.n)  # hard argmax blocks the router gradient
        else:
            probs, tau = aux["probs"], p.temperature
            d_z = _softmax_vjp(g, d_g) / tau  # z = (log probs + noise) / tau
            d_probs = d_z / probs
            d_scores = _softmax_vjp(probs, d_probs)
    d_router = np.outer(d_scores, x)
    d_x = d_x + p.router.T @ d_scores
    return {"d_as": d_as, "d_bs": d_bs, "d_router": d_router, "d_x": d_x}


# --- SMEAR ---------------------------------------------------------------------


def smear_merge(experts: list[LoraParams], gates: np.ndarray) -> LoraParams:
    """Parameter-level mixture: one LoRA whose factors are gate-weighted sums."""
    gates = np.asarray(gates, dtype=np.float64)
    if len(experts) != gates.size:
        raise ValueError("one gate per expert required")
    shape_a, shape_b = experts[0].a.shape, experts[0].b.shape
    for e in experts:
        if e.a.shape != shape_a or e.b.shape != shape_b:
            raise ValueError("experts must share shapes")
    a = np.zeros(shape_a)
    b = np.zeros(shape_b)
    for gi, e in zip(gates, experts):
        a += gi * e.a
        b += gi * e.b
    return LoraParams(a=a, b=b, scaling=experts[0].scaling)


def smear_forward(p: MoeLoraParams, w0: np.ndarray, x: np.ndarray) -> np.ndarray:
    y, _ = smear_forward_cached(p, w0, x)
    return y


def smear_forward_cached(p: MoeLoraParams, w0: np.ndarray, x: np.ndarray):
    """Router softmax -> merged parameters -> plain LoRA forward."""
    x = np.asarray(x, dtype=np.float64)
    g = softmax(p.router @ x)
    merged = smear_merge(p.experts, g)
    y = lora_forward(w0, merged, x)
    return y, {"x": x, "g": g, "merged": merged}


def smear_backward(p: MoeLoraParams, w0: np.ndarray, cache: dict, dy: np.ndarray) -> dict:
    dy = np.asarray(dy, dtype=np.float64)
    x, g, merged = cache["x"], cache["g"], cache["merged"]
    scl = merged.scaling
    h = merged.a @ x
    bt_dy = merged.b.T @ dy
    d_b_merged = scl * np.outer(dy, h)
    d_a_merged = scl * np.outer(bt_dy, x)
    d_as = [gi * d_a_merged for gi in g]
    d_bs = [gi * d_b_merged for gi in g]
    # gate gradient collects both factors' sensitivity to the mixture weight
    d_g = np.array(
        [np.sum(d_a_merged * e.a) + np.sum(d_b_merged * e.b) for e in p.experts]
    )
    d_scores = _softmax_vjp(g, d_g)
    d_router = np.outer(d_scores, x)
    d_x = w0.T @ dy + scl * (merged.a.T @ bt_dy) + p.router.T @ d_scores
    return {"d_as": d_as, "d_bs": d_bs, "d_router": d_router, "d_x": d_x}


# --- HydraLoRA -------------------------------------------------------------------


def hydra_forward(p: HydraParams, w0: np.ndarray, x: np.ndarray) -> np.ndarray:
    y, _ = hydra_forward_cached(p, w0, x)
    return y


def hydra_forward_cached(p: HydraParams, w0: np.ndarray, x: np.ndarray):
    """h = A @ x computed once; y = w0 @ x + sum_i g_i * B_i @ h."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.shared_a.shape[1],):
        raise ValueError("x shape mismatch")
    g = softmax(p.router @ x)
    h = p.shared_a @ x
    us = [b @ h for b in p.bs]
    y = w0 @ x
    for gi, u in zip(g, us):
        y = y + gi * u
    return y, {"x": x, "g": g, "h": h, "us": us}


def hydra_backward(p: HydraParams, w0: np.ndarray, cache: dict, dy: np.ndarray) -> dict:
    dy = np.asarray(dy, dtype=np.float64)
    x, g, h, us = cache["x"], cache["g"], cache["h"], cache["us"]
    d_bs = [gi * np.outer(dy, h) for gi in g]
    d_h = np.zeros_like(h)
    for gi, b in zip(g, p.bs):
        d_h += gi * (b.T @ dy)
    d_a = np.outer(d_h, x)
    d_g = np.array([np.dot(dy, u) for u in us])
    d_scores = _softmax_vjp(g, d_g)
    d_router = np.outer(d_scores, x)
    d_x = w0.T @ dy + p.shared_a.T @ d_h + p.router.T @ d_scores
    return {"d_a": d_a, "d_bs": d_bs, "d_router": d_router, "d_x": d_x}


# --- MoSLoRA ---------------------------------------------------------------------


def moslora_forward(p: MosloraParams, w0: np.ndarray, x: np.ndarray) -> np.ndarray:
    y, _ = moslora_forward_cached(p, w0, x)
    return y


def moslora_forward_cached(p: MosloraParams, w0: np.ndarray, x: np.ndarray):
    """y = w0 @ x + scaling * b @ (mixer @ (a @ x))."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.lora.d_in,):
        raise ValueError("x shape mismatch")
    h1 = p.lora.a @ x
    h2 = p.mixer @ h1
    y = w0 @ x + p.lora.scaling * (p.lora.b @ h2)
    return y, {"x": x, "h1": h1, "h2": h2}


def moslora_backward(p: MosloraParams, w0: np.ndarray, cache: dict, dy: np.ndarray) -> dict:
    dy = np.asarray(dy, dtype=np.float64)
    x, h1, h2 = cache["x"], cache["h1"], cache["h2"]
    scl = p.lora.scaling
    d_b = scl * np.outer(dy, h2)
    d_h2 = scl * (p.lora.b.T @ dy)
    d_mixer = np.outer(d_h2, h1)
    d_h1 = p.mixer.T @ d_h2
    d_a = np.outer(d_h1, x)
    d_x = w0.T @ dy + p.lora.a.T @ d_h1
    return {"d_a": d_a, "d_b": d_b, "d_mixer": d_mixer, "d_x": d_x}
