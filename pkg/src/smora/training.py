"""Desk-scale supervised training on synthetic heterogeneous multi-task data.

Teachers share one frozen base weight; each task adds its own low-rank delta,
with a configurable fraction of the delta factors shared across tasks. The
model is the same frozen base plus a trainable adapter (plain LoRA, the
rank-wise sparse layer, or a top-k / soft expert mixture), trained with
minibatch SGD (optionally Adam) on mean squared error. Routed adapters record
per-step load statistics and, when balancing is on, take one bias step per
accumulation window (one training step by default).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .adapter import LoraParams, SmoraLayer
from .kernels import IndexBatch, indexed_cols_accumulate, indexed_rows_matmul
from .numerics import child_rng, kaiming_init, softmax_rows, top_k_rows
from .routing import RoutingStats, max_vio, update_bias

__all__ = [
    "TaskGenSpec",
    "Task",
    "TaskSuite",
    "TrainConfig",
    "RunMetrics",
    "TrainingDiverged",
    "EvalResult",
    "gen_multitask_data",
    "default_suite",
    "build_model",
    "train_adapter",
    "evaluate",
    "enumerate_granularity_configs",
    "granularity_sweep",
    "rank_ablation",
    "SweepRow",
    "AblationRow",
    "write_sweep_csv",
    "write_ablation_csv",
]

TRAINABLE_KINDS = ("lora", "smora", "moe_soft", "moe_topk")


class TrainingDiverged(RuntimeError):
    pass


# --- synthetic multi-task data -------------------------------------------------


@dataclass
class TaskGenSpec:
    m: int = 8
    d_in: int = 32
    d_out: int = 32
    teacher_rank: int = 6
    shared_fraction: float = 0.25
    noise_std: float = 0.02
    train_per_task: int = 256
    eval_per_task: int = 128
    # Inputs of task m are N(mu_m, I) with |mu_m| = task_mean_scale: tokens
    # carry a task signature the router can learn, like domain-specific tokens
    # in real heterogeneous corpora. 0 makes tasks indistinguishable.
    task_mean_scale: float = 3.0

    def __post_init__(self) -> None:
        if self.m < 1 or self.teacher_rank < 1:
            raise ValueError("need m >= 1 and teacher_rank >= 1")
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise ValueError("shared_fraction must lie in [0, 1]")
        if self.noise_std < 0 or self.task_mean_scale < 0:
            raise ValueError("noise_std and task_mean_scale must be >= 0")
        if self.train_per_task < 1 or self.eval_per_task < 1:
            raise ValueError("every task needs at least one train and eval sample")


@dataclass
class Task:
    task_id: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    delta: np.ndarray  # (d_out, d_in) teacher update for this task


@dataclass
class TaskSuite:
    spec: TaskGenSpec
    w0: np.ndarray  # frozen base shared by all teachers
    tasks: list[Task]

    def train_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        xs = np.concatenate([t.x_train for t in self.tasks])
        ys = np.concatenate([t.y_train for t in self.tasks])
        ids = np.concatenate(
            [np.full(len(t.x_train), t.task_id, dtype=np.int64) for t in self.tasks]
        )
        return xs, ys, ids

    def eval_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        xs = np.concatenate([t.x_eval for t in self.tasks])
        ys = np.concatenate([t.y_eval for t in self.tasks])
        ids = np.concatenate(
            [np.full(len(t.x_eval), t.task_id, dtype=np.int64) for t in self.tasks]
        )
        return xs, ys, ids


def gen_multitask_data(spec: TaskGenSpec, rng: np.random.Generator) -> TaskSuite:
    """Deterministic per rng seed; the shared-factor split is exact."""
    rho = spec.teacher_rank
    n_shared = int(round(spec.shared_fraction * rho))
    w0 = rng.normal(0.0, 1.0 / np.sqrt(spec.d_in), size=(spec.d_out, spec.d_in))
    u_shared = rng.normal(0.0, 1.0 / np.sqrt(rho), size=(spec.d_out, n_shared))
    v_shared = rng.normal(0.0, 1.0 / np.sqrt(spec.d_in), size=(n_shared, spec.d_in))
    tasks = []
    for task_id in range(spec.m):
        direction = rng.standard_normal(spec.d_in)
        mu = spec.task_mean_scale * direction / np.linalg.norm(direction)
        u_priv = rng.normal(0.0, 1.0 / np.sqrt(rho), size=(spec.d_out, rho - n_shared))
        v_priv = rng.normal(0.0, 1.0 / np.sqrt(spec.d_in), size=(rho - n_shared, spec.d_in))
        u = np.hstack([u_shared, u_priv])
        v = np.vstack([v_shared, v_priv])
        delta = u @ v
        teacher = w0 + delta

        def draw(n: int) -> tuple[np.ndarray, np.ndarray]:
            x = mu + rng.standard_normal((n, spec.d_in))
            y = x @ teacher.T
            if spec.noise_std > 0:
                y = y + spec.noise_std * rng.standard_normal((n, spec.d_out))
            return x, y

        x_tr, y_tr = draw(spec.train_per_task)
        x_ev, y_ev = draw(spec.eval_per_task)
        tasks.append(
            Task(task_id=task_id, x_train=x_tr, y_train=y_tr, x_eval=x_ev, y_eval=y_ev, delta=delta)
        )
    return TaskSuite(spec=spec, w0=w0, tasks=tasks)


def default_suite(seed: int = 0, **overrides) -> TaskSuite:
    """The default 8-task heterogeneous suite used by the ablation harnesses."""
    spec = TaskGenSpec(**overrides)
    return gen_multitask_data(spec, child_rng(seed, "suite"))


# --- configuration and metrics ---------------------------------------------------


@dataclass
class TrainConfig:
    adapter: str = "smora"
    r: int = 64
    k: int = 8
    n_experts: int = 8
    expert_rank: int = 8
    top_m: int = 2
    scaling: float = 1.0
    balancing: bool = False
    update_rate: float = 1e-2  # bias step sized for desk-scale score magnitudes
    balance_every: int = 1  # bias update cadence, in steps; stats reset after each update
    bias_in_weights: bool = False
    router_skew: float = 0.0
    lr: float = 0.1
    steps: int = 1000
    batch_size: int = 64
    optimizer: str = "sgd"
    seed: int = 0
    arch: str = "linear"
    hidden_dim: int = 0  # 0: use max(d_in, d_out) for the mlp arch

    def __post_init__(self) -> None:
        if self.adapter not in TRAINABLE_KINDS:
            raise ValueError(f"adapter must be one of {TRAINABLE_KINDS}")
        if self.lr < 0 or self.steps < 1 or self.batch_size < 1:
            raise ValueError("lr must be >= 0, steps and batch_size positive")
        if self.adapter == "smora" and not 1 <= self.k <= self.r:
            raise ValueError(f"k={self.k} out of range for r={self.r}")
        if self.adapter == "moe_topk" and not 1 <= self.top_m <= self.n_experts:
            raise ValueError(f"top_m={self.top_m} out of range for n={self.n_experts}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.arch not in ("linear", "mlp"):
            raise ValueError("arch must be 'linear' or 'mlp'")
        if self.update_rate <= 0:
            raise ValueError("update_rate must be > 0")
        if self.balance_every < 1:
            raise ValueError("balance_every must be >= 1")


@dataclass
class RunMetrics:
    losses: list[float]
    max_vio_history: list[float]
    counts_history: list[list[int]]
    per_task_mse: list[float]
    avg_mse: float
    final_counts: list[int] | None
    final_max_vio: float | None

    def to_json(self) -> dict:
        return asdict(self)

    def to_json_str(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)


@dataclass
class EvalResult:
    per_task: list[float]
    avg: float


# --- trainable adapter units ------------------------------------------------------
#
# Each unit is one adapted linear layer exposing a batched forward/backward;
# parameters live in a name -> array dict so one optimizer serves all kinds.
# The frozen base weight is never part of that dict.


class LoraUnit:
    kind = "lora"
    routed = False

    def __init__(self, w0: np.ndarray, lora: LoraParams):
        self.w0 = w0
        self.lora = lora

    @classmethod
    def init(cls, w0, cfg: TrainConfig, rng, rank=None):
        r = cfg.r if rank is None else rank
        return cls(w0, LoraParams.init(r, w0.shape[1], w0.shape[0], rng, scaling=cfg.scaling))

    def params(self) -> dict:
        return {"a": self.lora.a, "b": self.lora.b}

    def forward_batch(self, x):
        h = x @ self.lora.a.T
        y = x @ self.w0.T + self.lora.scaling * (h @ self.lora.b.T)
        return y, {"x": x, "h": h}

    def backward_batch(self, cache, dy):
        x, h = cache["x"], cache["h"]
        scl = self.lora.scaling
        db_h = dy @ self.lora.b  # (B, r)
        grads = {
            "a": scl * (db_h.T @ x),
            "b": scl * (dy.T @ h),
        }
        dx = dy @ self.w0 + scl * (db_h @ self.lora.a)
        return grads, dx

    def predict(self, x):
        return self.forward_batch(x)[0]


class SmoraUnit:
    kind = "smora"
    routed = True

    def __init__(self, layer: SmoraLayer):
        self.layer = layer

    @classmethod
    def init(cls, w0, cfg: TrainConfig, rng, rank=None, k=None):
        layer = SmoraLayer.init(
            d_in=w0.shape[1],
            d_out=w0.shape[0],
            r=cfg.r if rank is None else rank,
            k=cfg.k if k is None else k,
            rng=rng,
            w0=w0,
            scaling=cfg.scaling,
            update_rate=cfg.update_rate,
            bias_in_weights=cfg.bias_in_weights,
            router_skew=cfg.router_skew,
        )
        return cls(layer)

    def params(self) -> dict:
        return {"a": self.layer.lora.a, "b": self.layer.lora.b, "w_g": self.layer.router.w_g}

    def forward_batch(self, x):
        lyr = self.layer
        s_unbiased = x @ lyr.router.w_g.T
        idx = top_k_rows(s_unbiased + lyr.router.bias, lyr.k)
        retained = s_unbiased + lyr.router.bias if lyr.bias_in_weights else s_unbiased
        w = softmax_rows(np.take_along_axis(retained, idx, axis=1))
        batch = IndexBatch(idx, lyr.rank)
        h = indexed_rows_matmul(x, lyr.lora.a, batch)
        y = x @ lyr.w0.T + lyr.lora.scaling * indexed_cols_accumulate(w * h, lyr.lora.b, batch)
        return y, {"x": x, "idx": idx, "w": w, "h": h}

    def backward_batch(self, cache, dy):
        lyr = self.layer
        x, idx, w, h = cache["x"], cache["idx"], cache["w"], cache["h"]
        scl = lyr.lora.scaling
        b_sel = lyr.lora.b.T[idx]  # (B, k, d_out)
        d_hw = scl * np.einsum("tko,to->tk", b_sel, dy)
        d_g = d_hw * h
        d_h = d_hw * w
        d_s = w * (d_g - (d_g * w).sum(axis=1, keepdims=True))

        d_a = np.zeros_like(lyr.lora.a)
        np.add.at(d_a, idx, d_h[:, :, None] * x[:, None, :])
        d_bt = np.zeros_like(lyr.lora.b.T)
        np.add.at(d_bt, idx, scl * (w * h)[:, :, None] * dy[:, None, :])
        d_wg = np.zeros_like(lyr.router.w_g)
        np.add.at(d_wg, idx, d_s[:, :, None] * x[:, None, :])

        dx = (
            dy @ lyr.w0
            + np.einsum("tk,tkd->td", d_h, lyr.lora.a[idx])
            + np.einsum("tk,tkd->td", d_s, lyr.router.w_g[idx])
        )
        return {"a": d_a, "b": d_bt.T, "w_g": d_wg}, dx

    def predict(self, x):
        return self.forward_batch(x)[0]

    def batch_stats(self, cache) -> RoutingStats:
        counts = np.bincount(cache["idx"].ravel(), minlength=self.layer.rank)
        return RoutingStats(counts=counts.astype(np.int64), total_tokens=cache["idx"].shape[0])

    def balance_step(self, stats: RoutingStats) -> None:
        update_bias(self.layer.router, stats)


class MoeUnit:
    """Expert mixture over rank-`expert_rank` LoRA pairs, soft or top-k gated.

    Stacked expert storage keeps the batched math as plain einsums. The top-k
    mode carries the same selection-only balancing bias as the sparse layer so
    sweep configurations stay comparable.
    """

    routed = True

    def __init__(self, w0, a_stack, b_stack, router, bias, mode, top_m, scaling, update_rate):
        self.w0 = w0
        self.a_stack = a_stack  # (n, re, d_in)
        self.b_stack = b_stack  # (n, d_out, re)
        self.router = router  # (n, d_in)
        self.bias = bias  # (n,) selection-only, non-trainable
        self.mode = mode
        self.top_m = top_m
        self.scaling = scaling
        self.update_rate = update_rate
        self.kind = "moe_soft" if mode == "soft" else "moe_topk"

    @property
    def n(self) -> int:
        return self.a_stack.shape[0]

    @classmethod
    def init(cls, w0, cfg: TrainConfig, rng, n=None, expert_rank=None, top_m=None):
        n = cfg.n_experts if n is None else n
        re_ = cfg.expert_rank if expert_rank is None else expert_rank
        d_out, d_in = w0.shape
        a_stack = np.stack([kaiming_init(re_, d_in, rng) for _ in range(n)])
        b_stack = np.zeros((n, d_out, re_))
        router = kaiming_init(n, d_in, rng)
        if cfg.router_skew != 0.0:
            router *= np.exp(np.linspace(-cfg.router_skew / 2, cfg.router_skew / 2, n))[:, None]
        mode = "soft" if cfg.adapter == "moe_soft" else "topk"
        return cls(
            w0,
            a_stack,
            b_stack,
            router,
            np.zeros(n),
            mode,
            cfg.top_m if top_m is None else top_m,
            cfg.scaling,
            cfg.update_rate,
        )

    def params(self) -> dict:
        return {"a_stack": self.a_stack, "b_stack": self.b_stack, "router": self.router}

    def forward_batch(self, x):
        scores = x @ self.router.T  # (B, n)
        if self.mode == "soft":
            g = softmax_rows(scores)
            sel = None
        else:
            sel = top_k_rows(scores + self.bias, self.top_m)
            w = softmax_rows(np.take_along_axis(scores, sel, axis=1))
            g = np.zeros_like(scores)
            np.put_along_axis(g, sel, w, axis=1)
        h = np.einsum("td,nrd->tnr", x, self.a_stack)
        v = np.einsum("tnr,nor->tno", h, self.b_stack)
        y = x @ self.w0.T + self.scaling * np.einsum("tn,tno->to", g, v)
        return y, {"x": x, "g": g, "h": h, "v": v, "sel": sel}

    def backward_batch(self, cache, dy):
        x, g, h, v, sel = cache["x"], cache["g"], cache["h"], cache["v"], cache["sel"]
        scl = self.scaling
        d_v = scl * g[:, :, None] * dy[:, None, :]
        d_g = scl * np.einsum("to,tno->tn", dy, v)
        d_h = np.einsum("tno,nor->tnr", d_v, self.b_stack)
        grads = {
            "a_stack": np.einsum("tnr,td->nrd", d_h, x),
            "b_stack": np.einsum("tno,tnr->nor", d_v, h),
        }
        if self.mode == "soft":
            d_scores = g * (d_g - (d_g * g).sum(axis=1, keepdims=True))
        else:
            w = np.take_along_axis(g, sel, axis=1)
            d_w = np.take_along_axis(d_g, sel, axis=1)
            d_ret = w * (d_w - (d_w * w).sum(axis=1, keepdims=True))
            d_scores = np.zeros_like(d_g)
            np.put_along_axis(d_scores, sel, d_ret, axis=1)
        grads["router"] = d_scores.T @ x
        dx = dy @ self.w0 + np.einsum("tnr,nrd->td", d_h, self.a_stack) + d_scores @ self.router
        return grads, dx

    def predict(self, x):
        return self.forward_batch(x)[0]

    def batch_stats(self, cache) -> RoutingStats:
        if self.mode == "soft":
            raise ValueError("soft gating has no discrete assignments")
        sel = cache["sel"]
        counts = np.bincount(sel.ravel(), minlength=self.n)
        return RoutingStats(counts=counts.astype(np.int64), total_tokens=sel.shape[0])

    def balance_step(self, stats: RoutingStats) -> None:
        err = stats.counts.mean() - stats.counts
        self.bias = self.bias + self.update_rate * np.sign(err)


class Model:
    """One adapted linear layer, or two of them around a relu."""

    def __init__(self, units, arch: str):
        self.units = units
        self.arch = arch

    def forward_batch(self, x):
        caches = []
        cur = x
        for i, unit in enumerate(self.units):
            cur, cache = unit.forward_batch(cur)
            if self.arch == "mlp" and i < len(self.units) - 1:
                mask = cur > 0
                cur = cur * mask
                cache["relu_mask"] = mask
            caches.append(cache)
        return cur, caches

    def backward_batch(self, caches, dy):
        grads = [None] * len(self.units)
        cur = dy
        for i in range(len(self.units) - 1, -1, -1):
            mask = caches[i].get("relu_mask")
            if mask is not None:
                cur = cur * mask
            grads[i], cur = self.units[i].backward_batch(caches[i], cur)
        return grads

    def predict(self, x):
        return self.forward_batch(x)[0]

    def routed_units(self):
        return [u for u in self.units if u.routed]

    def per_unit_stats(self, caches) -> list:
        """(unit_index, RoutingStats) for every unit with discrete assignments."""
        out = []
        for i, (unit, cache) in enumerate(zip(self.units, caches)):
            if unit.routed and not (isinstance(unit, MoeUnit) and unit.mode == "soft"):
                out.append((i, unit.batch_stats(cache)))
        return out

    def step_stats(self, caches) -> RoutingStats | None:
        stats = None
        for _, s in self.per_unit_stats(caches):
            stats = s if stats is None else stats.merge(s)
        return stats

    def eval_stats(self, x) -> RoutingStats | None:
        _, caches = self.forward_batch(x)
        return self.step_stats(caches)


def _make_unit(w0, cfg: TrainConfig, rng):
    if cfg.adapter == "lora":
        return LoraUnit.init(w0, cfg, rng)
    if cfg.adapter == "smora":
        return SmoraUnit.init(w0, cfg, rng)
    return MoeUnit.init(w0, cfg, rng)


def build_model(suite: TaskSuite, cfg: TrainConfig) -> Model:
    """Adapter around the suite's frozen base (linear) or a random 2-layer stack."""
    rng = child_rng(cfg.seed, "init")
    if cfg.arch == "linear":
        return Model([_make_unit(suite.w0.copy(), cfg, rng)], arch="linear")
    d_in, d_out = suite.spec.d_in, suite.spec.d_out
    hidden = cfg.hidden_dim or max(d_in, d_out)
    w1 = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(hidden, d_in))
    w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(d_out, hidden))
    return Model([_make_unit(w1, cfg, rng), _make_unit(w2, cfg, rng)], arch="mlp")


# --- optimizers -----------------------------------------------------------------


class _Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            params[name] -= self.lr * g


class _Adam:
    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# --- training loop -----------------------------------------------------------------


def train_adapter(suite: TaskSuite, cfg: TrainConfig) -> tuple[Model, RunMetrics]:
    """Minibatch training; the base weight stays frozen throughout.

    Routed adapters log per-step counts and load violation; with balancing on,
    the bias moves once per step from that step's stats and the window resets.
    """
    model = build_model(suite, cfg)
    x_all, y_all, _ = suite.train_arrays()
    batch_rng = child_rng(cfg.seed, "batches")
    optimizers = [
        _Sgd(cfg.lr) if cfg.optimizer == "sgd" else _Adam(cfg.lr) for _ in model.units
    ]

    losses: list[float] = []
    mv_hist: list[float] = []
    counts_hist: list[list[int]] = []
    windows: dict[int, RoutingStats] = {}  # per-unit stats since the last bias update
    for step in range(cfg.steps):
        ids = batch_rng.integers(0, x_all.shape[0], size=cfg.batch_size)
        x, target = x_all[ids], y_all[ids]
        with np.errstate(over="ignore", invalid="ignore"):
            y, caches = model.forward_batch(x)
            err = y - target
            loss = float(np.mean(err * err))
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at step {step}")
        losses.append(loss)
        grads = model.backward_batch(caches, (2.0 / err.size) * err)
        for unit, opt, g in zip(model.units, optimizers, grads):
            opt.step(unit.params(), g)
        unit_stats = model.per_unit_stats(caches)
        if unit_stats:
            merged = unit_stats[0][1]
            for _, s in unit_stats[1:]:
                merged = merged.merge(s)
            counts_hist.append([int(c) for c in merged.counts])
            mv_hist.append(max_vio(merged))
            if cfg.balancing:
                for i, s in unit_stats:
                    windows[i] = windows[i].merge(s) if i in windows else s
                if (step + 1) % cfg.balance_every == 0:
                    for i, s in windows.items():
                        model.units[i].balance_step(s)
                    windows.clear()

    res = evaluate(model, suite)
    x_ev, _, _ = suite.eval_arrays()
    final_stats = model.eval_stats(x_ev)
    metrics = RunMetrics(
        losses=losses,
        max_vio_history=mv_hist,
        counts_history=counts_hist,
        per_task_mse=res.per_task,
        avg_mse=res.avg,
        final_counts=[int(c) for c in final_stats.counts] if final_stats else None,
        final_max_vio=max_vio(final_stats) if final_stats else None,
    )
    return model, metrics


def evaluate(model: Model, suite: TaskSuite) -> EvalResult:
    """Per-task eval MSE plus the macro average. Pure: no parameter mutation."""
    per_task = []
    for task in suite.tasks:
        if task.x_eval.shape[0] == 0:
            raise ValueError(f"task {task.task_id} has no eval samples")
        err = model.predict(task.x_eval) - task.y_eval
        per_task.append(float(np.mean(err * err)))
    return EvalResult(per_task=per_task, avg=float(np.mean(per_task)))


# --- ablation harnesses ---------------------------------------------------------


def enumerate_granularity_configs(r_total: int, r_active: int) -> list[tuple[int, int, int]]:
    """All (expert_rank, expert_count, activate_count) with
    expert_rank * expert_count == r_total and expert_rank * activate_count == r_active."""
    if r_total < 1 or r_active < 1 or r_active > r_total:
        raise ValueError("need 1 <= r_active <= r_total")
    configs = []
    for e in range(1, r_active + 1):
        if r_total % e == 0 and r_active % e == 0:
            n, a = r_total // e, r_active // e
            if a <= n:
                configs.append((e, n, a))
    if not configs:
        raise ValueError("no valid granularity configuration")
    return configs


@dataclass
class SweepRow:
    expert_rank: int
    expert_count: int
    activate_count: int
    seed: int
    avg_mse: float


def granularity_sweep(
    r_total: int,
    r_active: int,
    suite: TaskSuite,
    base_config: TrainConfig,
    seeds=(0, 1, 2, 3, 4),
) -> list[SweepRow]:
    """Train every granularity split of the same total/active rank budget.

    expert_rank 1 is the rank-wise sparse layer; coarser splits are top-k
    expert mixtures. Sorted finest-first.
    """
    rows = []
    for e, n, a in enumerate_granularity_configs(r_total, r_active):
        for seed in seeds:
            if e == 1:
                cfg = replace(base_config, adapter="smora", r=r_total, k=r_active, seed=seed)
            else:
                cfg = replace(
                    base_config,
                    adapter="moe_topk",
                    n_experts=n,
                    expert_rank=e,
                    top_m=a,
                    seed=seed,
                )
            _, metrics = train_adapter(suite, cfg)
            rows.append(SweepRow(e, n, a, seed, metrics.avg_mse))
    return rows


@dataclass
class AblationRow:
    method: str  # "smora" or "lora"
    k: int  # active ranks (smora) / total rank (lora)
    seed: int
    avg_mse: float


def rank_ablation(
    suite: TaskSuite,
    r_total: int,
    k_values,
    base_config: TrainConfig,
    seeds=(0, 1, 2, 3, 4),
) -> list[AblationRow]:
    """Sparse layer at r_total with each k, against plain LoRA at rank k."""
    k_values = sorted(k_values)
    if any(k > r_total or k < 1 for k in k_values):
        raise ValueError("every k must satisfy 1 <= k <= r_total")
    rows = []
    for k in k_values:
        for seed in seeds:
            cfg = replace(base_config, adapter="smora", r=r_total, k=k, seed=seed)
            _, metrics = train_adapter(suite, cfg)
            rows.append(AblationRow("smora", k, seed, metrics.avg_mse))
        for seed in seeds:
            cfg = replace(base_config, adapter="lora", r=k, seed=seed)
            _, metrics = train_adapter(suite, cfg)
            rows.append(AblationRow("lora", k, seed, metrics.avg_mse))
    return rows


def write_sweep_csv(path, rows: list[SweepRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("expert_rank,expert_count,activate_count,seed,avg_mse\n")
        for r in rows:
            fh.write(
                f"{r.expert_rank},{r.expert_count},{r.activate_count},{r.seed},{float(r.avg_mse)!r}\n"
            )


def write_ablation_csv(path, rows: list[AblationRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("method,k,seed,avg_mse\n")
        for r in rows:
            fh.write(f"{r.method},{r.k},{r.seed},{float(r.avg_mse)!r}\n")
