"""Index-selected matrix kernels: the sparse compute path behind rank gating.

Per token the router names k of r rows/columns; these kernels compute only
with those, never materializing a (t, k, d) gather. Three variants of the full
gated low-rank delta exist so they can be checked and raced against each other:

* ``indexed``            - the real kernel: blocked over tokens, parallel, no
                           gathered intermediate.
* ``loop_per_expert``    - per-expert gather/compute/scatter, the style most
                           MoE frameworks use; deliberately allocation-heavy.
* ``dense_materialized`` - gathers full (t, k, d) operand blocks first,
                           einsum style; fast-ish but memory hungry.

Every variant reduces per token in the same fixed order (ascending selection
position, ascending feature), so for identical inputs all three produce
bit-identical outputs at any thread count.
"""

from __future__ import annotations

import hashlib
import os
import time
import warnings
from dataclasses import dataclass

import numpy as np

# Allow oversubscription so thread-count determinism can be exercised on
# small machines; must be set before numba is first imported.
os.environ.setdefault("NUMBA_NUM_THREADS", "16")

# numba falls back to another threading layer automatically; the TBB version
# notice is noise for library users.
warnings.filterwarnings("ignore", message="The TBB threading layer requires TBB version")

import numba
from numba import njit, prange

from .numerics import child_rng, softmax_rows

__all__ = [
    "IndexBatch",
    "AllocTracker",
    "KernelReport",
    "BenchConfig",
    "indexed_rows_matmul",
    "indexed_cols_accumulate",
    "indexed_gated_delta",
    "oracle_loop_per_expert",
    "dense_materialized_delta",
    "bench_kernels",
    "max_threads",
    "warmup",
]

_SUPPORTED_DTYPES = (np.float32, np.float64)


def max_threads() -> int:
    return numba.config.NUMBA_NUM_THREADS


@dataclass
class IndexBatch:
    """Per-token selected indices: a (t, k) table with entries in [0, r).

    Rows may be unsorted and may contain duplicates; bounds are checked once
    here so the kernels can run unchecked.
    """

    idx: np.ndarray
    r: int

    def __post_init__(self) -> None:
        idx = np.ascontiguousarray(self.idx, dtype=np.int64)
        if idx.ndim != 2:
            raise ValueError("idx must be a (t, k) table")
        if idx.size and (idx.min() < 0 or idx.max() >= self.r):
            raise ValueError(f"index out of range [0, {self.r})")
        self.idx = idx

    @property
    def t(self) -> int:
        return self.idx.shape[0]

    @property
    def k(self) -> int:
        return self.idx.shape[1]


class AllocTracker:
    """Counts bytes of temporary buffers a kernel variant allocates."""

    def __init__(self) -> None:
        self.bytes = 0

    def empty(self, shape, dtype) -> np.ndarray:
        arr = np.empty(shape, dtype=dtype)
        self.bytes += arr.nbytes
        return arr

    def zeros(self, shape, dtype) -> np.ndarray:
        arr = np.zeros(shape, dtype=dtype)
        self.bytes += arr.nbytes
        return arr


class _NullTracker:
    bytes = 0

    @staticmethod
    def empty(shape, dtype):
        return np.empty(shape, dtype=dtype)

    @staticmethod
    def zeros(shape, dtype):
        return np.zeros(shape, dtype=dtype)


_NULL = _NullTracker()


# --- jitted inner loops ----------------------------------------------------
#
# Accumulators start from the first product so they carry the input dtype;
# reduction order is ascending feature index, then ascending selection
# position, for every variant.


@njit(parallel=True, cache=True)
def _rows_kernel(x, a, idx, out):
    t, d = x.shape
    k = idx.shape[1]
    for ti in prange(t):
        for j in range(k):
            row = idx[ti, j]
            acc = a[row, 0] * x[ti, 0]
            for c in range(1, d):
                acc += a[row, c] * x[ti, c]
            out[ti, j] = acc


@njit(parallel=True, cache=True)
def _cols_kernel(h, b, idx, out):
    t, k = h.shape
    d_out = b.shape[0]
    for ti in prange(t):
        for j in range(k):
            col = idx[ti, j]
            w = h[ti, j]
            for o in range(d_out):
                out[ti, o] += w * b[o, col]


@njit(parallel=True, cache=True)
def _rows_from_gathered(ga, x, out):
    t, k, d = ga.shape
    for ti in prange(t):
        for j in range(k):
            acc = ga[ti, j, 0] * x[ti, 0]
            for c in range(1, d):
                acc += ga[ti, j, c] * x[ti, c]
            out[ti, j] = acc


@njit(parallel=True, cache=True)
def _cols_from_gathered(h, gb, out):
    t, k = h.shape
    d_out = gb.shape[2]
    for ti in prange(t):
        for j in range(k):
            w = h[ti, j]
            for o in range(d_out):
                out[ti, o] += w * gb[ti, j, o]


@njit(parallel=True, cache=True)
def _dot_rows(xs, a_row, out):
    n, d = xs.shape
    for i in prange(n):
        acc = a_row[0] * xs[i, 0]
        for c in range(1, d):
            acc += a_row[c] * xs[i, c]
        out[i] = acc


# --- public kernels ---------------------------------------------------------


def _check_operand(name: str, arr: np.ndarray) -> np.ndarray:
    if arr.dtype.type not in _SUPPORTED_DTYPES:
        raise ValueError(f"{name} must be float32 or float64, got {arr.dtype}")
    return np.ascontiguousarray(arr)


def indexed_rows_matmul(
    x: np.ndarray,
    a: np.ndarray,
    batch: IndexBatch,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """out[t, j] = dot(a[idx[t, j], :], x[t, :]) without gathering rows of a."""
    x = _check_operand("x", np.asarray(x))
    a = _check_operand("a", np.asarray(a))
    if x.ndim != 2 or a.ndim != 2 or x.shape[1] != a.shape[1]:
        raise ValueError(f"shape mismatch: x {x.shape}, a {a.shape}")
    if x.dtype != a.dtype:
        raise ValueError("x and a must share a dtype")
    if batch.t != x.shape[0]:
        raise ValueError("index batch token count does not match x")
    if batch.r != a.shape[0]:
        raise ValueError(f"index batch built for r={batch.r}, a has {a.shape[0]} rows")
    if out is None:
        out = np.empty((batch.t, batch.k), dtype=x.dtype)
    _rows_kernel(x, a, batch.idx, out)
    return out


def indexed_cols_accumulate(
    h: np.ndarray,
    b: np.ndarray,
    batch: IndexBatch,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """out[t, :] = sum_j h[t, j] * b[:, idx[t, j]], j ascending."""
    h = _check_operand("h", np.asarray(h))
    b = _check_operand("b", np.asarray(b))
    if h.ndim != 2 or b.ndim != 2:
        raise ValueError("h and b must be matrices")
    if h.dtype != b.dtype:
        raise ValueError("h and b must share a dtype")
    if h.shape != (batch.t, batch.k):
        raise ValueError(f"h shape {h.shape} != ({batch.t}, {batch.k})")
    if batch.r != b.shape[1]:
        raise ValueError(f"index batch built for r={batch.r}, b has {b.shape[1]} columns")
    if out is None:
        out = np.zeros((batch.t, b.shape[0]), dtype=h.dtype)
    _cols_kernel(h, b, batch.idx, out)
    return out


def indexed_gated_delta(
    x: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    weights: np.ndarray,
    batch: IndexBatch,
    tracker=None,
) -> np.ndarray:
    """Full sparse delta: cols_accumulate(weights * rows_matmul(x, a), b)."""
    tracker = tracker or _NULL
    h = tracker.empty((batch.t, batch.k), x.dtype)
    indexed_rows_matmul(x, a, batch, out=h)
    hw = tracker.empty((batch.t, batch.k), x.dtype)
    np.multiply(np.asarray(weights, dtype=x.dtype), h, out=hw)
    out = np.zeros((batch.t, b.shape[0]), dtype=x.dtype)
    indexed_cols_accumulate(hw, b, batch, out=out)
    return out


def oracle_loop_per_expert(
    x: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    gates_dense: np.ndarray,
    r: int,
    tracker=None,
) -> np.ndarray:
    """Per-expert gather/compute/scatter baseline over a dense (t, r) gate table.

    Iterates experts one by one, copying each expert's tokens into a fresh
    buffer the way for-loop MoE implementations do. Semantically identical to
    the indexed pipeline, deliberately slower.
    """
    tracker = tracker or _NULL
    x = _check_operand("x", np.asarray(x))
    a = _check_operand("a", np.asarray(a))
    b = _check_operand("b", np.asarray(b))
    gates_dense = np.asarray(gates_dense, dtype=x.dtype)
    t, d = x.shape
    if a.shape != (r, d) or b.shape[1] != r or gates_dense.shape != (t, r):
        raise ValueError("shape mismatch in loop-per-expert oracle")
    d_out = b.shape[0]
    out = np.zeros((t, d_out), dtype=x.dtype)
    for i in range(r):
        tok = np.nonzero(gates_dense[:, i])[0]
        if tok.size == 0:
            continue
        xi = tracker.empty((tok.size, d), x.dtype)
        np.take(x, tok, axis=0, out=xi)
        hi = tracker.empty((tok.size,), x.dtype)
        _dot_rows(xi, np.ascontiguousarray(a[i]), hi)
        gh = tracker.empty((tok.size,), x.dtype)
        np.multiply(gates_dense[tok, i], hi, out=gh)
        bcol = tracker.empty((d_out,), x.dtype)
        bcol[:] = b[:, i]
        contrib = tracker.empty((tok.size, d_out), x.dtype)
        np.multiply(gh[:, None], bcol[None, :], out=contrib)
        out[tok, :] += contrib
    return out


def dense_materialized_delta(
    x: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    weights: np.ndarray,
    batch: IndexBatch,
    tracker=None,
) -> np.ndarray:
    """Einsum-style baseline: gathers (t, k, d) blocks of a and b, then reduces."""
    tracker = tracker or _NULL
    x = _check_operand("x", np.asarray(x))
    a = _check_operand("a", np.asarray(a))
    b = _check_operand("b", np.asarray(b))
    t, d = x.shape
    d_out = b.shape[0]
    ga = tracker.empty((batch.t, batch.k, d), x.dtype)
    np.take(a, batch.idx, axis=0, out=ga)
    h = tracker.empty((batch.t, batch.k), x.dtype)
    _rows_from_gathered(ga, x, h)
    hw = tracker.empty((batch.t, batch.k), x.dtype)
    np.multiply(np.asarray(weights, dtype=x.dtype), h, out=hw)
    gb = tracker.empty((batch.t, batch.k, d_out), x.dtype)
    np.take(b.T, batch.idx, axis=0, out=gb)
    out = np.zeros((t, d_out), dtype=x.dtype)
    _cols_from_gathered(hw, gb, out)
    return out


# --- benchmark harness -------------------------------------------------------


@dataclass
class BenchConfig:
    t: int = 4096
    d: int = 1024
    r: int = 64
    k: int = 8
    dtype: str = "f32"
    threads: int = 4
    repeats: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("t", "d", "r", "k", "threads", "repeats"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.k > self.r:
            raise ValueError("k must not exceed r")
        if self.dtype not in ("f32", "f64"):
            raise ValueError("dtype must be 'f32' or 'f64'")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


@dataclass
class KernelReport:
    variant: str
    t: int
    d: int
    r: int
    k: int
    dtype: str
    threads: int
    ns_per_token: float
    intermediate_bytes: int
    checksum: str

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "t": self.t,
            "d": self.d,
            "r": self.r,
            "k": self.k,
            "dtype": self.dtype,
            "threads": self.threads,
            "ns_per_token": self.ns_per_token,
            "intermediate_bytes": self.intermediate_bytes,
            "checksum": self.checksum,
        }


def _checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def sorted_random_batch(t: int, r: int, k: int, rng: np.random.Generator) -> IndexBatch:
    """k distinct ranks per token, sorted ascending (what a gate produces)."""
    pool = np.tile(np.arange(r, dtype=np.int64), (t, 1))
    idx = np.sort(rng.permuted(pool, axis=1)[:, :k], axis=1)
    return IndexBatch(idx=idx, r=r)


def warmup(dtype=np.float64) -> None:
    """Compile every kernel at a tiny shape so timings exclude JIT cost."""
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3)).astype(dtype)
    a = rng.standard_normal((4, 3)).astype(dtype)
    b = rng.standard_normal((3, 4)).astype(dtype)
    w = np.ones((2, 2), dtype=dtype)
    batch = IndexBatch(np.array([[0, 1], [2, 3]]), r=4)
    gates = np.zeros((2, 4), dtype=dtype)
    gates[[0, 0, 1, 1], [0, 1, 2, 3]] = 1.0
    indexed_gated_delta(x, a, b, w, batch)
    dense_materialized_delta(x, a, b, w, batch)
    oracle_loop_per_expert(x, a, b, gates, 4)


def bench_kernels(config: BenchConfig) -> list[KernelReport]:
    """Race the three variants on one random instance.

    Times are median-of-repeats wall time per token; intermediate bytes are
    the tracked temporaries of a single run. Outputs must agree bit-for-bit
    across variants or the harness raises.
    """
    dt = config.np_dtype
    x = child_rng(config.seed, "bench/x").standard_normal((config.t, config.d)).astype(dt)
    a = child_rng(config.seed, "bench/a").standard_normal((config.r, config.d)).astype(dt)
    b = child_rng(config.seed, "bench/b").standard_normal((config.d, config.r)).astype(dt)
    batch = sorted_random_batch(config.t, config.r, config.k, child_rng(config.seed, "bench/idx"))
    weights = softmax_rows(
        child_rng(config.seed, "bench/w").standard_normal((config.t, config.k))
    ).astype(dt)
    gates_dense = np.zeros((config.t, config.r), dtype=dt)
    np.add.at(gates_dense, (np.arange(config.t)[:, None], batch.idx), weights)

    variants = {
        "indexed": lambda trk: indexed_gated_delta(x, a, b, weights, batch, tracker=trk),
        "loop_per_expert": lambda trk: oracle_loop_per_expert(
            x, a, b, gates_dense, config.r, tracker=trk
        ),
        "dense_materialized": lambda trk: dense_materialized_delta(
            x, a, b, weights, batch, tracker=trk
        ),
    }

    warmup(dt)
    n_threads = min(config.threads, max_threads())
    prev_threads = numba.get_num_threads()
    numba.set_num_threads(n_threads)
    try:
        reports = []
        for name, fn in variants.items():
            fn(_NULL)  # warm run at full shape (page-in, lazy JIT specialization)
            checksums = set()
            times = []
            bytes_used = 0
            for _ in range(config.repeats):
                tracker = AllocTracker()
                t0 = time.perf_counter()
                out = fn(tracker)
                times.append(time.perf_counter() - t0)
                bytes_used = tracker.bytes
                checksums.add(_checksum(out))
            if len(checksums) != 1:
                raise RuntimeError(f"variant {name} is not deterministic across repeats")
            reports.append(
                KernelReport(
                    variant=name,
                    t=config.t,
                    d=config.d,
                    r=config.r,
                    k=config.k,
                    dtype=config.dtype,
                    threads=n_threads,
                    ns_per_token=float(np.median(times)) / config.t * 1e9,
                    intermediate_bytes=bytes_used,
                    checksum=checksums.pop(),
                )
            )
    finally:
        numba.set_num_threads(prev_threads)

    if len({rep.checksum for rep in reports}) != 1:
        raise RuntimeError("kernel variants disagree: " + repr([r.checksum for r in reports]))
    return reports
