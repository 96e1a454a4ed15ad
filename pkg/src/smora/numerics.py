"""Deterministic numeric primitives shared by every other module.

Matrices are plain float64 numpy arrays in row-major order. Randomness always
flows through counter-based (Philox) generators so that a given seed produces
the same stream on every platform; independent sub-streams are derived by
hashing a (seed, name) pair rather than by consuming the parent stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = [
    "make_rng",
    "child_seed",
    "child_rng",
    "softmax",
    "top_k_indices",
    "top_k_rows",
    "kaiming_init",
    "dense_matmul",
]


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator: identical seed, identical stream, any platform."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))


def child_seed(seed: int, name: str) -> int:
    """Derive a stable 64-bit sub-seed for the named stream."""
    digest = hashlib.sha256(f"{seed}/{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def child_rng(seed: int, name: str) -> np.random.Generator:
    return make_rng(child_seed(seed, name))


def softmax(v) -> np.ndarray:
    """Numerically stable softmax of a 1-d vector (max-subtracted)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("softmax expects a non-empty 1-d vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input contains non-finite entries")
    z = np.exp(v - v.max())
    return z / z.sum()


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax of a 2-d array."""
    m = np.asarray(m, dtype=np.float64)
    z = np.exp(m - m.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def top_k_indices(v, k: int) -> np.ndarray:
    """Indices of the k largest entries, sorted ascending.

    Ties are broken in favor of the lowest index so the selection is
    deterministic regardless of how the scores were produced.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("top_k_indices expects a 1-d vector")
    if not 1 <= k <= v.size:
        raise ValueError(f"k={k} out of range for vector of length {v.size}")
    order = np.argsort(-v, kind="stable")  # stable: equal values keep index order
    return np.sort(order[:k])


def top_k_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k of a (t, r) score matrix; each row sorted ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError("top_k_rows expects a 2-d score matrix")
    if not 1 <= k <= scores.shape[1]:
        raise ValueError(f"k={k} out of range for {scores.shape[1]} columns")
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1)


def kaiming_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Normal init with variance 2/fan_in, fan_in being the input dim (cols)."""
    if rows < 1 or cols < 1:
        raise ValueError(f"invalid shape ({rows}, {cols})")
    return rng.normal(0.0, np.sqrt(2.0 / cols), size=(rows, cols))


def dense_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain dense product with shape validation; the oracle for the indexed kernel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("dense_matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}")
    return a @ b
