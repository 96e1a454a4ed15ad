"""Post-hoc diagnostics exported as CSV/JSON: rank similarity, routing
histograms per task, and load-balance traces."""

from __future__ import annotations

import numpy as np

__all__ = [
    "rank_similarity",
    "diagonal_dominance",
    "routing_distribution",
    "load_trace",
    "write_similarity_csv",
    "write_routing_histogram_csv",
    "write_load_trace_csv",
]


def rank_similarity(a: np.ndarray, b: np.ndarray, cosine: bool = False) -> np.ndarray:
    """Gram matrix of per-rank parameter vectors: [A | B^T] [A | B^T]^T.

    Row i concatenates rank i's row of A with its column of B, so entry (i, j)
    measures how similar two ranks' parameters are. ``cosine`` normalizes rows
    to unit length first.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[1]:
        raise ValueError(f"incompatible factor shapes {a.shape} and {b.shape}")
    m = np.hstack([a, b.T])  # (r, d_in + d_out)
    if cosine:
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        m = m / norms
    return m @ m.T


def diagonal_dominance(sim: np.ndarray) -> float:
    """mean |diagonal| / mean |off-diagonal| of a similarity matrix."""
    sim = np.asarray(sim, dtype=np.float64)
    r = sim.shape[0]
    if sim.ndim != 2 or sim.shape != (r, r) or r < 2:
        raise ValueError("need a square similarity matrix of size >= 2")
    off = sim[~np.eye(r, dtype=bool)]
    return float(np.mean(np.abs(np.diag(sim))) / np.mean(np.abs(off)))


def routing_distribution(decisions, labels, r: int, tasks=None):
    """Per-task rank-selection histograms plus their pairwise cosine similarity.

    ``decisions`` may be GateDecision-like objects (with .indices) or raw index
    rows. Each histogram row sums to 1. Returns (task_ids, hist (m, r), cos (m, m)).
    """
    labels = list(labels)
    if len(labels) != len(decisions):
        raise ValueError("one label per decision required")
    if tasks is None:
        tasks = sorted(set(labels))
    task_pos = {t: i for i, t in enumerate(tasks)}
    hist = np.zeros((len(tasks), r))
    for dec, label in zip(decisions, labels):
        if label not in task_pos:
            raise ValueError(f"unknown task label {label!r}")
        idx = np.asarray(getattr(dec, "indices", dec))
        if idx.size and idx.max() >= r:
            raise ValueError("rank index out of range")
        np.add.at(hist[task_pos[label]], idx, 1.0)
    sums = hist.sum(axis=1, keepdims=True)
    if np.any(sums == 0):
        empty = [t for t, s in zip(tasks, sums[:, 0]) if s == 0]
        raise ValueError(f"no decisions for task(s) {empty}")
    hist = hist / sums
    norms = np.linalg.norm(hist, axis=1)
    cos = (hist @ hist.T) / np.outer(norms, norms)
    return list(tasks), hist, cos


def load_trace(metrics) -> tuple[list[float], np.ndarray]:
    """Per-step load-violation series and final per-rank loads normalized by mean."""
    if not metrics.max_vio_history or not metrics.counts_history:
        raise ValueError("metrics carry no routing history")
    final = np.asarray(metrics.counts_history[-1], dtype=np.float64)
    return list(metrics.max_vio_history), final / final.mean()


def write_similarity_csv(path, sim: np.ndarray) -> None:
    # r rows x r cols, no header
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.asarray(sim, dtype=np.float64):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def write_routing_histogram_csv(path, tasks, hist: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("task,rank,frequency\n")
        for ti, task in enumerate(tasks):
            for rank in range(hist.shape[1]):
                fh.write(f"{task},{rank},{float(hist[ti, rank])!r}\n")


def write_load_trace_csv(path, series) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,max_vio\n")
        for step, mv in enumerate(series):
            fh.write(f"{step},{float(mv)!r}\n")
