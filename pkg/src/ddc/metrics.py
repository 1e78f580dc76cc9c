"""Partition quality: normalised mutual information, clustering accuracy and the
linear assignment solver behind the accuracy and the voting ensemble."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Matching:
    mapping: np.ndarray  # mapping[row] = assigned column
    cost: float

    def as_dict(self) -> dict[int, int]:
        return {int(r): int(c) for r, c in enumerate(self.mapping)}


def _solve(cost: np.ndarray) -> np.ndarray:
    """Shortest augmenting path Hungarian method with row/column potentials, O(n^3)."""
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    mapping = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        mapping[p[j] - 1] = j - 1
    return mapping


def hungarian(cost) -> Matching:
    """Minimum-cost perfect matching of a square cost matrix.

    Among optimal permutations the lexicographically smallest one (by the
    column assigned to row 0, then row 1, ...) is returned.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")
    n = c.shape[0]
    if n == 0:
        return Matching(np.empty(0, dtype=int), 0.0)
    best = _solve(c)
    opt = c[np.arange(n), best].sum()
    tol = 1e-9 * max(1.0, np.abs(c).max()) * n

    # Fix rows one at a time to the smallest column that still admits an optimum.
    mapping = np.empty(n, dtype=int)
    rows = list(range(n))
    cols = list(range(n))
    fixed_cost = 0.0
    for r in range(n):
        rows.remove(r)
        for col in sorted(cols):
            rest_cols = [x for x in cols if x != col]
            sub = c[np.ix_(rows, rest_cols)]
            rest = sub[np.arange(len(rows)), _solve(sub)].sum() if rows else 0.0
            if fixed_cost + c[r, col] + rest <= opt + tol:
                mapping[r] = col
                fixed_cost += c[r, col]
                cols.remove(col)
                break
    return Matching(mapping, float(c[np.arange(n), mapping].sum()))


def contingency(labels, clusters, n_rows: int | None = None, n_cols: int | None = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    clusters = np.asarray(clusters, dtype=int)
    if labels.shape != clusters.shape:
        raise ValueError(f"length mismatch: {labels.shape} vs {clusters.shape}")
    r = n_rows if n_rows is not None else (labels.max() + 1 if labels.size else 0)
    c = n_cols if n_cols is not None else (clusters.max() + 1 if clusters.size else 0)
    table = np.zeros((r, c), dtype=np.int64)
    np.add.at(table, (labels, clusters), 1)
    return table


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(labels, clusters) -> float:
    """I(l, c) / ((H(l) + H(c)) / 2), natural log, plug-in estimates."""
    labels = np.asarray(labels)
    clusters = np.asarray(clusters)
    if labels.shape != clusters.shape:
        raise ValueError(f"length mismatch: {labels.shape} vs {clusters.shape}")
    if labels.size == 0:
        raise ValueError("empty partitions")
    _, li = np.unique(labels, return_inverse=True)
    _, ci = np.unique(clusters, return_inverse=True)
    table = contingency(li, ci)
    n = labels.size
    hl = _entropy(table.sum(axis=1), n)
    hc = _entropy(table.sum(axis=0), n)
    if hl + hc == 0.0:
        # both partitions are a single block
        return 1.0
    nz = table > 0
    pij = table[nz] / n
    pi = table.sum(axis=1, keepdims=True) / n
    pj = table.sum(axis=0, keepdims=True) / n
    outer = (pi * pj)[nz]
    mi = float((pij * np.log(pij / outer)).sum())
    return float(np.clip(mi / (0.5 * (hl + hc)), 0.0, 1.0))


def best_map(labels, clusters) -> dict:
    """Cluster -> class map maximising agreement (zero-padded to square)."""
    labels = np.asarray(labels)
    clusters = np.asarray(clusters)
    lv, li = np.unique(labels, return_inverse=True)
    cv, ci = np.unique(clusters, return_inverse=True)
    size = max(len(lv), len(cv))
    table = contingency(ci, li, size, size)  # clusters x classes
    m = hungarian(-table)
    out = {}
    for c_idx, l_idx in enumerate(m.mapping):
        if c_idx < len(cv) and l_idx < len(lv):
            out[cv[c_idx].item()] = lv[l_idx].item()
    return out


def acc(labels, clusters) -> float:
    """Best fraction of points whose cluster maps to their class under a one-to-one map."""
    labels = np.asarray(labels)
    clusters = np.asarray(clusters)
    if labels.shape != clusters.shape:
        raise ValueError(f"length mismatch: {labels.shape} vs {clusters.shape}")
    if labels.size == 0:
        raise ValueError("empty partitions")
    _, li = np.unique(labels, return_inverse=True)
    _, ci = np.unique(clusters, return_inverse=True)
    size = max(li.max(), ci.max()) + 1
    table = contingency(ci, li, size, size)
    m = hungarian(-table)
    matched = table[np.arange(size), m.mapping].sum()
    return float(matched / labels.size)
