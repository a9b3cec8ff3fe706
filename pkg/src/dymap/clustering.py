"""Density-based clustering (DBSCAN) over k-dimensional points."""

from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

NOISE = -1


def dbscan(points, eps: float, min_pts: int) -> np.ndarray:
    """Label points with cluster indices, ``NOISE`` for outliers.

    A point is core when at least ``min_pts`` points (itself included) lie
    within distance ``eps``. Clusters are the connected components of the
    core points, numbered in order of their lowest-index core point, which
    matches a sequential scan-order expansion. A border point joins the
    lowest-numbered cluster among its core neighbours.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pts = pts.reshape(n, -1)

    pairs = cKDTree(pts).query_pairs(eps, output_type="ndarray")
    counts = np.ones(n, dtype=np.int64)
    if len(pairs):
        np.add.at(counts, pairs[:, 0], 1)
        np.add.at(counts, pairs[:, 1], 1)
    core = counts >= min_pts

    labels = np.full(n, NOISE, dtype=np.int64)
    core_idx = np.flatnonzero(core)
    if len(core_idx) == 0:
        return labels

    both = core[pairs[:, 0]] & core[pairs[:, 1]] if len(pairs) else np.zeros(0, bool)
    remap = np.full(n, -1, dtype=np.int64)
    remap[core_idx] = np.arange(len(core_idx))
    cp = pairs[both]
    graph = coo_matrix(
        (np.ones(len(cp)), (remap[cp[:, 0]], remap[cp[:, 1]])), shape=(len(core_idx), len(core_idx))
    )
    _, comp = connected_components(graph, directed=False)

    # renumber components by first appearance in scan order
    _, first = np.unique(comp, return_index=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    labels[core_idx] = rank[comp]

    if len(pairs):
        # border points: non-core with at least one core neighbour
        a, b = pairs[:, 0], pairs[:, 1]
        sel = core[a] & ~core[b]
        cand_pt = np.concatenate([b[sel], a[core[b] & ~core[a]]])
        cand_lab = np.concatenate([labels[a[sel]], labels[b[core[b] & ~core[a]]]])
        if len(cand_pt):
            best = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
            np.minimum.at(best, cand_pt, cand_lab)
            hit = best != np.iinfo(np.int64).max
            labels[hit] = best[hit]
    return labels


def cluster_sizes(labels: np.ndarray) -> dict[int, int]:
    ids, counts = np.unique(labels[labels != NOISE], return_counts=True)
    return {int(i): int(c) for i, c in zip(ids, counts)}
