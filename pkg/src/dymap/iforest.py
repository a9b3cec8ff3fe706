"""Isolation Forest outlier scores, built level by level across all trees at once."""

from __future__ import annotations

import math

import numpy as np

EULER_GAMMA = 0.5772156649015329


def average_path_length(n) -> np.ndarray:
    """Expected unsuccessful-search path length ``c(n)`` of a binary search tree."""
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(n)
    big = n > 2
    out[n == 2] = 1.0
    nb = n[big]
    out[big] = 2.0 * (np.log(nb - 1.0) + EULER_GAMMA) - 2.0 * (nb - 1.0) / nb
    return out


def isolation_forest_scores(
    points,
    n_trees: int = 100,
    subsample: int = 256,
    seed: int = 0,
) -> np.ndarray:
    """Anomaly score ``2 ** (-E[h(x)] / c(psi))`` per point, higher is more isolated.

    Each tree is grown on ``psi = min(subsample, n)`` points drawn without
    replacement, splitting on a random axis at a uniform value between the
    node's extrema, down to depth ``ceil(log2(psi))``. Fewer than 8 points
    gives the uninformative score 0.5 everywhere.
    """
    X = np.asarray(points, dtype=np.float64)
    n = len(X)
    X = X.reshape(n, -1)
    if n < 8:
        return np.full(n, 0.5)
    rng = np.random.default_rng(seed)
    psi = min(subsample, n)
    height = math.ceil(math.log2(psi))
    k = X.shape[1]

    # node tables grow as levels are split; roots are nodes 0..n_trees-1
    feature = [np.full(n_trees, -1)]
    threshold = [np.zeros(n_trees)]
    left = [np.full(n_trees, -1)]
    size = [np.full(n_trees, psi)]
    depth = [np.zeros(n_trees, dtype=np.int64)]
    n_nodes = n_trees

    sample = np.concatenate([rng.choice(n, psi, replace=False) for _ in range(n_trees)])
    node_of = np.repeat(np.arange(n_trees), psi)
    frontier = np.arange(n_trees)

    for level in range(height):
        sizes = np.concatenate(size)
        frontier = frontier[sizes[frontier] > 1]
        if len(frontier) == 0:
            break
        local = np.full(n_nodes, -1)
        local[frontier] = np.arange(len(frontier))
        active = local[node_of] >= 0
        a_node = local[node_of[active]]
        a_vals = X[sample[active]]
        lo = np.full((len(frontier), k), np.inf)
        hi = np.full((len(frontier), k), -np.inf)
        np.minimum.at(lo, a_node, a_vals)
        np.maximum.at(hi, a_node, a_vals)

        f = rng.integers(k, size=len(frontier))
        u = rng.random(len(frontier))
        flo, fhi = lo[np.arange(len(frontier)), f], hi[np.arange(len(frontier)), f]
        splittable = fhi > flo
        thr = flo + u * (fhi - flo)

        split_nodes = frontier[splittable]
        n_split = len(split_nodes)
        child_base = n_nodes + 2 * np.arange(n_split)
        feat_all = np.concatenate(feature)
        thr_all = np.concatenate(threshold)
        left_all = np.concatenate(left)
        feat_all[split_nodes] = f[splittable]
        thr_all[split_nodes] = thr[splittable]
        left_all[split_nodes] = child_base
        feature, threshold, left = [feat_all], [thr_all], [left_all]

        # route samples of split nodes to children
        split_local = np.full(n_nodes, -1)
        split_local[split_nodes] = np.arange(n_split)
        moving = split_local[node_of] >= 0
        s_idx = split_local[node_of[moving]]
        go_right = X[sample[moving], feat_all[node_of[moving]]] >= thr_all[node_of[moving]]
        new_node = child_base[s_idx] + go_right
        node_of = node_of.copy()
        node_of[moving] = new_node

        child_sizes = np.bincount(new_node - n_nodes, minlength=2 * n_split)
        feature.append(np.full(2 * n_split, -1))
        threshold.append(np.zeros(2 * n_split))
        left.append(np.full(2 * n_split, -1))
        size.append(child_sizes)
        depth.append(np.full(2 * n_split, level + 1))
        frontier = np.arange(n_nodes, n_nodes + 2 * n_split)
        n_nodes += 2 * n_split

    feat_all = np.concatenate(feature)
    thr_all = np.concatenate(threshold)
    left_all = np.concatenate(left)
    leaf_len = np.concatenate(depth) + average_path_length(np.concatenate(size))

    # traverse: current node per (tree, point)
    cur = np.repeat(np.arange(n_trees)[:, None], n, axis=1)
    cols = np.broadcast_to(np.arange(n), cur.shape)
    for _ in range(height):
        inner = left_all[cur] >= 0
        if not inner.any():
            break
        c = cur[inner]
        vals = X[cols[inner], feat_all[c]]
        cur[inner] = left_all[c] + (vals >= thr_all[c])
    mean_path = leaf_len[cur].mean(axis=0)
    return np.power(2.0, -mean_path / average_path_length(psi)[()])
