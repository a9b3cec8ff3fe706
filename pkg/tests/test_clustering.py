import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dymap.clustering import NOISE, cluster_sizes, dbscan


def naive_dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Textbook sequential DBSCAN with brute-force neighbourhoods."""
    n = len(points)
    dist = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
    neigh = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
    labels = np.full(n, -2)  # -2 unvisited
    cluster = 0
    for i in range(n):
        if labels[i] != -2:
            continue
        if len(neigh[i]) < min_pts:
            labels[i] = NOISE
            continue
        labels[i] = cluster
        seeds = list(neigh[i])
        k = 0
        while k < len(seeds):
            j = seeds[k]
            k += 1
            if labels[j] == NOISE:
                labels[j] = cluster
            if labels[j] != -2:
                continue
            labels[j] = cluster
            if len(neigh[j]) >= min_pts:
                seeds.extend(neigh[j])
        cluster += 1
    return labels


def same_partition(a: np.ndarray, b: np.ndarray) -> bool:
    if not np.array_equal(a == NOISE, b == NOISE):
        return False
    pairs = set(zip(a[a != NOISE].tolist(), b[b != NOISE].tolist()))
    return len(pairs) == len(set(a[a != NOISE].tolist())) == len(set(b[b != NOISE].tolist()))


def test_two_separated_groups():
    rng = np.random.default_rng(0)
    g = np.cumsum(np.full((10, 3), 0.01 / np.sqrt(3)), axis=0)
    pts = np.vstack([g, g + 10.0])[rng.permutation(20)]
    labels = dbscan(pts, 0.1, 3)
    assert len(cluster_sizes(labels)) == 2
    assert (labels == NOISE).sum() == 0


def test_isolated_point_is_noise():
    assert dbscan([[0.0, 0.0, 0.0]], 0.1, 2).tolist() == [NOISE]


def test_empty_input():
    assert len(dbscan(np.zeros((0, 3)), 0.1, 3)) == 0


def test_parameter_checks():
    with pytest.raises(ValueError):
        dbscan([[0.0]], 0.0, 1)
    with pytest.raises(ValueError):
        dbscan([[0.0]], 0.1, 0)


def test_matches_naive_on_unit_cube():
    for seed in range(20):
        pts = np.random.default_rng(seed).random((200, 3))
        ours = dbscan(pts, 0.15, 4)
        ref = naive_dbscan(pts, 0.15, 4)
        assert same_partition(ours, ref)
        assert np.array_equal(ours, ref)  # scan-order numbering and border claims agree too


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.3), st.integers(1, 8), st.integers(1, 4))
def test_matches_naive_random(seed, eps, min_pts, dim):
    pts = np.random.default_rng(seed).random((80, dim))
    assert np.array_equal(dbscan(pts, eps, min_pts), naive_dbscan(pts, eps, min_pts))


def test_non_noise_clusters_hold_min_pts():
    pts = np.random.default_rng(3).random((300, 2))
    labels = dbscan(pts, 0.06, 5)
    assert all(c >= 5 for c in cluster_sizes(labels).values())


def test_deterministic_and_translation_invariant():
    rng = np.random.default_rng(5)
    pts = rng.random((150, 3))
    a = dbscan(pts, 0.12, 4)
    assert np.array_equal(a, dbscan(pts.copy(), 0.12, 4))
    # shift by a dyadic amount so neighbour distances are bit-identical
    assert np.array_equal(a, dbscan(pts + np.array([8.0, -4.0, 2.0]), 0.12, 4))
