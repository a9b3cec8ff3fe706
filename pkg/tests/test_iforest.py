import numpy as np
import pytest

from dymap.iforest import average_path_length, isolation_forest_scores


def test_average_path_length_values():
    c = average_path_length(np.array([0, 1, 2, 256]))
    assert c[0] == 0 and c[1] == 0 and c[2] == 1
    H = np.log(255) + 0.5772156649015329
    assert c[3] == pytest.approx(2 * H - 2 * 255 / 256)


def test_far_point_has_max_score():
    rng = np.random.default_rng(0)
    pts = np.vstack([rng.uniform(0, 0.1, (200, 3)), [[5.0, 0.05, 0.05]]])
    s = isolation_forest_scores(pts, seed=3)
    assert np.argmax(s) == 200


def test_identical_points_equal_scores():
    s = isolation_forest_scores(np.ones((50, 3)))
    assert np.all(s == s[0])


def test_scores_in_open_unit_interval():
    rng = np.random.default_rng(1)
    for n in (8, 30, 500):
        s = isolation_forest_scores(rng.normal(size=(n, 3)), seed=n)
        assert np.all((s > 0) & (s < 1))


def test_too_few_points_is_uninformative():
    assert isolation_forest_scores(np.random.default_rng(0).normal(size=(7, 3))).tolist() == [0.5] * 7


def test_deterministic_under_seed():
    pts = np.random.default_rng(2).normal(size=(400, 3))
    a = isolation_forest_scores(pts, seed=5)
    assert np.array_equal(a, isolation_forest_scores(pts, seed=5))
    assert not np.array_equal(a, isolation_forest_scores(pts, seed=6))


def test_top_outlier_matches_distance_ranking():
    # planted sets: an anisotropic blob plus one point far outside it
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(50, 600))
        blob = rng.normal(0, 1, (n, 3)) * rng.uniform(0.01, 0.1, 3)
        d = rng.normal(size=3)
        planted = d / np.linalg.norm(d) * rng.uniform(1.0, 5.0)
        pts = np.vstack([blob, planted])[rng.permutation(n + 1)]
        far = np.argmax(np.linalg.norm(pts - np.median(pts, axis=0), axis=1))
        assert np.argmax(isolation_forest_scores(pts, seed=seed)) == far


def test_outliers_score_above_threshold():
    rng = np.random.default_rng(9)
    pts = np.vstack([rng.uniform(-0.2, 0.2, (1000, 3)), rng.uniform(2, 3, (10, 3)) * rng.choice([-1, 1], (10, 3))])
    s = isolation_forest_scores(pts)
    assert np.all(s[1000:] > 0.65)
    assert np.mean(s[:1000] > 0.65) < 0.01
