import numpy as np
import pytest
import torch

from partscope.baselines import kmeans_assign, kmeans_baseline, kmeans_fit, nearest, sample_fit_set
from partscope.types import IGNORE

import oracles


def blobs(K=3, n=200, sigma=0.1, seed=0):
    rng = np.random.default_rng(seed)
    means = np.array([[0, 0], [5, 0], [0, 5], [5, 5]], float)[:K]
    X = np.concatenate([m + sigma * rng.normal(size=(n, 2)) for m in means])
    return X, means


def test_recovers_separated_blobs():
    X, means = blobs()
    res = kmeans_fit(X, 3, seed=1)
    C = res.centroids[np.argsort(res.centroids @ [1, 10])]
    M = means[np.argsort(means @ [1, 10])]
    assert np.abs(C - M).max() < 3 * 0.1 / np.sqrt(200)


def test_K_equal_to_sample_size():
    X = np.random.default_rng(0).normal(size=(6, 3))
    res = kmeans_fit(X, 6, seed=0)
    assert res.inertia == 0.0
    assert sorted(map(tuple, res.centroids)) == sorted(map(tuple, X))


def test_deterministic_given_seed():
    X, _ = blobs(4, 50, 1.0)
    a, b = kmeans_fit(X, 4, seed=3), kmeans_fit(X, 4, seed=3)
    assert np.array_equal(a.centroids, b.centroids) and a.history == b.history


def test_inertia_non_increasing():
    X = np.random.default_rng(5).normal(size=(500, 4))
    h = kmeans_fit(X, 6, seed=0).history
    assert all(b <= a * (1 + 1e-12) for a, b in zip(h, h[1:]))


def test_duplicate_points_reseed_empty_clusters():
    X = np.array([[0.0, 0.0]] * 10 + [[1.0, 1.0]])
    res = kmeans_fit(X, 3, seed=0)
    assert np.isfinite(res.centroids).all() and res.inertia == pytest.approx(0.0)


def test_too_few_samples():
    with pytest.raises(ValueError):
        kmeans_fit(np.zeros((2, 2)), 3)


def test_nearest_matches_brute_force_and_ties():
    rng = np.random.default_rng(0)
    X, C = rng.normal(size=(300, 3)), rng.normal(size=(5, 3))
    idx, _ = nearest(X, C)
    assert idx.tolist() == [oracles.nearest_centroid(x, C) for x in X]
    C = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert nearest(np.array([[0.0, 3.0]]), C)[0].tolist() == [0]


def test_assign_labels_foreground_only():
    C = np.array([[0.0, 0.0], [1.0, 1.0]])
    feats = torch.ones(2, 2, 2, dtype=torch.float64)
    feats[:, 0, 0] = 0
    fg = torch.ones(4, 4, dtype=torch.bool)
    fg[3, 3] = False
    grid = kmeans_assign(C, feats, fg).data
    assert (grid[:2, :2] == 0).all()
    assert grid[3, 3] == IGNORE and (grid[2:, :2] == 1).all()
    const = kmeans_assign(C, torch.zeros(2, 3, 3, dtype=torch.float64), torch.ones(3, 3, dtype=torch.bool)).data
    assert (const == 0).all()
    with pytest.raises(ValueError):
        kmeans_assign(C, torch.zeros(3, 2, 2), fg)


def test_fit_set_is_bounded_and_pipeline_is_pure():
    g = torch.Generator().manual_seed(0)
    maps = [torch.randn(3, 4, 4, generator=g, dtype=torch.float64) for _ in range(5)]
    fgs = [torch.rand(8, 8, generator=g) > 0.5 for _ in range(5)]
    assert len(sample_fit_set(maps, fgs, limit=50)) == 50
    r1, l1 = kmeans_baseline(maps, fgs, K=3, seed=2)
    r2, l2 = kmeans_baseline(maps, fgs, K=3, seed=2)
    assert np.array_equal(r1.centroids, r2.centroids)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(l1, l2))
