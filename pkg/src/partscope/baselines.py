"""K-means clustering of perceptual features on foreground pixels.

Centroids are fit once on features pooled across the collection, so a label
means the same part in every image.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .types import IGNORE, LabelGrid

log = logging.getLogger(__name__)

MAX_FIT_SAMPLES = 100_000


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (K, d)
    inertia: float
    n_iter: int
    history: list[float]


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # explicit differences: the expanded form loses ties to rounding
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)


def nearest(X: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the closest centroid (first one on ties) and its squared distance."""
    out_idx = np.empty(len(X), dtype=np.int64)
    out_d = np.empty(len(X))
    for s in range(0, len(X), 4096):
        d = _sq_dists(X[s:s + 4096], C)
        out_idx[s:s + 4096] = d.argmin(1)
        out_d[s:s + 4096] = d.min(1)
    return out_idx, out_d


def kmeans_pp_init(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    C = np.empty((K, X.shape[1]))
    C[0] = X[rng.integers(len(X))]
    d = _sq_dists(X, C[:1])[:, 0]
    for k in range(1, K):
        total = d.sum()
        if total <= 0:
            i = rng.integers(len(X))
        else:
            i = rng.choice(len(X), p=d / total)
        C[k] = X[i]
        d = np.minimum(d, _sq_dists(X, C[k:k + 1])[:, 0])
    return C


def kmeans_fit(X, K: int, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding; stops when assignments are stable."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) < K:
        raise ValueError(f"need at least K={K} samples, got {len(X)}")
    rng = np.random.default_rng(seed)
    C = kmeans_pp_init(X, K, rng)
    labels, d = nearest(X, C)
    history = [float(d.sum())]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        for k in range(K):
            members = labels == k
            if members.any():
                C[k] = X[members].mean(0)
            else:
                # empty cluster: reseed from the point farthest from its centroid
                far = int(np.argmax(d))
                C[k] = X[far]
                d[far] = 0.0
                labels[far] = k
        new_labels, d = nearest(X, C)
        inertia = float(d.sum())
        if inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return KMeansResult(C, history[-1], n_iter, history)


def foreground_features(features: torch.Tensor, fg: torch.Tensor) -> np.ndarray:
    """Features at foreground pixels, (n, d); the feature grid is nearest-upsampled to the mask grid."""
    up = upsample_nearest(features, fg.shape)
    return up[:, fg].T.double().numpy()


def upsample_nearest(features: torch.Tensor, size) -> torch.Tensor:
    if tuple(features.shape[-2:]) == tuple(size):
        return features
    return F.interpolate(features.unsqueeze(0), size=tuple(size), mode="nearest")[0]


def sample_fit_set(feature_maps: Sequence[torch.Tensor], fgs: Sequence[torch.Tensor], seed: int = 0,
                   limit: int = MAX_FIT_SAMPLES) -> np.ndarray:
    X = np.concatenate([foreground_features(f, m) for f, m in zip(feature_maps, fgs)])
    if len(X) > limit:
        idx = np.sort(np.random.default_rng(seed).choice(len(X), size=limit, replace=False))
        X = X[idx]
    return X


def kmeans_assign(centroids: np.ndarray, features: torch.Tensor, fg: torch.Tensor) -> LabelGrid:
    """Nearest-centroid label on foreground pixels; background is ignore."""
    if features.shape[0] != centroids.shape[1]:
        raise ValueError(f"feature dim {features.shape[0]} does not match centroid dim {centroids.shape[1]}")
    fg_np = fg.numpy().astype(bool)
    grid = np.full(fg_np.shape, IGNORE, dtype=np.int64)
    idx, _ = nearest(foreground_features(features, fg), centroids)
    grid[fg_np] = idx
    return LabelGrid(grid)


def kmeans_baseline(feature_maps, fgs, K: int = 4, seed: int = 0) -> tuple[KMeansResult, list[LabelGrid]]:
    result = kmeans_fit(sample_fit_set(feature_maps, fgs, seed), K, seed)
    return result, [kmeans_assign(result.centroids, f, m) for f, m in zip(feature_maps, fgs)]
