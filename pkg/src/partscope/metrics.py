"""Clustering-agreement metrics and the keypoint-regression protocol.

NMI and ARI compare a predicted labelling with annotations without requiring
the two label sets to align or even have the same size. The FG variants
restrict scoring to foreground pixels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .types import IGNORE, KeypointSet, LabelGrid, SparseLabels, normalized_coords

log = logging.getLogger(__name__)


class NoScoredPixelsError(ValueError):
    pass


@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray  # (predicted labels, ground-truth labels)

    @property
    def row_sums(self) -> np.ndarray:
        return self.counts.sum(1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.counts.sum(0)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _as_grid(x) -> np.ndarray:
    if isinstance(x, SparseLabels):
        return x.to_grid().data
    if isinstance(x, LabelGrid):
        return x.data
    return np.asarray(x)


def contingency(pred, gt, restrict=None) -> ContingencyTable:
    """Count label co-occurrences over pixels labeled on both sides (and inside ``restrict``).

    ``pred``/``gt`` may be LabelGrids, SparseLabels or integer arrays of any
    matching shape (e.g. a whole split flattened together).
    """
    p, g = _as_grid(pred).ravel(), _as_grid(gt).ravel()
    if p.shape != g.shape:
        raise ValueError(f"prediction has {p.size} pixels, ground truth {g.size}")
    keep = (p != IGNORE) & (g != IGNORE)
    if restrict is not None:
        r = restrict.data if hasattr(restrict, "data") else restrict
        r = r.numpy() if isinstance(r, torch.Tensor) else np.asarray(r)
        keep &= r.ravel().astype(bool)
    p, g = p[keep], g[keep]
    if p.size == 0:
        raise NoScoredPixelsError("no jointly labeled pixels to score")
    # compact labels so sparse label ids do not blow up the table
    pu, pi = np.unique(p, return_inverse=True)
    gu, gi = np.unique(g, return_inverse=True)
    counts = np.zeros((len(pu), len(gu)), dtype=np.int64)
    np.add.at(counts, (pi, gi), 1)
    return ContingencyTable(counts)


def _entropy(counts: np.ndarray, total: int) -> float:
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def nmi(table: ContingencyTable) -> float:
    """Mutual information over the arithmetic mean of the two entropies."""
    n = table.total
    c = table.counts
    a, b = table.row_sums, table.col_sums
    ha, hb = _entropy(a, n), _entropy(b, n)
    if ha == 0 or hb == 0:
        return 0.0
    nz = c > 0
    outer = np.outer(a, b)[nz].astype(np.float64)
    cij = c[nz].astype(np.float64)
    mi = float((cij / n * (np.log(cij) + math.log(n) - np.log(outer))).sum())
    return float(min(max(mi / ((ha + hb) / 2), 0.0), 1.0))


def _comb2(x) -> int:
    return sum(int(v) * (int(v) - 1) // 2 for v in np.ravel(x))


def ari(table: ContingencyTable) -> float:
    """Adjusted Rand index from pair counts; 1.0 when the index is degenerate."""
    n = table.total
    if n < 2:
        raise ValueError("ARI needs at least two scored pixels")
    index = _comb2(table.counts)
    sa, sb = _comb2(table.row_sums), _comb2(table.col_sums)
    total_pairs = n * (n - 1) // 2
    # exact integer arithmetic up to the final ratio
    num = index * total_pairs - sa * sb
    den = (sa + sb) * total_pairs - 2 * sa * sb
    if den == 0:
        return 1.0
    return float(2 * num) / float(den)


def nmi_ari(pred, gt, restrict=None) -> tuple[float, float]:
    t = contingency(pred, gt, restrict)
    return nmi(t), ari(t)


# ------------------------------------------------------------------ keypoints

def mask_centroids(mask: torch.Tensor, fg: torch.Tensor) -> np.ndarray:
    """Soft centroid (x, y) of every part over the foreground, normalized; (K, 2).

    A part without mass falls back to the image midpoint.
    """
    K, H, W = mask.shape
    ys, xs = normalized_coords(H, W)
    w = (mask.double() * fg.double()).detach()
    mass = w.sum(dim=(1, 2))
    cx = (w.sum(1) * xs).sum(1)
    cy = (w.sum(2) * ys).sum(1)
    out = np.full((K, 2), 0.5)
    ok = (mass > 1e-6).numpy()
    out[ok, 0] = (cx / mass.clamp(min=1e-12)).numpy()[ok]
    out[ok, 1] = (cy / mass.clamp(min=1e-12)).numpy()[ok]
    return out


@dataclass(frozen=True)
class RegressionFit:
    weights: np.ndarray  # (2K, 2L)
    intercept: np.ndarray  # (2L,)
    split: str = "train"

    def predict(self, landmarks: np.ndarray) -> np.ndarray:
        X = np.asarray(landmarks, dtype=np.float64).reshape(len(landmarks), -1)
        return X @ self.weights + self.intercept


def _targets(gt: Sequence[KeypointSet]) -> tuple[np.ndarray, np.ndarray]:
    Y = np.stack([k.points.reshape(-1) for k in gt])
    V = np.stack([np.repeat(k.visible, 2) for k in gt])
    return Y, V


def fit_keypoint_regression(pred_landmarks, gt: Sequence[KeypointSet], split: str = "train") -> RegressionFit:
    """Ordinary least squares with intercept from predicted landmarks to keypoints.

    Each output coordinate is fit on the images where that keypoint is visible.
    """
    X = np.asarray(pred_landmarks, dtype=np.float64)
    X = X.reshape(len(X), -1)
    n, p = X.shape
    if n < p + 1:
        raise ValueError(f"need at least {p + 1} training images for {p} regressors, got {n}")
    Y, V = _targets(gt)
    A = np.hstack([X, np.ones((n, 1))])
    coef = np.zeros((p + 1, Y.shape[1]))
    warned = False
    for j in range(Y.shape[1]):
        rows = V[:, j]
        if not rows.any():
            coef[-1, j] = 0.5
            continue
        sol, _, rank, _ = np.linalg.lstsq(A[rows], Y[rows, j], rcond=None)
        if rank < p + 1 and not warned:
            log.warning("rank-deficient landmark design (rank %d < %d); using the least-norm solution", rank, p + 1)
            warned = True
        coef[:, j] = sol
    return RegressionFit(coef[:-1], coef[-1], split)


def keypoint_error(fit: RegressionFit, pred_landmarks, gt: Sequence[KeypointSet], image_size=None) -> float:
    """Mean L2 error over visible keypoints, in percent of image width.

    ``image_size`` is (H, W); omitted for square images.
    """
    Y, V = _targets(gt)
    P = fit.predict(pred_landmarks)
    L = Y.shape[1] // 2
    dy_scale = 1.0 if image_size is None else image_size[0] / image_size[1]
    d = (P - Y).reshape(-1, L, 2)
    dist = np.sqrt(d[..., 0] ** 2 + (d[..., 1] * dy_scale) ** 2)
    vis = V.reshape(-1, L, 2)[..., 0]
    return float(dist[vis].mean() * 100)


BASELINE_KINDS = ("image-midpoint", "gt-keypoint-center", "single-gt-keypoint")


def baseline_landmarks(kind: str, keypoints: Sequence[KeypointSet], index: int = 0):
    """Landmarks for the degenerate baselines; returns (landmarks (n, 1, 2), kept image indices)."""
    if kind == "image-midpoint":
        return np.full((len(keypoints), 1, 2), 0.5), np.arange(len(keypoints))
    if kind == "gt-keypoint-center":
        out, keep = [], []
        for i, k in enumerate(keypoints):
            if k.visible.any():
                out.append(k.points[k.visible].mean(0))
                keep.append(i)
        return np.asarray(out).reshape(-1, 1, 2), np.asarray(keep, dtype=int)
    if kind == "single-gt-keypoint":
        out, keep = [], []
        for i, k in enumerate(keypoints):
            if k.visible[index]:
                out.append(k.points[index])
                keep.append(i)
        dropped = len(keypoints) - len(keep)
        if dropped:
            log.warning("keypoint %d invisible in %d images; dropped from the fit", index, dropped)
        return np.asarray(out).reshape(-1, 1, 2), np.asarray(keep, dtype=int)
    raise ValueError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")
