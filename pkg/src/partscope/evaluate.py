"""Scoring a segmenter (or a baseline labelling) on a dataset split."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import metrics
from .data import Sample
from .types import IGNORE

REPORT_KEYS = ("nmi", "ari", "fg_nmi", "fg_ari", "kp_error")
BACKGROUND = 254  # extra class id for full-image scoring


@torch.no_grad()
def predict_masks(model, samples: Sequence[Sample], batch: int = 32) -> torch.Tensor:
    model.eval()
    dtype = next(model.parameters()).dtype
    images = torch.stack([s.image for s in samples]).to(dtype)
    return torch.cat([model(images[i:i + batch]) for i in range(0, len(images), batch)]).double()


def labels_from_masks(masks: torch.Tensor, samples: Sequence[Sample]) -> list[np.ndarray]:
    """Argmax part on the provided foreground, ``IGNORE`` elsewhere."""
    out = []
    for m, s in zip(masks, samples):
        lab = np.argmax(m.numpy(), axis=0)
        out.append(np.where(s.fg.numpy(), lab, IGNORE))
    return out


def segmentation_scores(pred_labels: Sequence[np.ndarray], samples: Sequence[Sample]) -> dict[str, float]:
    """NMI/ARI pooled over the split, on the full image and on the foreground.

    Full-image scoring adds a background class on both sides: predictions use
    the provided foreground, annotations the ground-truth one.
    """
    preds, gts, gts_full, fgs = [], [], [], []
    for p, s in zip(pred_labels, samples):
        if s.parts is None:
            raise ValueError(f"sample {s.sample_id} has no part annotations")
        gt_fg = (s.gt_fg if s.gt_fg is not None else s.fg).numpy()
        preds.append(p.ravel())
        gts.append(np.where(gt_fg, s.parts.data, IGNORE).ravel())
        gts_full.append(np.where(gt_fg, s.parts.data, BACKGROUND).ravel())
        fgs.append(s.fg.numpy().ravel())
    P, G, F = np.concatenate(preds), np.concatenate(gts), np.concatenate(fgs)
    nmi, ari = metrics.nmi_ari(np.where(P == IGNORE, BACKGROUND, P), np.concatenate(gts_full))
    fg_nmi, fg_ari = metrics.nmi_ari(P, G, F)
    return {"nmi": nmi, "ari": ari, "fg_nmi": fg_nmi, "fg_ari": fg_ari}


def keypoint_scores(train_landmarks, train: Sequence[Sample], test_landmarks, test: Sequence[Sample]) -> float:
    fit = metrics.fit_keypoint_regression(train_landmarks, [s.keypoints for s in train])
    H, W = test[0].image.shape[1:]
    return metrics.keypoint_error(fit, test_landmarks, [s.keypoints for s in test], (H, W))


def evaluate_model(model, train: Sequence[Sample], test: Sequence[Sample]) -> dict[str, float]:
    test_masks = predict_masks(model, test)
    report = segmentation_scores(labels_from_masks(test_masks, test), test)
    if all(s.keypoints is not None for s in list(train) + list(test)) and train:
        train_masks = predict_masks(model, train)
        tr = np.stack([metrics.mask_centroids(m, s.fg) for m, s in zip(train_masks, train)])
        te = np.stack([metrics.mask_centroids(m, s.fg) for m, s in zip(test_masks, test)])
        report["kp_error"] = keypoint_scores(tr, train, te, test)
    return report


def write_report(path, report: dict[str, float | None], per_class: dict[str, dict] | None = None) -> None:
    """``key = value`` lines; absent metrics are written as ``none``."""
    lines = []
    for k in REPORT_KEYS:
        v = report.get(k)
        lines.append(f"{k} = {'none' if v is None else repr(float(v))}")
    for cls, sub in (per_class or {}).items():
        for k in REPORT_KEYS:
            v = sub.get(k)
            lines.append(f"{cls}.{k} = {'none' if v is None else repr(float(v))}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> dict[str, float | None]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            out[k] = None if v == "none" else float(v)
    return out


def hard_centroids(labels: np.ndarray, K: int) -> np.ndarray:
    """Part centroids of a hard labelling (one-hot mask over the labelled pixels); (K, 2)."""
    lab = torch.from_numpy(np.asarray(labels))
    fg = lab != IGNORE
    onehot = torch.nn.functional.one_hot(lab.clamp(min=0), K).permute(2, 0, 1).double()
    return metrics.mask_centroids(onehot, fg)


def landmark_baseline(kind: str, train: Sequence[Sample], test: Sequence[Sample], index: int = 0) -> float:
    """Keypoint error of a degenerate landmark predictor (no segmentation involved)."""
    for s in list(train) + list(test):
        if s.keypoints is None:
            raise ValueError(f"sample {s.sample_id} has no keypoint file; {kind} needs keypoints")
    tr, tr_keep = metrics.baseline_landmarks(kind, [s.keypoints for s in train], index)
    te, te_keep = metrics.baseline_landmarks(kind, [s.keypoints for s in test], index)
    return keypoint_scores(tr, [train[i] for i in tr_keep], te, [test[i] for i in te_keep])


def kmeans_report(train: Sequence[Sample], test: Sequence[Sample], provider, K: int = 4,
                  seed: int = 0) -> tuple[dict[str, float], list[np.ndarray]]:
    """Fit K-means on training foreground features, label the test split and score it."""
    from .baselines import kmeans_assign, kmeans_fit, sample_fit_set

    def feats(samples):
        with torch.no_grad():
            return [provider.extract(s.image, s.sample_id).data.double() for s in samples]

    train_feats = feats(train)
    result = kmeans_fit(sample_fit_set(train_feats, [s.fg for s in train], seed), K, seed)
    test_labels = [kmeans_assign(result.centroids, f, s.fg).data for f, s in zip(feats(test), test)]
    report = segmentation_scores(test_labels, test)
    if all(s.keypoints is not None for s in list(train) + list(test)):
        train_labels = [kmeans_assign(result.centroids, f, s.fg).data for f, s in zip(train_feats, train)]
        tr = np.stack([hard_centroids(lab, K) for lab in train_labels])
        te = np.stack([hard_centroids(lab, K) for lab in test_labels])
        report["kp_error"] = keypoint_scores(tr, train, te, test)
    return report, test_labels
