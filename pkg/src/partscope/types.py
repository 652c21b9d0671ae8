"""Shared tensor-shaped value types.

Tensors carry no batch dimension here. Batched code in :mod:`partscope.losses`
works on plain ``(N, ...)`` tensors and uses these types only at the edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image as PILImage

IGNORE = -1
EPS_MASS = 1e-6
SIMPLEX_TOL = 1e-5


class EmptyForegroundError(ValueError):
    pass


@dataclass(frozen=True)
class Image:
    data: torch.Tensor  # (3, H, W) in [0, 1]

    def __post_init__(self):
        d = self.data
        if d.ndim != 3 or d.shape[0] != 3:
            raise ValueError(f"image must have shape (3, H, W), got {tuple(d.shape)}")
        if d.shape[1] < 8 or d.shape[2] < 8:
            raise ValueError(f"image must be at least 8x8, got {tuple(d.shape[1:])}")
        if not torch.isfinite(d).all() or d.min() < 0 or d.max() > 1:
            raise ValueError("image values must be finite and within [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ForegroundMask:
    data: torch.Tensor  # (H, W) bool

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError(f"foreground mask must be 2-D, got {tuple(self.data.shape)}")
        if self.data.dtype != torch.bool:
            object.__setattr__(self, "data", self.data > 0.5)

    @property
    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class SoftMask:
    data: torch.Tensor  # (K, H, W)

    def __post_init__(self):
        d = self.data
        if d.ndim != 3:
            raise ValueError(f"soft mask must have shape (K, H, W), got {tuple(d.shape)}")
        with torch.no_grad():
            if d.min() < 0 or d.max() > 1:
                raise ValueError("soft mask values must lie in [0, 1]")
            err = (d.sum(0) - 1).abs().max()
            if err > SIMPLEX_TOL:
                raise ValueError(f"soft mask violates the per-pixel simplex (max error {float(err):.2e})")

    @property
    def K(self) -> int:
        return self.data.shape[0]

    @classmethod
    def one_hot(cls, labels: torch.Tensor, K: int, dtype=torch.float64) -> "SoftMask":
        m = torch.nn.functional.one_hot(labels.long(), K).permute(2, 0, 1).to(dtype)
        return cls(m)


@dataclass(frozen=True)
class FeatureMap:
    data: torch.Tensor  # (d, h, w)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"feature map must have shape (d, h, w), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("feature map contains non-finite values")

    @property
    def dim(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class PartDescriptor:
    vector: torch.Tensor
    part_index: int
    source_image: int = 0


@dataclass(frozen=True)
class LabelGrid:
    """Integer labels of shape (H, W); ``IGNORE`` marks unlabeled pixels."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError(f"label grid must be 2-D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError("label grid must hold integers")
        if (arr < IGNORE).any():
            raise ValueError("label grid values must be >= -1")
        object.__setattr__(self, "data", arr.astype(np.int64))

    @property
    def num_labels(self) -> int:
        return int(self.data.max()) + 1 if (self.data >= 0).any() else 0

    def save(self, path) -> None:
        if self.data.max(initial=0) >= 255:
            raise ValueError("labels >= 255 do not fit the 8-bit format")
        out = np.where(self.data == IGNORE, 255, self.data).astype(np.uint8)
        PILImage.fromarray(out, mode="L").save(path)

    @classmethod
    def load(cls, path) -> "LabelGrid":
        arr = np.asarray(PILImage.open(path).convert("L")).astype(np.int64)
        return cls(np.where(arr == 255, IGNORE, arr))


@dataclass(frozen=True)
class SparseLabels:
    """Labels known only at a few pixel locations (row, col)."""

    locations: np.ndarray  # (P, 2) int
    labels: np.ndarray  # (P,) int
    shape: tuple[int, int]

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=np.int64).reshape(-1, 2)
        lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(loc) != len(lab):
            raise ValueError("locations and labels differ in length")
        H, W = self.shape
        if ((loc < 0) | (loc >= (H, W))).any():
            raise ValueError("sparse label location outside the image")
        if (lab < 0).any():
            raise ValueError("sparse labels must be non-negative")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "labels", lab)

    def to_grid(self) -> LabelGrid:
        grid = np.full(self.shape, IGNORE, dtype=np.int64)
        grid[self.locations[:, 0], self.locations[:, 1]] = self.labels
        return LabelGrid(grid)


@dataclass(frozen=True)
class KeypointSet:
    """Keypoints in normalized (x, y) coordinates with visibility flags."""

    points: np.ndarray  # (L, 2)
    visible: np.ndarray = field(default=None)  # (L,) bool

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        vis = np.ones(len(pts), bool) if self.visible is None else np.asarray(self.visible, bool)
        if vis.shape != (len(pts),):
            raise ValueError("visibility flags do not match the number of points")
        v = pts[vis]
        if ((v < 0) | (v > 1)).any():
            raise ValueError("visible keypoints must lie in [0, 1]^2")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "visible", vis)

    def __len__(self):
        return len(self.points)

    def save(self, path) -> None:
        lines = [f"{x:.17g} {y:.17g} {int(v)}" for (x, y), v in zip(self.points, self.visible)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "KeypointSet":
        rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
        pts = np.array([[float(r[0]), float(r[1])] for r in rows]).reshape(-1, 2)
        vis = np.array([bool(int(r[2])) for r in rows], dtype=bool)
        return cls(pts, vis)


def hard_assign(mask: SoftMask | torch.Tensor) -> LabelGrid:
    """Per-pixel argmax over parts; ties go to the smallest part index."""
    data = mask.data if isinstance(mask, SoftMask) else mask
    arr = data.detach().cpu().numpy()
    # np.argmax returns the first maximal index
    return LabelGrid(np.argmax(arr, axis=0))


def mask_mass(mask: SoftMask, fg: ForegroundMask) -> torch.Tensor:
    """Soft pixel count of each part over the foreground."""
    if mask.data.shape[1:] != fg.data.shape:
        raise ValueError(f"mask {tuple(mask.data.shape[1:])} and foreground {tuple(fg.data.shape)} differ in size")
    if fg.count == 0:
        raise EmptyForegroundError("empty foreground")
    return (mask.data * fg.data.to(mask.data.dtype)).sum(dim=(1, 2))


def normalized_coords(H: int, W: int, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """Pixel-center coordinates in [0, 1]; the image midpoint maps to 0.5."""
    ys = (torch.arange(H, dtype=dtype) + 0.5) / H
    xs = (torch.arange(W, dtype=dtype) + 0.5) / W
    return ys, xs


def stack_images(images: Sequence[Image]) -> torch.Tensor:
    return torch.stack([im.data for im in images])
