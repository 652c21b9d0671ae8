"""Dataset manifests, sample loading, saliency masks and the synthetic part dataset.

Manifest: one sample per line, tab-separated
``split  image  fg_mask  keypoints  part_labels  class`` with ``-`` for a
missing optional field and ``#`` starting a comment. Paths are relative to the
manifest's directory.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image as PILImage

from .types import IGNORE, KeypointSet, LabelGrid

log = logging.getLogger(__name__)

SPLITS = ("train", "test")
MISSING = "-"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    split: str
    image: str
    fg: str
    keypoints: str | None = None
    parts: str | None = None
    class_name: str | None = None

    @property
    def sample_id(self) -> str:
        return Path(self.image).stem


@dataclass
class Manifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        entries = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 6:
                raise DatasetError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(cols)}")
            split, image, fg, kp, parts, cls_name = (None if c == MISSING else c for c in cols)
            if split not in SPLITS:
                raise DatasetError(f"{path}:{lineno}: unknown split {split!r}")
            if image is None or fg is None:
                raise DatasetError(f"{path}:{lineno}: image and foreground mask are required")
            entries.append(ManifestEntry(split, image, fg, kp, parts, cls_name))
        ids = [e.sample_id for e in entries]
        if len(set(ids)) != len(ids):
            raise DatasetError(f"{path}: duplicate sample ids")
        return cls(path.parent, entries)

    def write(self, path) -> None:
        lines = ["# split\timage\tfg\tkeypoints\tparts\tclass"]
        for e in self.entries:
            cols = [e.split, e.image, e.fg, e.keypoints, e.parts, e.class_name]
            lines.append("\t".join(MISSING if c is None else c for c in cols))
        Path(path).write_text("\n".join(lines) + "\n")

    def select(self, split: str | None = None, class_name: str | None = None) -> list[ManifestEntry]:
        return [e for e in self.entries
                if (split is None or e.split == split) and (class_name is None or e.class_name == class_name)]

    def counts(self) -> dict[str, int]:
        return {s: len(self.select(s)) for s in SPLITS}


@dataclass
class Sample:
    sample_id: str
    image: torch.Tensor  # (3, H, W) float in [0, 1]
    fg: torch.Tensor  # (H, W) bool
    keypoints: KeypointSet | None = None
    parts: LabelGrid | None = None
    class_name: str | None = None
    gt_fg: torch.Tensor | None = None  # annotated foreground when ``fg`` was substituted


def read_image(path) -> torch.Tensor:
    arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def read_mask(path, threshold: float = 0.5) -> torch.Tensor:
    arr = np.asarray(PILImage.open(path).convert("L"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr >= threshold)


def write_image(path, image: np.ndarray) -> None:
    """``image`` is (H, W, 3) float in [0, 1]."""
    PILImage.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path)


def write_mask(path, mask: np.ndarray) -> None:
    PILImage.fromarray(np.asarray(mask, bool).astype(np.uint8) * 255, mode="L").save(path)


def load_entry(root: Path, e: ManifestEntry) -> Sample:
    try:
        image = read_image(root / e.image)
        fg = read_mask(root / e.fg)
        kp = KeypointSet.load(root / e.keypoints) if e.keypoints else None
        parts = LabelGrid.load(root / e.parts) if e.parts else None
    except (OSError, ValueError) as exc:
        raise DatasetError(f"sample {e.sample_id}: {exc}") from exc
    if fg.shape != image.shape[1:]:
        raise DatasetError(f"sample {e.sample_id}: mask {tuple(fg.shape)} vs image {tuple(image.shape[1:])}")
    return Sample(e.sample_id, image, fg, kp, parts, e.class_name)


def load(manifest: Manifest | str | Path, split: str | None = None, class_name: str | None = None,
         shuffle_seed: int | None = None) -> list[Sample]:
    """Decode the selected samples in manifest order (or a seeded shuffle of it)."""
    if not isinstance(manifest, Manifest):
        manifest = Manifest.read(manifest)
    entries = manifest.select(split, class_name)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(entries))
        entries = [entries[i] for i in order]
    return [load_entry(manifest.root, e) for e in entries]


def iter_samples(manifest, split=None) -> Iterator[Sample]:
    if not isinstance(manifest, Manifest):
        manifest = Manifest.read(manifest)
    for e in manifest.select(split):
        yield load_entry(manifest.root, e)


def load_saliency_masks(directory, samples: Sequence[Sample], threshold: float = 0.5) -> list[Sample]:
    """Replace each sample's foreground with ``<directory>/<sample_id>.png``, binarized."""
    directory = Path(directory)
    out = []
    for s in samples:
        path = directory / f"{s.sample_id}.png"
        if not path.exists():
            raise DatasetError(f"sample {s.sample_id}: no saliency mask at {path}")
        fg = read_mask(path, threshold)
        if fg.shape != s.fg.shape:
            raise DatasetError(f"sample {s.sample_id}: saliency mask {tuple(fg.shape)} vs image {tuple(s.fg.shape)}")
        out.append(Sample(s.sample_id, s.image, fg, s.keypoints, s.parts, s.class_name,
                          s.gt_fg if s.gt_fg is not None else s.fg))
    return out


def erode(fg: np.ndarray, pixels: int = 1) -> np.ndarray:
    from scipy.ndimage import binary_erosion

    return binary_erosion(np.asarray(fg, bool), iterations=pixels, border_value=0)


def write_saliency_dir(directory, samples: Sequence[Sample], erode_pixels: int = 0) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in samples:
        m = s.fg.numpy()
        write_mask(directory / f"{s.sample_id}.png", erode(m, erode_pixels) if erode_pixels else m)
    return directory


# --------------------------------------------------------------------- synthetic

TEXTURES = ("solid", "stripes", "noise-texture")

# canonical part layout: (center x, center y, semi-axis x, semi-axis y) in units of image size
_LAYOUT = [
    (0.00, 0.02, 0.17, 0.21),   # torso
    (0.00, -0.27, 0.12, 0.10),  # head
    (0.00, 0.30, 0.15, 0.10),   # base
    (0.22, 0.00, 0.08, 0.17),   # limb
    (-0.22, 0.00, 0.08, 0.17),
    (0.00, -0.40, 0.05, 0.04),
]
# (texture, palette index); parts 0/1 share a color and differ in texture,
# parts 0/2 share a texture and differ in color
_APPEARANCE = [("solid", 0), ("stripes", 0), ("solid", 1), ("noise-texture", 2), ("stripes", 3), ("solid", 4)]
_PALETTE = np.array([
    [0.75, 0.35, 0.30],
    [0.30, 0.45, 0.75],
    [0.35, 0.70, 0.35],
    [0.80, 0.75, 0.30],
    [0.60, 0.35, 0.70],
])


@dataclass(frozen=True)
class SyntheticSpec:
    K_parts: int = 4
    image_size: int = 64
    n_train: int = 500
    n_test: int = 100
    color_jitter: float = 0.04
    stripe_amplitude: float = 0.22
    stripe_period: float = 4.0
    noise_amplitude: float = 0.25
    pixel_noise: float = 0.01
    pose_rotation: float = 25.0
    pose_scale: tuple[float, ...] = (0.85, 1.1)
    pose_shift: float = 0.06
    deform: float = 0.02
    clutter: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.K_parts <= len(_LAYOUT):
            raise ValueError(f"K_parts must be in [1, {len(_LAYOUT)}], got {self.K_parts}")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if self.n_train < 0 or self.n_test < 0 or self.n_train + self.n_test == 0:
            raise ValueError("need at least one sample")
        if len(self.pose_scale) != 2 or not 0 < self.pose_scale[0] <= self.pose_scale[1]:
            raise ValueError("pose_scale must be 'min, max' with 0 < min <= max")
        if not 0 <= self.clutter <= 1:
            raise ValueError("clutter must lie in [0, 1]")


@dataclass
class SyntheticSample:
    image: np.ndarray  # (H, W, 3)
    fg: np.ndarray  # (H, W) bool
    parts: np.ndarray  # (H, W) int, IGNORE on background
    keypoints: KeypointSet


def _background(rng, S: int, clutter: float) -> np.ndarray:
    base = rng.uniform(0.3, 0.7, size=3)
    # smooth color field from a coarse random grid
    coarse = rng.uniform(-1, 1, size=(4, 4, 3))
    idx = np.linspace(0, 3, S)
    i0 = np.floor(idx).astype(int).clip(0, 2)
    t = idx - i0
    rows = coarse[i0] * (1 - t)[:, None, None] + coarse[i0 + 1] * t[:, None, None]
    field_ = rows[:, i0] * (1 - t)[None, :, None] + rows[:, i0 + 1] * t[None, :, None]
    bg = base + 0.15 * clutter * field_
    yy, xx = np.mgrid[0:S, 0:S]
    for _ in range(int(round(6 * clutter))):
        cx, cy, r = rng.uniform(0, S), rng.uniform(0, S), rng.uniform(2, S / 8)
        bg[(xx - cx) ** 2 + (yy - cy) ** 2 < r ** 2] = rng.uniform(0.1, 0.9, size=3)
    return bg


def synth_sample(spec: SyntheticSpec, rng: np.random.Generator) -> SyntheticSample:
    S, K = spec.image_size, spec.K_parts
    th = np.radians(rng.uniform(-spec.pose_rotation, spec.pose_rotation))
    scale = rng.uniform(*spec.pose_scale)
    shift = rng.uniform(-spec.pose_shift, spec.pose_shift, size=2)
    c, s = np.cos(th), np.sin(th)

    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    # object-frame coordinates in units of image size
    px = (xx + 0.5) / S - 0.5 - shift[0]
    py = (yy + 0.5) / S - 0.5 - shift[1]
    ox = (c * px + s * py) / scale
    oy = (-s * px + c * py) / scale

    dist = np.full((K, S, S), np.inf)
    for k in range(K):
        cx, cy, ax, ay = _LAYOUT[k]
        cx, cy = np.array([cx, cy]) + rng.normal(0, spec.deform, size=2)
        dist[k] = ((ox - cx) / ax) ** 2 + ((oy - cy) / ay) ** 2
    inside = dist <= 1
    fg = inside.any(0)
    parts = np.where(fg, np.argmin(np.where(inside, dist, np.inf), axis=0), IGNORE)

    image = _background(rng, S, spec.clutter)
    for k in range(K):
        texture, pal = _APPEARANCE[k]
        color = np.clip(_PALETTE[pal] + rng.normal(0, spec.color_jitter, size=3), 0.15, 0.85)
        region = parts == k
        if texture == "solid":
            tex = np.zeros((S, S))
        elif texture == "stripes":
            phase = rng.uniform(0, 2 * np.pi)
            tex = spec.stripe_amplitude * np.sign(np.sin(2 * np.pi * oy * S / spec.stripe_period + phase))
        else:
            tex = spec.noise_amplitude * rng.uniform(-1, 1, size=(S, S))
        image[region] = color + tex[region][:, None]
    image = np.clip(image + rng.normal(0, spec.pixel_noise, size=image.shape), 0, 1)

    pts, vis = np.full((K, 2), 0.5), np.zeros(K, bool)
    for k in range(K):
        ys, xs = np.nonzero(parts == k)
        if len(xs):
            pts[k] = ((xs + 0.5).mean() / S, (ys + 0.5).mean() / S)
            vis[k] = True
    return SyntheticSample(image, fg, parts, KeypointSet(pts, vis))


def generate(spec: SyntheticSpec, out_dir) -> Path:
    """Write images, masks, part labels, keypoints and ``manifest.tsv``; returns the manifest path."""
    out = Path(out_dir)
    for sub in ("images", "masks", "parts", "keypoints"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_train + spec.n_test)
    entries = []
    for i, ss in enumerate(seeds):
        split = "train" if i < spec.n_train else "test"
        smp = synth_sample(spec, np.random.default_rng(ss))
        name = f"{split}_{i:05d}"
        write_image(out / "images" / f"{name}.png", smp.image)
        write_mask(out / "masks" / f"{name}.png", smp.fg)
        LabelGrid(smp.parts).save(out / "parts" / f"{name}.png")
        smp.keypoints.save(out / "keypoints" / f"{name}.txt")
        entries.append(ManifestEntry(split, f"images/{name}.png", f"masks/{name}.png",
                                     f"keypoints/{name}.txt", f"parts/{name}.png", "synthetic"))
    manifest_path = out / "manifest.tsv"
    Manifest(out, entries).write(manifest_path)
    log.info("wrote %d samples to %s", len(entries), out)
    return manifest_path
