"""Random affine + photometric transforms with an explicit action on image-like tensors.

Geometric warps act on anything shaped ``(C, H, W)``: images, soft masks,
foreground masks. Photometric jitter acts on images only; its action on part
masks is the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch


class TransformConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TransformConfig:
    rot_max: float = 30.0
    scale_min: float = 0.8
    scale_max: float = 1.2
    translate_max: float = 0.1
    brightness: float = 0.3
    contrast: float = 0.3
    saturation: float = 0.3

    def validate(self) -> None:
        if self.rot_max < 0 or self.translate_max < 0:
            raise TransformConfigError("rot_max and translate_max must be non-negative")
        if self.scale_min > self.scale_max:
            raise TransformConfigError(f"scale_min {self.scale_min} exceeds scale_max {self.scale_max}")
        # |det| of the linear part is scale**2
        if self.scale_min ** 2 <= 0.1:
            raise TransformConfigError("scale_min too small: warp would be near-singular")
        for name in ("brightness", "contrast", "saturation"):
            j = getattr(self, name)
            if not 0 <= j < 1:
                raise TransformConfigError(f"{name} jitter must lie in [0, 1), got {j}")

    @classmethod
    def identity(cls) -> "TransformConfig":
        return cls(0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class TransformSpec:
    rotation: float = 0.0  # degrees
    scale: float = 1.0
    translate: tuple[float, float] = (0.0, 0.0)  # fraction of (W, H)
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        if abs(self.det) <= 0.1:
            raise TransformConfigError(f"near-singular warp (|det| = {abs(self.det):.3g})")
        if min(self.brightness, self.contrast, self.saturation) < 0:
            raise TransformConfigError("photometric factors must be non-negative")

    @property
    def det(self) -> float:
        return self.scale ** 2

    @property
    def affine(self) -> np.ndarray:
        """2x3 matrix acting on centered coordinates; translation in image fractions."""
        th = math.radians(self.rotation)
        c, s = math.cos(th), math.sin(th)
        return np.array(
            [[self.scale * c, -self.scale * s, self.translate[0]],
             [self.scale * s, self.scale * c, self.translate[1]]]
        )

    @property
    def is_geometric_identity(self) -> bool:
        return self.rotation == 0 and self.scale == 1 and tuple(self.translate) == (0.0, 0.0)

    def photometric_only(self) -> "TransformSpec":
        return TransformSpec(brightness=self.brightness, contrast=self.contrast,
                             saturation=self.saturation, seed=self.seed)

    def geometric_only(self) -> "TransformSpec":
        return TransformSpec(self.rotation, self.scale, self.translate, seed=self.seed)

    def inverse_geometric(self, H: int, W: int) -> "TransformSpec":
        """Geometric inverse for an H x W grid (translation is size-relative)."""
        # forward map p -> sR p + t, so the inverse is p -> (1/s)R^T (p - t)
        th = math.radians(self.rotation)
        c, s = math.cos(th), math.sin(th)
        tx, ty = self.translate[0] * W, self.translate[1] * H
        ix = -(c * tx + s * ty) / self.scale
        iy = -(-s * tx + c * ty) / self.scale
        return TransformSpec(-self.rotation, 1.0 / self.scale, (ix / W, iy / H))


IDENTITY = TransformSpec()


def sample_transform(config: TransformConfig, rng: np.random.Generator | int) -> TransformSpec:
    config.validate()
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    u = rng.uniform(size=7)

    def span(x, lo, hi):
        return lo + (hi - lo) * x

    return TransformSpec(
        rotation=span(u[0], -config.rot_max, config.rot_max),
        scale=span(u[1], config.scale_min, config.scale_max),
        translate=(span(u[2], -config.translate_max, config.translate_max),
                   span(u[3], -config.translate_max, config.translate_max)),
        brightness=span(u[4], 1 - config.brightness, 1 + config.brightness),
        contrast=span(u[5], 1 - config.contrast, 1 + config.contrast),
        saturation=span(u[6], 1 - config.saturation, 1 + config.saturation),
        seed=seed,
    )


def source_coords(t: TransformSpec, H: int, W: int, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """For every output pixel, the (x, y) input location it samples from."""
    cx, cy = (W - 1) / 2, (H - 1) / 2
    ys, xs = torch.meshgrid(torch.arange(H, dtype=dtype), torch.arange(W, dtype=dtype), indexing="ij")
    if t.is_geometric_identity:
        return xs, ys
    th = math.radians(t.rotation)
    c, s = math.cos(th), math.sin(th)
    ox = xs - cx - t.translate[0] * W
    oy = ys - cy - t.translate[1] * H
    sx = (c * ox + s * oy) / t.scale + cx
    sy = (-s * ox + c * oy) / t.scale + cy
    return sx, sy


def _sample(tensor: torch.Tensor, sx: torch.Tensor, sy: torch.Tensor, interpolation: str):
    # tensor (C, H, W); sx, sy (H', W')
    C, H, W = tensor.shape
    tol = 1e-6
    valid = (sx >= -tol) & (sx <= W - 1 + tol) & (sy >= -tol) & (sy <= H - 1 + tol)
    flat = tensor.reshape(C, H * W)
    if interpolation == "nearest":
        ix = torch.floor(sx + 0.5).long().clamp(0, W - 1)
        iy = torch.floor(sy + 0.5).long().clamp(0, H - 1)
        out = flat[:, (iy * W + ix).reshape(-1)].reshape(C, *sx.shape)
    elif interpolation == "bilinear":
        sx = sx.clamp(0, W - 1).to(tensor.dtype)
        sy = sy.clamp(0, H - 1).to(tensor.dtype)
        x0, y0 = torch.floor(sx), torch.floor(sy)
        wx, wy = sx - x0, sy - y0
        x0, y0 = x0.long(), y0.long()
        x1, y1 = (x0 + 1).clamp(max=W - 1), (y0 + 1).clamp(max=H - 1)

        def at(iy, ix):
            return flat[:, (iy * W + ix).reshape(-1)].reshape(C, *sx.shape)

        out = (at(y0, x0) * ((1 - wx) * (1 - wy)) + at(y0, x1) * (wx * (1 - wy))
               + at(y1, x0) * ((1 - wx) * wy) + at(y1, x1) * (wx * wy))
    else:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    out = torch.where(valid, out, torch.zeros((), dtype=out.dtype))
    return out, valid


def apply_geometric(t: TransformSpec, tensor: torch.Tensor, interpolation: str = "bilinear"):
    """Inverse-warp ``tensor`` of shape (C, H, W); returns (warped, validity mask)."""
    H, W = tensor.shape[-2:]
    sx, sy = source_coords(t, H, W)
    return _sample(tensor, sx, sy, interpolation)


def warp_batch(specs: Sequence[TransformSpec], tensor: torch.Tensor, interpolation: str = "bilinear"):
    """Per-item warp of an (N, C, H, W) batch."""
    if len(specs) != tensor.shape[0]:
        raise ValueError("need one transform per batch item")
    outs, valids = zip(*(apply_geometric(t, x, interpolation) for t, x in zip(specs, tensor)))
    return torch.stack(outs), torch.stack(valids)


_GRAY = (0.299, 0.587, 0.114)


def _gray(img: torch.Tensor) -> torch.Tensor:
    return _GRAY[0] * img[0] + _GRAY[1] * img[1] + _GRAY[2] * img[2]


def apply_photometric(t: TransformSpec, image: torch.Tensor) -> torch.Tensor:
    """Brightness, contrast about the mean gray level, then saturation; clipped to [0, 1]."""
    if t.brightness == 1 and t.contrast == 1 and t.saturation == 1:
        return image
    x = image * t.brightness
    if t.contrast != 1:
        m = _gray(x).mean()
        x = m + t.contrast * (x - m)
    if t.saturation != 1:
        g = _gray(x)
        x = g + t.saturation * (x - g)
    return x.clamp(0, 1)


def apply_to_image(t: TransformSpec, image: torch.Tensor, interpolation: str = "bilinear"):
    """Full action on an image: warp, then photometric jitter."""
    warped, valid = apply_geometric(t, image, interpolation)
    return apply_photometric(t, warped), valid
