"""Training objectives over soft part masks.

All functions take batched tensors:

* images ``(N, 3, H, W)``
* masks ``(N, K, H, W)``, each pixel a distribution over K parts
* foreground ``(N, H, W)`` bool
* features ``(N, d, h, w)``

Pixel terms are summed, exactly as the objectives are written; batch
reductions are means over N so that loss weights do not depend on batch size.
Typed single-item values from :mod:`partscope.types` are accepted too.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from .transforms import TransformSpec, warp_batch
from .types import EPS_MASS, EmptyForegroundError, FeatureMap, ForegroundMask, Image, PartDescriptor, SoftMask

EPS_PROB = 1e-8
DEFAULT_TAU = 0.1


class EmptyPartError(ValueError):
    pass


class DegenerateTransformError(ValueError):
    pass


def _batched(x, ndim: int) -> torch.Tensor:
    if isinstance(x, (Image, ForegroundMask, SoftMask, FeatureMap)):
        x = x.data
    return x.unsqueeze(0) if x.ndim == ndim - 1 else x


def _check_foreground(fg: torch.Tensor) -> None:
    if not bool(fg.flatten(1).any(1).all()):
        raise EmptyForegroundError("empty foreground")


@dataclass(frozen=True)
class LossWeights:
    f: float = 1.0
    c: float = 1.0
    v: float = 1.0
    e: float = 1.0
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        lams = (self.f, self.c, self.v, self.e)
        if min(lams) < 0:
            raise ValueError("loss weights must be non-negative")
        if max(lams) == 0:
            raise ValueError("at least one loss weight must be positive")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.f * factor, self.c * factor, self.v * factor, self.e * factor, self.tau)


def part_weights(mask: torch.Tensor, fg: torch.Tensor, size: tuple[int, int] | None = None) -> torch.Tensor:
    """Foreground-restricted mask, area-pooled to ``size`` when it differs from the mask grid."""
    w = mask * fg.unsqueeze(1).to(mask.dtype)
    if size is not None and tuple(size) != tuple(w.shape[-2:]):
        w = F.adaptive_avg_pool2d(w, size)
    return w


def _weighted_stats(values: torch.Tensor, weights: torch.Tensor):
    # values (N, d, h, w), weights (N, K, h, w)
    mass = weights.sum(dim=(2, 3))
    valid = mass > EPS_MASS
    sums = torch.einsum("nkhw,ndhw->nkd", weights, values)
    means = sums / mass.clamp(min=EPS_MASS).unsqueeze(-1)
    return means, mass, valid


def _weighted_variance(values: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Per-image sum over parts and pixels of w_ku * ||mean_k - x_u||^2."""
    means, _, valid = _weighted_stats(values, weights)
    diff = values.unsqueeze(1) - means[..., None, None]  # (N, K, d, h, w)
    per_part = (weights * diff.pow(2).sum(2)).sum(dim=(2, 3))
    per_part = torch.where(valid, per_part, torch.zeros((), dtype=per_part.dtype))
    return per_part.sum(1)


def part_descriptors(features, mask, fg):
    """Mask-weighted mean feature per (image, part); returns ``(z, valid)`` with z (N, K, d)."""
    features, mask, fg = _batched(features, 4), _batched(mask, 4), _batched(fg, 3)
    _check_foreground(fg)
    w = part_weights(mask, fg, features.shape[-2:])
    z, _, valid = _weighted_stats(features, w)
    return z, valid


def part_descriptor(features, mask, fg, k: int) -> PartDescriptor:
    z, valid = part_descriptors(features, mask, fg)
    if not bool(valid[0, k]):
        raise EmptyPartError(f"part {k} has no mass on the foreground")
    return PartDescriptor(z[0, k], k)


def feature_loss(features, mask, fg) -> torch.Tensor:
    """Within-part feature variance, mask pooled to the feature grid."""
    features, mask, fg = _batched(features, 4), _batched(mask, 4), _batched(fg, 3)
    _check_foreground(fg)
    w = part_weights(mask, fg, features.shape[-2:])
    return _weighted_variance(features, w).mean()


def visual_loss(images, mask, fg) -> torch.Tensor:
    """Within-part color variance at full image resolution."""
    images, mask, fg = _batched(images, 4), _batched(mask, 4), _batched(fg, 3)
    _check_foreground(fg)
    if images.shape[-2:] != mask.shape[-2:]:
        raise ValueError("visual loss needs the mask at image resolution")
    return _weighted_variance(images, part_weights(mask, fg)).mean()


def info_nce(anchors, anchor_valid, positives, positive_valid, bank, bank_valid, tau: float = DEFAULT_TAU,
             normalize: bool = True, same_image_negatives: bool = False, reduction: str = "mean"):
    """Contrastive loss with explicit positives and a negative bank.

    For anchor (n, k) the negatives are ``bank[i, j]`` with ``j != k`` and
    ``i != n`` (``i == n`` also allowed when ``same_image_negatives``).
    Anchors whose own or positive descriptor is invalid are dropped.
    """
    if normalize:
        anchors, positives, bank = (F.normalize(x, dim=-1) for x in (anchors, positives, bank))
    N, K, _ = anchors.shape
    pos = (anchors * positives).sum(-1) / tau  # (N, K)
    sims = torch.einsum("nkd,ijd->nkij", anchors, bank) / tau
    eye_n = torch.eye(N, dtype=torch.bool)
    eye_k = torch.eye(K, dtype=torch.bool)
    neg = bank_valid[None, None] & ~eye_k[None, :, None, :]
    if not same_image_negatives:
        neg = neg & ~eye_n[:, None, :, None]
    sims = sims.masked_fill(~neg, float("-inf")).reshape(N, K, -1)
    logits = torch.cat([pos.unsqueeze(-1), sims], dim=-1)
    terms = torch.logsumexp(logits, dim=-1) - pos
    used = anchor_valid & positive_valid
    total = torch.where(used, terms, torch.zeros((), dtype=terms.dtype)).sum()
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / N
    raise ValueError(f"unknown reduction {reduction!r}")


def _gather_targets(z, valid, targets):
    N, K, _ = z.shape
    t = torch.as_tensor(targets, dtype=torch.long)
    if t.shape != (N, K):
        raise ValueError(f"targets must have shape {(N, K)}, got {tuple(t.shape)}")
    if ((t == torch.arange(N)[:, None]) & (t >= 0)).any():
        raise ValueError("a target must come from a different image")
    has = t >= 0
    idx = t.clamp(min=0)
    parts = torch.arange(K).expand(N, K)
    return z[idx, parts], has & valid[idx, parts]


def contrastive_loss(z, valid, targets, tau: float = DEFAULT_TAU, normalize: bool = True,
                     same_image_negatives: bool = False, reduction: str = "mean") -> torch.Tensor:
    """Cross-image contrastive loss over part descriptors.

    ``targets[n, k]`` is the image whose part-k descriptor is the positive for
    anchor (n, k); -1 skips the anchor.
    """
    if z.shape[0] < 2:
        raise ValueError("contrastive requires batch >= 2")
    positives, pvalid = _gather_targets(z, valid, targets)
    return info_nce(z, valid, positives, pvalid, z, valid, tau, normalize, same_image_negatives, reduction)


def l2_descriptor_loss(z, valid, targets, reduction: str = "mean") -> torch.Tensor:
    """Squared distance between each descriptor and its cross-image target."""
    if z.shape[0] < 2:
        raise ValueError("contrastive requires batch >= 2")
    positives, pvalid = _gather_targets(z, valid, targets)
    d = (z - positives).pow(2).sum(-1)
    total = torch.where(valid & pvalid, d, torch.zeros((), dtype=d.dtype)).sum()
    return total / z.shape[0] if reduction == "mean" else total


def symmetric_kl(p: torch.Tensor, q: torch.Tensor, eps: float = EPS_PROB) -> torch.Tensor:
    """KL(p||q) + KL(q||p) over dim 1, probabilities clamped to [eps, 1] inside the log."""
    lp = p.clamp(eps, 1).log()
    lq = q.clamp(eps, 1).log()
    return ((p - q) * (lp - lq)).sum(1)


def equivariance_loss(mask_orig, mask_transformed, transforms: Sequence[TransformSpec] | TransformSpec,
                      fg=None, eps: float = EPS_PROB) -> torch.Tensor:
    """Symmetric KL between the warped mask T(f(I)) and the mask f(T(I)).

    Only pixels whose warp source lies inside the input grid are scored, and
    only foreground ones when ``fg`` (in the original frame) is given.
    """
    mask_orig, mask_transformed = _batched(mask_orig, 4), _batched(mask_transformed, 4)
    if isinstance(transforms, TransformSpec):
        transforms = [transforms] * mask_orig.shape[0]
    if mask_orig.shape != mask_transformed.shape:
        raise ValueError("both masks must share a resolution")
    warped, region = warp_batch(transforms, mask_orig, "bilinear")
    if fg is not None:
        fg = _batched(fg, 3)
        fg_w, _ = warp_batch(transforms, fg.unsqueeze(1).to(mask_orig.dtype), "nearest")
        region = region & (fg_w[:, 0] > 0.5)
    if not bool(region.flatten(1).any(1).all()):
        raise DegenerateTransformError("degenerate transform: no valid pixels left after warping")
    kl = symmetric_kl(warped, mask_transformed, eps)
    kl = torch.where(region, kl, torch.zeros((), dtype=kl.dtype))
    return kl.sum(dim=(1, 2)).mean()


@dataclass
class LossBreakdown:
    total: torch.Tensor
    terms: dict[str, float] = field(default_factory=dict)

    def row(self) -> dict[str, float]:
        return {"loss_total": float(self.total.detach()), **{f"loss_{k}": self.terms.get(k, 0.0) for k in "fcve"}}


def total_loss(weights: LossWeights, *, images=None, mask=None, fg=None, features=None, targets=None,
               mask_transformed=None, transforms=None, use_l2: bool = False,
               same_image_negatives: bool = False, contrastive_fn=None) -> LossBreakdown:
    """Weighted sum of the four objectives; zero-weight terms are never evaluated.

    ``contrastive_fn`` overrides the contrastive term (used for the
    same-image-views variant); it must return the term value.
    """
    total = None
    terms: dict[str, float] = {}

    def add(name, lam, value):
        nonlocal total
        terms[name] = float(value.detach())
        total = lam * value if total is None else total + lam * value

    if weights.f > 0:
        add("f", weights.f, feature_loss(features, mask, fg))
    if weights.c > 0:
        if contrastive_fn is not None:
            add("c", weights.c, contrastive_fn())
        else:
            z, valid = part_descriptors(features, mask, fg)
            if use_l2:
                add("c", weights.c, l2_descriptor_loss(z, valid, targets))
            else:
                add("c", weights.c, contrastive_loss(z, valid, targets, weights.tau,
                                                     same_image_negatives=same_image_negatives))
    if weights.v > 0:
        add("v", weights.v, visual_loss(images, mask, fg))
    if weights.e > 0:
        add("e", weights.e, equivariance_loss(mask, mask_transformed, transforms, fg))
    return LossBreakdown(total, terms)
