import math

import numpy as np
import pytest
import torch

from partscope import losses
from partscope.losses import (
    DegenerateTransformError, EmptyPartError, LossWeights, contrastive_loss, equivariance_loss, feature_loss,
    l2_descriptor_loss, part_descriptor, part_descriptors, total_loss, visual_loss,
)
from partscope.transforms import IDENTITY, TransformSpec, apply_geometric
from partscope.types import EmptyForegroundError, FeatureMap, ForegroundMask, SoftMask

import oracles

D = torch.float64


def rand_mask(N, K, H, W, seed=0, scale=2.0):
    g = torch.Generator().manual_seed(seed)
    return torch.softmax(torch.randn(N, K, H, W, generator=g, dtype=D) * scale, 1)


def full_fg(N, H, W):
    return torch.ones(N, H, W, dtype=torch.bool)


# ---------------------------------------------------------------- descriptors

def test_descriptor_of_constant_features():
    v = torch.tensor([0.3, -1.2, 2.0], dtype=D)
    feats = v.view(3, 1, 1).expand(3, 4, 4).clone()
    z, valid = part_descriptors(feats, rand_mask(1, 3, 4, 4)[0], torch.ones(4, 4, dtype=torch.bool))
    assert valid.all()
    assert torch.allclose(z[0], v.expand(3, 3), atol=1e-12)


def test_descriptor_of_single_pixel_part():
    feats = torch.randn(5, 4, 4, dtype=D)
    labels = torch.zeros(4, 4, dtype=torch.long)
    labels[2, 1] = 1
    d = part_descriptor(FeatureMap(feats), SoftMask.one_hot(labels, 2), ForegroundMask(torch.ones(4, 4)), 1)
    assert torch.allclose(d.vector, feats[:, 2, 1])


def test_descriptor_uniform_mask_is_plain_mean():
    feats = torch.tensor([[[1.0, 0.0], [2.0, 4.0]], [[0.0, 1.0], [-1.0, 3.0]]], dtype=D)
    mask = torch.full((2, 2, 2), 0.5, dtype=D)
    z, _ = part_descriptors(feats, mask, torch.ones(2, 2, dtype=torch.bool))
    # hand sum: channel 0 -> (1+0+2+4)/4, channel 1 -> (0+1-1+3)/4
    assert torch.allclose(z[0, 0], torch.tensor([7 / 4, 3 / 4], dtype=D))
    assert torch.allclose(z[0, 1], z[0, 0])


def test_empty_part_signal():
    labels = torch.zeros(4, 4, dtype=torch.long)
    with pytest.raises(EmptyPartError):
        part_descriptor(torch.randn(2, 4, 4, dtype=D), SoftMask.one_hot(labels, 2), torch.ones(4, 4, dtype=torch.bool), 1)


def test_mask_pooled_to_feature_grid():
    # 2x2 features against a 4x4 mask: each feature cell sees the average of a 2x2 mask block
    feats = torch.randn(1, 3, 2, 2, dtype=D)
    mask = rand_mask(1, 2, 4, 4, seed=4)
    fg = torch.ones(1, 4, 4, dtype=torch.bool)
    fg[0, 0, 0] = False
    w = torch.zeros(2, 2, 2, dtype=D)
    for k in range(2):
        for a in range(2):
            for b in range(2):
                block = mask[0, k, 2 * a:2 * a + 2, 2 * b:2 * b + 2] * fg[0, 2 * a:2 * a + 2, 2 * b:2 * b + 2]
                w[k, a, b] = block.mean()
    expected = oracles.weighted_variance(feats[0].numpy(), w.numpy())
    assert abs(float(feature_loss(feats, mask, fg)) - expected) < 1e-12


# ---------------------------------------------------------------- feature loss

def test_feature_loss_constant_features_is_zero():
    feats = torch.ones(1, 4, 5, 5, dtype=D) * 0.7
    assert float(feature_loss(feats, rand_mask(1, 3, 5, 5), full_fg(1, 5, 5))) == pytest.approx(0, abs=1e-12)


def test_feature_loss_two_pixels_single_part():
    f1, f2 = np.array([1.0, 2.0, -1.0]), np.array([0.0, -1.0, 3.0])
    feats = torch.tensor(np.stack([f1, f2], 1).reshape(3, 1, 2))
    mask = torch.ones(1, 1, 2, dtype=D)
    fg = torch.ones(1, 2, dtype=torch.bool)
    expected = oracles.weighted_variance(feats.numpy(), mask.numpy())
    # each pixel sits half the difference away from the mean
    assert expected == pytest.approx(2 * np.sum(((f1 - f2) / 2) ** 2))
    assert float(feature_loss(feats, mask, fg)) == pytest.approx(expected, rel=1e-12)


def test_feature_loss_zero_on_matching_partition():
    labels = torch.tensor([[0, 0, 1], [2, 1, 1], [2, 2, 0]])
    palette = torch.randn(3, 4, dtype=D)
    feats = palette[labels].permute(2, 0, 1)
    mask = SoftMask.one_hot(labels, 3)
    assert float(feature_loss(feats, mask, torch.ones(3, 3, dtype=torch.bool))) == pytest.approx(0, abs=1e-12)


def test_feature_loss_matches_oracle_on_random_instance():
    feats = torch.randn(2, 4, 5, 5, dtype=D)
    mask = rand_mask(2, 3, 5, 5, seed=9)
    fg = torch.from_numpy(np.random.default_rng(9).random((2, 5, 5)) > 0.3)
    got = float(feature_loss(feats, mask, fg))
    expected = np.mean([oracles.weighted_variance(feats[n].numpy(), (mask[n] * fg[n]).numpy()) for n in range(2)])
    assert got == pytest.approx(expected, rel=1e-12)


def test_feature_loss_empty_foreground():
    with pytest.raises(EmptyForegroundError):
        feature_loss(torch.randn(1, 2, 3, 3, dtype=D), rand_mask(1, 2, 3, 3), torch.zeros(1, 3, 3, dtype=torch.bool))


# ---------------------------------------------------------------- contrastive

def test_contrastive_without_negatives_is_zero():
    z = torch.randn(2, 1, 5, dtype=D)
    valid = torch.ones(2, 1, dtype=torch.bool)
    assert float(contrastive_loss(z, valid, [[1], [0]], tau=0.1)) == 0.0


def _orthonormal_parts():
    # part k is the same unit vector e_k in both images
    e = torch.eye(4, dtype=D)
    return torch.stack([e[:2], e[:2]]), torch.ones(2, 2, dtype=torch.bool), [[1, 1], [0, 0]]


def test_contrastive_orthonormal_example():
    z, valid, targets = _orthonormal_parts()
    got = float(contrastive_loss(z, valid, targets, tau=1.0, reduction="sum"))
    expected = oracles.info_nce(z.numpy(), targets, 1.0)
    assert got == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(4 * math.log(1 + math.exp(-1)), rel=1e-12)


def test_contrastive_orthonormal_example_with_same_image_negatives():
    z, valid, targets = _orthonormal_parts()
    got = float(contrastive_loss(z, valid, targets, tau=1.0, same_image_negatives=True, reduction="sum"))
    assert got == pytest.approx(oracles.info_nce(z.numpy(), targets, 1.0, same_image=True), rel=1e-12)
    assert got == pytest.approx(4 * math.log(1 + 2 * math.exp(-1)), rel=1e-12)


@pytest.mark.parametrize("same_image", [False, True])
def test_contrastive_matches_oracle_on_random_batch(same_image):
    rng = np.random.default_rng(2)
    z = torch.from_numpy(rng.normal(size=(4, 3, 6)))
    targets = [[int(rng.choice([i for i in range(4) if i != n])) for _ in range(3)] for n in range(4)]
    got = float(contrastive_loss(z, torch.ones(4, 3, dtype=torch.bool), targets, tau=0.3,
                                 same_image_negatives=same_image, reduction="sum"))
    assert got == pytest.approx(oracles.info_nce(z.numpy(), targets, 0.3, same_image=same_image), rel=1e-10)


def test_contrastive_scale_invariance():
    z = torch.randn(3, 2, 4, dtype=D)
    valid = torch.ones(3, 2, dtype=torch.bool)
    t = [[1, 2], [2, 0], [0, 1]]
    a = contrastive_loss(z, valid, t)
    assert torch.allclose(a, contrastive_loss(z * 7.5, valid, t), rtol=1e-12)


def test_contrastive_skips_missing_targets_and_invalid_parts():
    rng = np.random.default_rng(3)
    z = torch.from_numpy(rng.normal(size=(3, 2, 4)))
    valid = torch.ones(3, 2, dtype=torch.bool)
    full = float(contrastive_loss(z, valid, [[1, 2], [2, 0], [0, 1]], reduction="sum"))
    skipped = float(contrastive_loss(z, valid, [[-1, 2], [2, 0], [0, 1]], reduction="sum"))
    one = oracles.info_nce(z.numpy(), [[1, -1], [-1, -1], [-1, -1]], 0.1)
    assert full - skipped == pytest.approx(one, rel=1e-10)
    with pytest.raises(ValueError, match="batch >= 2"):
        contrastive_loss(z[:1], valid[:1], [[-1, -1]])
    with pytest.raises(ValueError):
        contrastive_loss(z, valid, [[0, 1], [2, 0], [0, 1]])


def test_l2_descriptor_examples():
    z = torch.randn(1, 3, 4, dtype=D).expand(3, 3, 4).clone()
    valid = torch.ones(3, 3, dtype=torch.bool)
    assert float(l2_descriptor_loss(z, valid, [[1, 2, 1], [0, 0, 2], [1, 0, 0]])) == 0.0

    e = torch.eye(2, dtype=D)
    z = torch.stack([e[0:1], e[1:2]])  # (2, 1, 2)
    got = float(l2_descriptor_loss(z, torch.ones(2, 1, dtype=torch.bool), [[1], [0]], reduction="sum"))
    assert got == pytest.approx(2 * float((e[0] - e[1]).pow(2).sum()))


def test_l2_and_contrastive_agree_on_direction():
    rng = np.random.default_rng(5)
    base = torch.from_numpy(rng.normal(size=(2, 2, 3)))
    aligned = base.clone()
    aligned[1] = aligned[0]  # anchor equals its target
    valid = torch.ones(2, 2, dtype=torch.bool)
    t = [[1, 1], [0, 0]]
    assert float(l2_descriptor_loss(aligned, valid, t)) < float(l2_descriptor_loss(base, valid, t))
    assert float(contrastive_loss(aligned, valid, t)) < float(contrastive_loss(base, valid, t))


# ---------------------------------------------------------------- visual loss

def two_color_image(H=6, W=6):
    img = torch.zeros(1, 3, H, W, dtype=D)
    img[0, :, :, : W // 2] = torch.tensor([0.9, 0.1, 0.2], dtype=D).view(3, 1, 1)
    img[0, :, :, W // 2:] = torch.tensor([0.1, 0.6, 0.8], dtype=D).view(3, 1, 1)
    labels = torch.zeros(H, W, dtype=torch.long)
    labels[:, W // 2:] = 1
    return img, labels


def test_visual_loss_uniform_foreground_is_zero():
    img = torch.full((1, 3, 6, 6), 0.3, dtype=D)
    assert float(visual_loss(img, rand_mask(1, 4, 6, 6), full_fg(1, 6, 6))) == pytest.approx(0, abs=1e-12)


def test_visual_loss_matching_one_hot_is_zero():
    img, labels = two_color_image()
    mask = SoftMask.one_hot(labels, 2).data.unsqueeze(0)
    assert float(visual_loss(img, mask, full_fg(1, 6, 6))) == pytest.approx(0, abs=1e-12)


def test_visual_loss_half_swapped_masks():
    img, labels = two_color_image()
    swapped = labels.clone()
    swapped[:3] = 1 - swapped[:3]
    mask = SoftMask.one_hot(swapped, 2).data.unsqueeze(0)
    expected = oracles.weighted_variance(img[0].numpy(), mask[0].numpy())
    assert expected > 0
    assert float(visual_loss(img, mask, full_fg(1, 6, 6))) == pytest.approx(expected, rel=1e-12)


def test_losses_ignore_everything_outside_foreground():
    img = torch.rand(2, 3, 6, 6, dtype=D)
    feats = torch.randn(2, 4, 3, 3, dtype=D)
    mask = rand_mask(2, 3, 6, 6, seed=1)
    fg = torch.zeros(2, 6, 6, dtype=torch.bool)
    fg[:, 1:5, 1:5] = True
    img2 = torch.where(fg.unsqueeze(1), img, torch.rand_like(img))
    assert float(visual_loss(img, mask, fg)) == float(visual_loss(img2, mask, fg))
    # features only matter through foreground-covered cells
    fg_cells = torch.zeros(2, 6, 6, dtype=torch.bool)
    fg_cells[:, :2, :2] = True
    feats2 = feats.clone()
    feats2[:, :, 1:, :] = torch.randn(2, 4, 2, 3, dtype=D)
    feats2[:, :, 0, 1:] = torch.randn(2, 4, 2, dtype=D)
    assert float(feature_loss(feats, mask, fg_cells)) == float(feature_loss(feats2, mask, fg_cells))
    t = TransformSpec(rotation=10)
    m2 = rand_mask(2, 3, 6, 6, seed=2)
    m1_out = torch.where(fg.unsqueeze(1), mask, rand_mask(2, 3, 6, 6, seed=3))
    # changing the original mask outside the foreground can only matter through bilinear
    # neighbours, so compare with an identity warp
    assert float(equivariance_loss(mask, m2, IDENTITY, fg)) == float(equivariance_loss(m1_out, torch.where(
        fg.unsqueeze(1), m2, rand_mask(2, 3, 6, 6, seed=4)), IDENTITY, fg))
    assert t.rotation == 10


# ---------------------------------------------------------------- equivariance

def test_equivariance_identity_is_exactly_zero():
    m = rand_mask(2, 3, 6, 6)
    assert float(equivariance_loss(m, m.clone(), IDENTITY)) == 0.0


def test_equivariance_photometric_only_is_zero():
    m = rand_mask(1, 3, 8, 8)
    t = TransformSpec(brightness=1.3, contrast=0.7, saturation=1.2)
    assert float(equivariance_loss(m, m.clone(), t)) == 0.0


def test_equivariance_opposite_one_hot():
    H = W = 4
    p = SoftMask.one_hot(torch.zeros(H, W), 2).data.unsqueeze(0)
    q = SoftMask.one_hot(torch.ones(H, W), 2).data.unsqueeze(0)
    expected = oracles.symmetric_kl_sum(p[0].numpy(), q[0].numpy(), np.ones((H, W), bool))
    assert expected == pytest.approx(H * W * 2 * -math.log(1e-8))
    assert float(equivariance_loss(p, q, IDENTITY)) == pytest.approx(expected, rel=1e-12)


def test_equivariance_matches_oracle_under_warp():
    m = rand_mask(1, 3, 8, 8, seed=5)
    mt = rand_mask(1, 3, 8, 8, seed=6)
    t = TransformSpec(rotation=15, scale=1.1, translate=(0.1, 0.0))
    fg = torch.zeros(1, 8, 8, dtype=torch.bool)
    fg[0, 2:7, 1:6] = True
    warped, valid = apply_geometric(t, m[0])
    fg_w, _ = apply_geometric(t, fg.double(), "nearest")
    region = (valid & (fg_w[0] > 0.5)).numpy()
    expected = oracles.symmetric_kl_sum(warped.numpy(), mt[0].numpy(), region)
    assert float(equivariance_loss(m, mt, t, fg)) == pytest.approx(expected, rel=1e-12)


def test_equivariance_degenerate_transform():
    m = rand_mask(1, 2, 8, 8)
    fg = torch.zeros(1, 8, 8, dtype=torch.bool)
    fg[0, 7, 7] = True  # shifted by half the image, it leaves the grid
    with pytest.raises(DegenerateTransformError):
        equivariance_loss(m, m, TransformSpec(translate=(0.5, 0.5)), fg)


# ---------------------------------------------------------------- permutation

def test_part_permutation_leaves_losses_unchanged():
    rng = np.random.default_rng(11)
    N, K = 3, 3
    img = torch.from_numpy(rng.random((N, 3, 6, 6)))
    feats = torch.from_numpy(rng.normal(size=(N, 5, 3, 3)))
    mask, mask_t = rand_mask(N, K, 6, 6, seed=1), rand_mask(N, K, 6, 6, seed=2)
    fg = full_fg(N, 6, 6)
    targets = np.array([[1, 2, 1], [2, 0, 0], [0, 1, 0]])
    perm = torch.tensor([2, 0, 1])
    t = TransformSpec(rotation=8)

    def all_terms(m, mt, tg):
        z, v = part_descriptors(feats, m, fg)
        return [float(feature_loss(feats, m, fg)), float(visual_loss(img, m, fg)),
                float(equivariance_loss(m, mt, t, fg)), float(contrastive_loss(z, v, tg))]

    base = all_terms(mask, mask_t, targets)
    permuted = all_terms(mask[:, perm], mask_t[:, perm], targets[:, perm.numpy()])
    assert np.allclose(base, permuted, rtol=1e-12)


# ---------------------------------------------------------------- total

def _batch(seed=0):
    rng = np.random.default_rng(seed)
    img = torch.from_numpy(rng.random((2, 3, 6, 6)))
    feats = torch.from_numpy(rng.normal(size=(2, 4, 3, 3)))
    mask = rand_mask(2, 2, 6, 6, seed)
    mask_t = rand_mask(2, 2, 6, 6, seed + 1)
    fg = full_fg(2, 6, 6)
    return dict(images=img, mask=mask, fg=fg, features=feats, targets=[[1, 1], [0, 0]],
                mask_transformed=mask_t, transforms=TransformSpec(rotation=5))


def test_total_loss_only_visual_on_uniform_image():
    b = _batch()
    b["images"] = torch.full_like(b["images"], 0.5)
    out = total_loss(LossWeights(0, 0, 1, 0), **b)
    assert float(out.total) == pytest.approx(0, abs=1e-12)
    assert set(out.terms) == {"v"}


def test_total_loss_is_sum_of_oracled_terms():
    b = _batch(3)
    out = total_loss(LossWeights(1, 1, 1, 1, tau=0.1), **b)
    fg = np.ones((6, 6), bool)
    lf = np.mean([oracles.weighted_variance(b["features"][n].numpy(),
                                            torch.nn.functional.adaptive_avg_pool2d(b["mask"][n], 3).numpy())
                  for n in range(2)])
    lv = np.mean([oracles.weighted_variance(b["images"][n].numpy(), b["mask"][n].numpy()) for n in range(2)])
    z = np.stack([[np.einsum("hw,dhw->d", w, b["features"][n].numpy()) / w.sum()
                   for w in torch.nn.functional.adaptive_avg_pool2d(b["mask"][n], 3).numpy()] for n in range(2)])
    lc = oracles.info_nce(z, b["targets"], 0.1) / 2
    le = np.mean([oracles.symmetric_kl_sum(apply_geometric(b["transforms"], b["mask"][n])[0].numpy(),
                                           b["mask_transformed"][n].numpy(),
                                           apply_geometric(b["transforms"], b["mask"][n])[1].numpy() & fg)
                  for n in range(2)])
    assert out.terms["f"] == pytest.approx(lf, rel=1e-10)
    assert out.terms["v"] == pytest.approx(lv, rel=1e-10)
    assert out.terms["c"] == pytest.approx(lc, rel=1e-10)
    assert out.terms["e"] == pytest.approx(le, rel=1e-10)
    assert float(out.total) == pytest.approx(lf + lv + lc + le, rel=1e-10)


def test_total_loss_linear_in_weights():
    b = _batch(4)
    w = LossWeights(0.5, 2.0, 1.5, 0.25)
    a = float(total_loss(w, **b).total)
    assert float(total_loss(w.scaled(2), **b).total) == pytest.approx(2 * a, rel=1e-12)


def test_zero_weight_terms_are_not_evaluated(monkeypatch):
    b = _batch(5)

    def boom(*a, **k):
        raise AssertionError("should not be called")

    monkeypatch.setattr(losses, "equivariance_loss", boom)
    monkeypatch.setattr(losses, "contrastive_loss", boom)
    out = total_loss(LossWeights(1, 0, 1, 0), **b)
    assert set(out.terms) == {"f", "v"}


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0, 0)
    with pytest.raises(ValueError):
        LossWeights(tau=0)
    with pytest.raises(ValueError):
        LossWeights(f=-1)


def test_raw_color_feature_loss_equals_visual_loss_bitwise():
    img = torch.rand(2, 3, 6, 6, dtype=D)
    mask = rand_mask(2, 3, 6, 6)
    fg = torch.from_numpy(np.random.default_rng(0).random((2, 6, 6)) > 0.2)
    assert torch.equal(feature_loss(img, mask, fg), visual_loss(img, mask, fg))
