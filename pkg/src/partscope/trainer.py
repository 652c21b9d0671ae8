"""Mini-batch training of the part segmenter."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import losses
from .config import ConfigError
from .features import FeatureProvider, FeatureProviderSpec, PrecomputedProvider, make_provider
from .losses import LossBreakdown, LossWeights
from .segmenter import SegmenterSpec, ToyUNet, build_segmenter, load_checkpoint, save_checkpoint
from .transforms import TransformConfig, apply_geometric, apply_photometric, sample_transform

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "sgd-momentum", "adaptive-moments")
CSV_FIELDS = ("step", "loss_total", "loss_f", "loss_c", "loss_v", "loss_e")
CHECKPOINT_NAME = "segmenter.pseg"
STATE_NAME = "trainer_state.pt"


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    K: int = 4
    batch_size: int = 8
    steps: int = 1000
    lr: float = 1e-3
    optimizer: str = "adaptive-moments"
    momentum: float = 0.9
    lambda_f: float = 1.0
    lambda_c: float = 1.0
    lambda_v: float = 1.0
    lambda_e: float = 1.0
    tau: float = losses.DEFAULT_TAU
    use_l2_instead_of_contrastive: bool = False
    contrastive_same_image_views: bool = False
    contrastive_same_image_negatives: bool = False
    rot_max: float = 30.0
    scale_min: float = 0.8
    scale_max: float = 1.2
    translate_max: float = 0.1
    brightness: float = 0.3
    contrast: float = 0.3
    saturation: float = 0.3
    provider: str = "toy-cnn"
    provider_layers: tuple[str, ...] = ()
    provider_path: str | None = None
    provider_seed: int = 0
    seed: int = 0
    checkpoint_interval: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(key, msg):
            raise ConfigError(f"{key}: {msg}")

        if self.steps < 1:
            bad("steps", f"must be >= 1, got {self.steps}")
        if self.lr <= 0:
            bad("lr", f"must be > 0, got {self.lr}")
        if self.K < 2:
            bad("K", f"must be >= 2, got {self.K}")
        if self.batch_size < 1:
            bad("batch_size", "must be >= 1")
        if self.lambda_c > 0 and self.batch_size < 2:
            bad("batch_size", "must be >= 2 when lambda_c > 0 (contrastive needs another image)")
        if self.optimizer not in OPTIMIZERS:
            bad("optimizer", f"must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.checkpoint_interval < 0:
            bad("checkpoint_interval", "must be >= 0")
        try:
            self.weights
        except ValueError as exc:
            bad("lambda_*/tau", str(exc))
        try:
            self.augmentation.validate()
        except ValueError as exc:
            bad("augmentation", str(exc))
        try:
            self.provider_spec
        except ValueError as exc:
            bad("provider", str(exc))

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_f, self.lambda_c, self.lambda_v, self.lambda_e, self.tau)

    @property
    def augmentation(self) -> TransformConfig:
        return TransformConfig(self.rot_max, self.scale_min, self.scale_max, self.translate_max,
                               self.brightness, self.contrast, self.saturation)

    @property
    def provider_spec(self) -> FeatureProviderSpec:
        return FeatureProviderSpec(self.provider, tuple(self.provider_layers), True, self.provider_seed,
                                   self.provider_path)

    @property
    def segmenter_spec(self) -> SegmenterSpec:
        return SegmenterSpec(K=self.K)


def sample_targets(N: int, K: int, validity, rng: np.random.Generator) -> np.ndarray:
    """For each (n, k) a uniformly drawn image i != n whose part k is valid; -1 when none exists."""
    if N < 2:
        raise ValueError("contrastive requires batch >= 2")
    valid = np.asarray(validity, bool).reshape(N, K)
    out = np.full((N, K), -1, dtype=np.int64)
    for n in range(N):
        for k in range(K):
            cands = [i for i in range(N) if i != n and valid[i, k]]
            if cands:
                out[n, k] = cands[rng.integers(len(cands))]
    return out


@dataclass
class TrainState:
    model: ToyUNet
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0
    skipped_anchors: int = 0
    dropped_items: int = 0


def make_optimizer(config: TrainConfig, params) -> torch.optim.Optimizer:
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.lr)
    if config.optimizer == "sgd-momentum":
        return torch.optim.SGD(params, lr=config.lr, momentum=config.momentum)
    return torch.optim.Adam(params, lr=config.lr)


def init_state(config: TrainConfig, dtype=torch.float32) -> TrainState:
    torch.manual_seed(config.seed)
    model = build_segmenter(config.segmenter_spec, seed=config.seed).to(dtype)
    return TrainState(model, make_optimizer(config, model.parameters()), np.random.default_rng(config.seed))


def compute_losses(config: TrainConfig, model, images, fg, features, rng: np.random.Generator,
                   provider: FeatureProvider | None = None, transforms=None, targets=None,
                   state: TrainState | None = None) -> LossBreakdown:
    """Forward pass and weighted objective for one batch.

    ``transforms``/``targets`` override the random draws (used by tests).
    """
    w = config.weights
    N = images.shape[0]
    views = config.contrastive_same_image_views and w.c > 0
    need_t = w.e > 0 or views
    if need_t and transforms is None:
        transforms = [sample_transform(config.augmentation, rng) for _ in range(N)]

    mask = model(images)
    mask_t = None
    if need_t:
        t_images = torch.stack([apply_photometric(t, apply_geometric(t, x)[0]) for t, x in zip(transforms, images)])
        mask_t = model(t_images)

    contrastive_fn = None
    if w.c > 0:
        if views:
            if provider is None:
                raise ValueError("the same-image-views variant needs a live feature provider")
            t_fg = []
            for t, m in zip(transforms, fg):
                warped, ok = apply_geometric(t, m.unsqueeze(0).to(images.dtype), "nearest")
                t_fg.append((warped[0] > 0.5) & ok)
            t_fg = torch.stack(t_fg)
            z, valid = losses.part_descriptors(features, mask, fg)
            z2, valid2 = losses.part_descriptors(provider(t_images).to(images.dtype), mask_t, t_fg)

            def contrastive_fn():
                if config.use_l2_instead_of_contrastive:
                    d = (z - z2).pow(2).sum(-1)
                    return torch.where(valid & valid2, d, torch.zeros((), dtype=d.dtype)).sum() / N
                return losses.info_nce(z, valid, z2, valid2, z, valid, w.tau,
                                       same_image_negatives=config.contrastive_same_image_negatives)
        elif targets is None:
            with torch.no_grad():
                _, valid = losses.part_descriptors(features, mask, fg)
            targets = sample_targets(N, config.K, valid.numpy(), rng)
            if state is not None:
                state.skipped_anchors += int((targets < 0).sum())

    return losses.total_loss(
        w, images=images, mask=mask, fg=fg, features=features, targets=targets,
        mask_transformed=mask_t, transforms=transforms,
        use_l2=config.use_l2_instead_of_contrastive,
        same_image_negatives=config.contrastive_same_image_negatives,
        contrastive_fn=contrastive_fn,
    )


def train_step(config: TrainConfig, state: TrainState, images, fg, features,
               provider: FeatureProvider | None = None) -> LossBreakdown | None:
    """One optimizer update; returns None when too few usable items remain."""
    keep = fg.flatten(1).any(1)
    if not bool(keep.all()):
        state.dropped_items += int((~keep).sum())
        log.warning("dropping %d batch item(s) with empty foreground", int((~keep).sum()))
        images, fg, features = images[keep], fg[keep], features[keep]
    need = 2 if config.lambda_c > 0 else 1
    if images.shape[0] < need:
        log.warning("step %d skipped: %d usable item(s) left", state.step, images.shape[0])
        return None
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    out = compute_losses(config, state.model, images, fg, features, state.rng, provider, state=state)
    if not torch.isfinite(out.total):
        raise NumericalError(f"non-finite loss at step {state.step}: {out.terms}")
    out.total.backward()
    state.optimizer.step()
    state.step += 1
    return out


@dataclass
class TrainingData:
    images: torch.Tensor  # (n, 3, H, W)
    fg: torch.Tensor  # (n, H, W)
    features: torch.Tensor  # (n, d, h, w)
    ids: list[str] = field(default_factory=list)


def prepare_data(samples: Sequence, provider: FeatureProvider, dtype=torch.float32) -> TrainingData:
    """Stack samples and precompute frozen features once."""
    if not samples:
        raise ValueError("dataset is empty")
    images = torch.stack([s.image for s in samples]).to(dtype)
    fg = torch.stack([s.fg for s in samples])
    ids = [s.sample_id for s in samples]
    if isinstance(provider, PrecomputedProvider):
        features = provider.load(ids).to(dtype)
    else:
        with torch.no_grad():
            features = torch.cat([provider(images[i:i + 64]) for i in range(0, len(images), 64)]).to(dtype)
    return TrainingData(images, fg, features, ids)


def _save(out: Path, state: TrainState) -> None:
    save_checkpoint(out / CHECKPOINT_NAME, state.model)
    torch.save({"optimizer": state.optimizer.state_dict(), "step": state.step,
                "rng": state.rng.bit_generator.state}, out / STATE_NAME)


def _format(v: float) -> str:
    return repr(float(v))


def train(config: TrainConfig, samples: Sequence, out_dir, resume: bool = False,
          provider: FeatureProvider | None = None, data: TrainingData | None = None) -> TrainState:
    """Run ``config.steps`` updates (continuing a previous run when ``resume``).

    Writes ``segmenter.pseg``, ``trainer_state.pt`` and ``losses.csv`` into ``out_dir``.
    """
    configure_threads()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    provider = provider or make_provider(config.provider_spec)
    data = data or prepare_data(samples, provider)
    state = init_state(config)
    csv_path = out / "losses.csv"
    if resume:
        load_checkpoint(out / CHECKPOINT_NAME, state.model)
        saved = torch.load(out / STATE_NAME, weights_only=False)
        state.optimizer.load_state_dict(saved["optimizer"])
        state.step = saved["step"]
        state.rng.bit_generator.state = saved["rng"]
    else:
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerow(CSV_FIELDS)
        (out / "config.json").write_text(json.dumps(_config_dict(config), indent=2) + "\n")

    n = data.images.shape[0]
    N = min(config.batch_size, n)
    live = provider if config.contrastive_same_image_views else None
    end = state.step + config.steps
    with open(csv_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        while state.step < end:
            idx = torch.from_numpy(np.sort(state.rng.choice(n, size=N, replace=False)))
            res = train_step(config, state, data.images[idx], data.fg[idx], data.features[idx], live)
            if res is None:
                state.step += 1
                continue
            row = res.row()
            writer.writerow([state.step] + [_format(row[k]) for k in CSV_FIELDS[1:]])
            if config.checkpoint_interval and state.step % config.checkpoint_interval == 0:
                fh.flush()
                _save(out, state)
    _save(out, state)
    if state.skipped_anchors:
        log.warning("%d contrastive anchors had no valid target and were skipped", state.skipped_anchors)
    return state


def _config_dict(config: TrainConfig) -> dict:
    from dataclasses import asdict

    d = asdict(config)
    d["provider_layers"] = list(d["provider_layers"])
    return d


def configure_threads() -> None:
    """Honour ``PARTSCOPE_THREADS``; 1 gives the single-worker deterministic mode."""
    import os

    threads = os.environ.get("PARTSCOPE_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
