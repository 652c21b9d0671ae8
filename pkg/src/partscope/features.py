"""Frozen perceptual feature providers and the PFEA feature file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .types import FeatureMap, Image

PFEA_MAGIC = b"PFEA"
PFEA_VERSION = 1
PFEA_HEADER = struct.Struct("<4sIIII")

KINDS = ("toy-cnn", "external-pretrained", "precomputed-file", "raw-color")


class FeatureFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureProviderSpec:
    kind: str = "toy-cnn"
    layer_names: tuple[str, ...] = ()
    frozen: bool = True
    seed: int = 0
    path: str | None = None  # precomputed-file directory or external weights

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown provider kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "external-pretrained" and not self.layer_names:
            raise ValueError("external-pretrained providers need at least one layer name")
        if self.kind == "precomputed-file" and not self.path:
            raise ValueError("precomputed-file provider needs a directory path")


def save_features(path, fmap: FeatureMap | torch.Tensor) -> None:
    data = fmap.data if isinstance(fmap, FeatureMap) else fmap
    arr = np.ascontiguousarray(data.detach().cpu().numpy(), dtype="<f8")
    d, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(PFEA_HEADER.pack(PFEA_MAGIC, PFEA_VERSION, d, h, w))
        fh.write(arr.tobytes(order="C"))


def load_features(path) -> FeatureMap:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"feature file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < PFEA_HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header")
    magic, version, d, h, w = PFEA_HEADER.unpack_from(raw)
    if magic != PFEA_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    if version != PFEA_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    expected = PFEA_HEADER.size + d * h * w * 8
    if len(raw) != expected:
        raise FeatureFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f8", offset=PFEA_HEADER.size).reshape(d, h, w)
    return FeatureMap(torch.from_numpy(arr.copy()))


def concat_layers(layers: Sequence[torch.Tensor]) -> torch.Tensor:
    """Resize (N, d_i, h_i, w_i) maps to the coarsest grid and stack channels."""
    h = min(x.shape[-2] for x in layers)
    w = min(x.shape[-1] for x in layers)
    return torch.cat([x if x.shape[-2:] == (h, w) else F.adaptive_avg_pool2d(x, (h, w)) for x in layers], 1)


class FeatureProvider:
    """Image batch (N, 3, H, W) -> feature batch (N, d, h, w)."""

    spec: FeatureProviderSpec

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def extract(self, image: Image | torch.Tensor, key: str | None = None) -> FeatureMap:
        data = image.data if isinstance(image, Image) else image
        with torch.no_grad():
            return FeatureMap(self(data.unsqueeze(0))[0])


class RawColorProvider(FeatureProvider):
    def __init__(self, spec: FeatureProviderSpec | None = None):
        self.spec = spec or FeatureProviderSpec("raw-color")

    def __call__(self, images):
        return images


class ToyCNN(nn.Module):
    """Four 3x3 conv blocks, reflect padding, stride 2 on blocks 2-4 (output at 1/8 resolution)."""

    widths = (16, 32, 64, 64)

    def __init__(self, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        blocks, cin = [], 3
        for i, cout in enumerate(self.widths):
            conv = nn.Conv2d(cin, cout, 3, stride=1 if i == 0 else 2, padding=1, padding_mode="reflect")
            bound = (3.0 / (cin * 9)) ** 0.5 * 2 ** 0.5  # fan-in scaled, ReLU gain
            with torch.no_grad():
                conv.weight.copy_(torch.empty_like(conv.weight).uniform_(-bound, bound, generator=g))
                conv.bias.copy_(torch.empty_like(conv.bias).uniform_(-0.1, 0.1, generator=g))
            blocks.append(nn.Sequential(conv, nn.ReLU()))
            cin = cout
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x) -> dict[str, torch.Tensor]:
        out = {}
        for i, block in enumerate(self.blocks):
            x = block(x)
            out[f"block{i + 1}"] = x
        return out


class ToyCNNProvider(FeatureProvider):
    def __init__(self, spec: FeatureProviderSpec | None = None):
        self.spec = spec or FeatureProviderSpec("toy-cnn")
        self.layers = tuple(self.spec.layer_names) or ("block4",)
        self.net = ToyCNN(self.spec.seed).eval()
        for p in self.net.parameters():
            p.requires_grad_(not self.spec.frozen)

    def __call__(self, images):
        net = self.net.to(images.dtype)
        with torch.set_grad_enabled(not self.spec.frozen):
            maps = net(images)
        missing = [n for n in self.layers if n not in maps]
        if missing:
            raise KeyError(f"toy-cnn has no layers {missing}; available: {sorted(maps)}")
        return concat_layers([maps[n] for n in self.layers])


class ExternalProvider(FeatureProvider):
    """Adapter for an external network returning named feature maps.

    ``model`` maps an image batch to ``{layer_name: (N, d, h, w)}``; the
    requested layers are pooled to the coarsest grid and concatenated.
    """

    def __init__(self, model: Callable[[torch.Tensor], Mapping[str, torch.Tensor]], spec: FeatureProviderSpec):
        self.model = model
        self.spec = spec

    def __call__(self, images):
        with torch.no_grad():
            maps = self.model(images)
        missing = [n for n in self.spec.layer_names if n not in maps]
        if missing:
            raise KeyError(f"external model did not return layers {missing}")
        return concat_layers([maps[n] for n in self.spec.layer_names])


def vgg_layer_names(cfg: Sequence) -> list[str]:
    """Names like relu5_2 for each module index of a torchvision VGG ``features`` stack."""
    names, block, idx = [], 1, 1
    for v in cfg:
        if v == "M":
            names.append(f"pool{block}")
            block, idx = block + 1, 1
        else:
            names += [f"conv{block}_{idx}", f"relu{block}_{idx}"]
            idx += 1
    return names


def vgg_feature_model(features: nn.Module, names: Sequence[str]) -> Callable:
    """Wrap a VGG ``features`` Sequential so it returns named intermediate maps."""
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
    features = features.eval()

    def run(images):
        x = (images - mean.to(images.dtype)) / std.to(images.dtype)
        out = {}
        for name, layer in zip(names, features):
            x = layer(x)
            out[name] = x
        return out

    return run


VGG19_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]


def vgg19_provider(layer_names=("relu5_2", "relu5_4"), weights_path: str | None = None) -> ExternalProvider:
    """VGG19 adapter; weights come from a local state-dict file (no downloads)."""
    from torchvision.models import vgg19

    net = vgg19(weights=None)
    if weights_path:
        net.load_state_dict(torch.load(weights_path, map_location="cpu"))
    for p in net.parameters():
        p.requires_grad_(False)
    model = vgg_feature_model(net.features, vgg_layer_names(VGG19_CFG))
    return ExternalProvider(model, FeatureProviderSpec("external-pretrained", tuple(layer_names), path=weights_path))


class PrecomputedProvider(FeatureProvider):
    """Reads ``<dir>/<key>.pfea`` where key identifies the sample."""

    def __init__(self, spec: FeatureProviderSpec):
        self.spec = spec
        self.root = Path(spec.path)

    def path_for(self, key: str) -> Path:
        return self.root / f"{key}.pfea"

    def load(self, keys: Sequence[str]) -> torch.Tensor:
        return torch.stack([load_features(self.path_for(k)).data for k in keys])

    def __call__(self, images):
        raise TypeError("precomputed features are looked up by sample key; use load(keys)")

    def extract(self, image=None, key: str | None = None) -> FeatureMap:
        if key is None:
            raise TypeError("precomputed-file provider needs the sample key")
        return load_features(self.path_for(key))


def make_provider(spec: FeatureProviderSpec) -> FeatureProvider:
    if spec.kind == "raw-color":
        return RawColorProvider(spec)
    if spec.kind == "toy-cnn":
        return ToyCNNProvider(spec)
    if spec.kind == "precomputed-file":
        return PrecomputedProvider(spec)
    return vgg19_provider(spec.layer_names, spec.path)
