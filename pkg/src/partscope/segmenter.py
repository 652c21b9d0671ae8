"""Part segmenter f: image -> soft part mask, with the PSEG checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .types import Image, SoftMask

PSEG_MAGIC = b"PSEG"
PSEG_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class SegmenterSpec:
    K: int = 4
    architecture: str = "toy-unet"
    widths: tuple[int, int, int] = (16, 32, 64)
    output_scale: float = 1.0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError(f"need at least 2 parts, got K={self.K}")
        if self.architecture != "toy-unet":
            raise ValueError(f"unsupported architecture {self.architecture!r}; external backbones plug in as nn.Modules")
        if self.output_scale != 1.0:
            raise ValueError("toy-unet predicts at input resolution only")

    @property
    def descriptor(self) -> str:
        return f"{self.architecture}:" + ",".join(map(str, self.widths))


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.SiLU())


class ToyUNet(nn.Module):
    """Three-level encoder/decoder with skip connections and a zero-initialised 1x1 head."""

    def __init__(self, spec: SegmenterSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        w1, w2, w3 = spec.widths
        self.enc1 = nn.Sequential(_conv(3, w1), _conv(w1, w1))
        self.enc2 = nn.Sequential(_conv(w1, w2, stride=2), _conv(w2, w2))
        self.enc3 = nn.Sequential(_conv(w2, w3, stride=2), _conv(w3, w3))
        self.dec2 = nn.Sequential(_conv(w3 + w2, w2), _conv(w2, w2))
        self.dec1 = nn.Sequential(_conv(w2 + w1, w1), _conv(w1, w1))
        self.head = nn.Conv2d(w1, spec.K, 1)
        self.reset_parameters(seed)
        self.to(memory_format=torch.channels_last)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Conv2d) and m is not self.head:
                    fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                    bound = (6.0 / fan_in) ** 0.5
                    m.weight.copy_(torch.empty_like(m.weight).uniform_(-bound, bound, generator=g))
                    m.bias.zero_()
            self.head.weight.zero_()
            self.head.bias.zero_()

    @property
    def K(self) -> int:
        return self.spec.K

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        x = (images - 0.5).contiguous(memory_format=torch.channels_last)
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d2 = F.interpolate(e3, size=e2.shape[-2:], mode="bilinear", align_corners=False)
        d2 = self.dec2(torch.cat([d2, e2], 1))
        d1 = F.interpolate(d2, size=e1.shape[-2:], mode="bilinear", align_corners=False)
        d1 = self.dec1(torch.cat([d1, e1], 1))
        return self.head(d1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(images), dim=1).contiguous()

    def predict(self, image: Image) -> SoftMask:
        with torch.no_grad():
            return SoftMask(self(image.data.unsqueeze(0).to(self.head.weight.dtype))[0])


def build_segmenter(spec: SegmenterSpec, seed: int = 0) -> ToyUNet:
    return ToyUNet(spec, seed)


def _pack_str(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<I", len(b)) + b


def save_checkpoint(path, model: ToyUNet) -> None:
    parts = [PSEG_MAGIC, struct.pack("<I", PSEG_VERSION), _pack_str(model.spec.descriptor),
             struct.pack("<I", model.K)]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, t in state.items():
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(t.detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[str, int, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    def u32():
        return struct.unpack("<I", take(4))[0]

    if take(4) != PSEG_MAGIC:
        raise CheckpointError(f"{path}: not a PSEG checkpoint")
    if (version := u32()) != PSEG_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    arch = take(u32()).decode()
    K = u32()
    state = {}
    for _ in range(u32()):
        name = take(u32()).decode()
        ndim = u32()
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = 1
        for d in dims:
            n *= d
        data = torch.frombuffer(bytearray(take(8 * n)), dtype=torch.float64).reshape(dims)
        state[name] = data
    if pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes")
    return arch, K, state


def load_checkpoint(path, model: ToyUNet | None = None, dtype=torch.float32) -> ToyUNet:
    """Load parameters into ``model`` (checked for K/architecture) or build a fresh one."""
    arch, K, state = read_checkpoint(path)
    if model is None:
        name, _, widths = arch.partition(":")
        spec = SegmenterSpec(K=K, architecture=name, widths=tuple(int(w) for w in widths.split(",")))
        model = build_segmenter(spec).to(dtype)
    if model.K != K:
        raise CheckpointError(f"checkpoint has K={K} but the model expects K={model.K}")
    if model.spec.descriptor != arch:
        raise CheckpointError(f"checkpoint architecture {arch!r} does not match model {model.spec.descriptor!r}")
    own = model.state_dict()
    if set(own) != set(state):
        raise CheckpointError(f"parameter names differ: {sorted(set(own) ^ set(state))}")
    with torch.no_grad():
        for name, t in state.items():
            if own[name].shape != t.shape:
                raise CheckpointError(f"{name}: shape {tuple(t.shape)} vs model {tuple(own[name].shape)}")
            own[name].copy_(t)
    return model
