"""Five-level 3D U-Net emitting per-voxel lesion logits."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._checkpoint import read_checkpoint, save_checkpoint, tuplify
from .core import SegMask, Volume3D

TRUNC_BOUND = 2.0


def _truncated_normal_std(bound: float = TRUNC_BOUND) -> float:
    """Standard deviation of a unit normal truncated to ``[-bound, bound]``."""
    phi = math.exp(-0.5 * bound * bound) / math.sqrt(2.0 * math.pi)
    mass = math.erf(bound / math.sqrt(2.0))
    return math.sqrt(1.0 - 2.0 * bound * phi / mass)


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 5
    kernel: tuple = (3, 3, 3)
    channels: int = 16
    dropout: float = 0.3
    skip: str = "concat"
    init: str = "paper"
    init_std: float = 0.001
    input_shape: tuple | None = (64, 64, 64)

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if any(k % 2 == 0 for k in self.kernel):
            raise ValueError("kernel sizes must be odd for same padding")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.skip not in ("concat", "add"):
            raise ValueError("skip must be 'concat' or 'add'")
        if self.init not in ("paper", "he"):
            raise ValueError("init must be 'paper' or 'he'")
        if self.input_shape is not None and any(s % 2 ** (self.levels - 1) for s in self.input_shape):
            raise ValueError(f"input_shape must be divisible by {2 ** (self.levels - 1)}")

    def with_(self, **kw) -> "UNetConfig":
        return replace(self, **kw)


def toy_unet_config(size: int = 32, channels: int = 8, levels: int = 4, init: str = "he") -> UNetConfig:
    return UNetConfig(levels=levels, channels=channels, input_shape=(size, size, size), init=init, dropout=0.1)


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        pad = tuple(k // 2 for k in cfg.kernel)
        k = tuple(cfg.kernel)

        def pair(cin):
            return nn.ModuleList([nn.Conv3d(cin, c, k, padding=pad), nn.Conv3d(c, c, k, padding=pad)])

        self.down = nn.ModuleList([pair(1 if level == 0 else c) for level in range(cfg.levels)])
        merge_in = 2 * c if cfg.skip == "concat" else c
        self.up = nn.ModuleList([pair(merge_in) for _ in range(cfg.levels - 1)])
        self.head = nn.Conv3d(c, 1, 1)

    def _block(self, convs, h):
        for conv in convs:
            h = F.dropout(F.relu(conv(h)), self.cfg.dropout, self.training)
        return h

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, 1, X, Y, Z)`` -> logits of the same shape."""
        cfg = self.cfg
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, X, Y, Z), got {tuple(x.shape)}")
        if cfg.input_shape is not None and tuple(x.shape[2:]) != tuple(cfg.input_shape):
            raise ValueError(f"expected spatial shape {tuple(cfg.input_shape)}, got {tuple(x.shape[2:])}")
        if any(s % 2 ** (cfg.levels - 1) for s in x.shape[2:]):
            raise ValueError(f"spatial shape must be divisible by {2 ** (cfg.levels - 1)}")
        skips = []
        h = x
        for level, convs in enumerate(self.down):
            if level > 0:
                h = F.avg_pool3d(h, 2)
            h = self._block(convs, h)
            skips.append(h)
        for level in range(cfg.levels - 2, -1, -1):
            h = F.interpolate(h, scale_factor=2, mode="trilinear", align_corners=False)
            s = skips[level]
            h = torch.cat([s, h], dim=1) if cfg.skip == "concat" else s + h
            h = self._block(self.up[level], h)
        return self.head(h)


def build_unet(cfg: UNetConfig = UNetConfig(), seed: int = 0) -> UNet:
    """Seeded construction.

    ``init="paper"``: hidden layers truncated-normal (rescaled so the drawn
    weights have standard deviation ``init_std``), head He-normal.
    ``init="he"``: He-normal everywhere. Biases start at zero.
    """
    model = UNet(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    scale = cfg.init_std / _truncated_normal_std()
    for m in model.modules():
        if not isinstance(m, nn.Conv3d):
            continue
        with torch.no_grad():
            if m is model.head or cfg.init == "he":
                m.weight.normal_(0.0, math.sqrt(2.0 / m.weight[0].numel()), generator=gen)
            else:
                nn.init.trunc_normal_(m.weight, 0.0, scale, -TRUNC_BOUND * scale, TRUNC_BOUND * scale, generator=gen)
            m.bias.zero_()
    return model


def unet_forward(model: UNet, crop: Volume3D) -> Volume3D:
    """Inference on one crop (dropout off); returns a logit volume."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = torch.from_numpy(np.array(crop.data, dtype=np.float32))[None, None]
            out = model(x)[0, 0].numpy()
    finally:
        model.train(was_training)
    return Volume3D(out, crop.spacing, crop.origin)


def binarize(logits: Volume3D, threshold: float = 0.0) -> SegMask:
    """Voxels with logit ``>= threshold`` become lesion."""
    d = np.asarray(logits.data)
    if np.isnan(d).any():
        raise ValueError("logits contain NaN")
    return SegMask((d >= threshold).astype(np.float32), logits.spacing, logits.origin)


def save_unet(model: UNet, path):
    return save_checkpoint(model, "unet", path)


def load_unet(path) -> UNet:
    cfg, state = read_checkpoint(path, "unet")
    model = UNet(UNetConfig(**tuplify(cfg)))
    model.load_state_dict(state)
    return model
