"""Heatmap-regression network with local-appearance and spatial-configuration parts.

The local-appearance (LA) path is a small U-shaped stack of 3x3x3
convolutions whose level outputs are upsampled and summed. Its heatmaps are
pooled, passed through wide 7x7x7 convolutions (spatial configuration, SC),
upsampled again with cubic interpolation, and multiplied into the LA output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._checkpoint import read_checkpoint, save_checkpoint, tuplify
from .core import Volume3D
from .heatmap import DEFAULT_SIGMA, HeatmapStack


@dataclass(frozen=True)
class SCNConfig:
    num_landmarks: int = 32
    la_levels: int = 4
    la_convs_per_level: int = 3
    la_channels: int = 64
    la_kernel: int = 3
    sc_kernel: tuple = (7, 7, 7)
    sc_channels: tuple = (64, 64, 64, 32)
    sc_downsample: int = 4
    dropout: float = 0.3
    leaky_slope: float = 0.1
    input_shape: tuple = (64, 64, 32)
    sc_upsample: str = "tricubic"
    sigma_init: float = DEFAULT_SIGMA

    def __post_init__(self):
        counts = (self.num_landmarks, self.la_levels, self.la_convs_per_level, self.la_channels, self.sc_downsample)
        if min(counts) < 1 or min(self.sc_channels) < 1 or not self.sc_channels:
            raise ValueError("all layer counts and widths must be positive")
        if self.sc_channels[-1] != self.num_landmarks:
            raise ValueError("last SC layer must emit one channel per landmark")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.sc_upsample not in ("tricubic", "trilinear"):
            raise ValueError("sc_upsample must be 'tricubic' or 'trilinear'")
        if any(k % 2 == 0 for k in self.sc_kernel) or self.la_kernel % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        if self.sigma_init <= 0:
            raise ValueError("sigma_init must be positive")
        div = max(2 ** (self.la_levels - 1), self.sc_downsample)
        if any(s % div for s in self.input_shape):
            raise ValueError(f"input_shape {self.input_shape} must be divisible by {div}")

    def with_(self, **kw) -> "SCNConfig":
        return replace(self, **kw)


def toy_scn_config(num_landmarks: int = 16, input_shape=(64, 64, 32), width: int = 16) -> SCNConfig:
    """Reduced-width preset that trains on a CPU in minutes."""
    return SCNConfig(
        num_landmarks=num_landmarks,
        la_levels=4,
        la_convs_per_level=2,
        la_channels=width,
        sc_kernel=(5, 5, 5),
        sc_channels=(width, width, width, num_landmarks),
        input_shape=tuple(input_shape),
    )


# ------------------------------------------------------------ interpolation


def cubic_weights(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel evaluated at offsets ``x``."""
    x = np.abs(x)
    return np.where(
        x <= 1,
        (a + 2) * x**3 - (a + 3) * x**2 + 1,
        np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0),
    )


def cubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` cubic resampling matrix, voxel-center aligned, edge-replicated."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        x = (i + 0.5) * scale - 0.5
        x0 = math.floor(x)
        for k in range(x0 - 1, x0 + 3):
            m[i, min(max(k, 0), n_in - 1)] += cubic_weights(np.array(x - k))
    return m


def upsample_cubic(x: torch.Tensor, size) -> torch.Tensor:
    """Separable tricubic resampling of ``(B, C, X, Y, Z)`` to spatial ``size``."""
    out = x
    for axis, n_out in enumerate(size):
        n_in = out.shape[2 + axis]
        m = torch.as_tensor(cubic_matrix(n_in, n_out), dtype=x.dtype)
        out = torch.movedim(torch.tensordot(out, m, dims=([2 + axis], [1])), -1, 2 + axis)
    return out


# -------------------------------------------------------------------- model


class SCN(nn.Module):
    def __init__(self, cfg: SCNConfig):
        super().__init__()
        self.cfg = cfg
        c, k = cfg.la_channels, cfg.la_kernel
        self.la = nn.ModuleList()
        for level in range(cfg.la_levels):
            convs = nn.ModuleList()
            for j in range(cfg.la_convs_per_level):
                cin = 1 if (level == 0 and j == 0) else c
                convs.append(nn.Conv3d(cin, c, k, padding=k // 2))
            self.la.append(convs)
        self.la_out = nn.Conv3d(c, cfg.num_landmarks, k, padding=k // 2)
        self.sc = nn.ModuleList()
        cin = cfg.num_landmarks
        pad = tuple(s // 2 for s in cfg.sc_kernel)
        for cout in cfg.sc_channels:
            self.sc.append(nn.Conv3d(cin, cout, tuple(cfg.sc_kernel), padding=pad))
            cin = cout
        self.sigmas = nn.Parameter(torch.full((cfg.num_landmarks,), float(cfg.sigma_init)))

    def _act(self, h):
        return F.leaky_relu(h, self.cfg.leaky_slope)

    def forward(self, x: torch.Tensor):
        """``x``: ``(B, 1, X, Y, Z)`` -> ``(h_la, h_sc, h)`` each ``(B, N, X, Y, Z)``."""
        cfg = self.cfg
        if tuple(x.shape[2:]) != tuple(cfg.input_shape) or x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"expected input (B, 1, *{tuple(cfg.input_shape)}), got {tuple(x.shape)}")
        feats = []
        h = x
        for level, convs in enumerate(self.la):
            if level > 0:
                h = F.avg_pool3d(h, 2)
            for j, conv in enumerate(convs):
                h = self._act(conv(h))
                if j == 0:
                    h = F.dropout(h, cfg.dropout, self.training)
            feats.append(h)
        u = feats[-1]
        for level in range(len(feats) - 2, -1, -1):
            u = feats[level] + F.interpolate(u, size=feats[level].shape[2:], mode="trilinear", align_corners=False)
        h_la = self.la_out(u)
        s = F.avg_pool3d(h_la, cfg.sc_downsample)
        for i, conv in enumerate(self.sc):
            s = conv(s)
            s = torch.tanh(s) if i == len(self.sc) - 1 else self._act(s)
        size = tuple(x.shape[2:])
        if cfg.sc_upsample == "tricubic":
            h_sc = upsample_cubic(s, size)
        else:
            h_sc = F.interpolate(s, size=size, mode="trilinear", align_corners=False)
        return h_la, h_sc, h_la * h_sc


def _he_normal_(w: torch.Tensor, slope: float, gen: torch.Generator) -> None:
    fan_in = w[0].numel()
    std = math.sqrt(2.0 / (1.0 + slope**2)) / math.sqrt(fan_in)
    with torch.no_grad():
        w.normal_(0.0, std, generator=gen)


def build_scn(cfg: SCNConfig = SCNConfig(), seed: int = 0) -> SCN:
    """Seeded construction: He-normal hidden layers, N(0, 0.001) emitting layers, zero biases."""
    model = SCN(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    emitting = {id(model.la_out), id(model.sc[-1])}
    for m in model.modules():
        if isinstance(m, nn.Conv3d):
            if id(m) in emitting:
                with torch.no_grad():
                    m.weight.normal_(0.0, 0.001, generator=gen)
            else:
                _he_normal_(m.weight, cfg.leaky_slope, gen)
            with torch.no_grad():
                m.bias.zero_()
    return model


def weight_l2_norm(model_or_tensors) -> torch.Tensor:
    """Sum of squared convolution weights (biases and sigmas excluded)."""
    if isinstance(model_or_tensors, nn.Module):
        tensors = [m.weight for m in model_or_tensors.modules() if isinstance(m, nn.Conv3d)]
    else:
        tensors = [torch.as_tensor(t, dtype=torch.float64) for t in model_or_tensors]
    if not tensors:
        return torch.zeros(())
    return sum((t * t).sum() for t in tensors)


def volume_tensor(volume: Volume3D) -> torch.Tensor:
    return torch.from_numpy(np.array(volume.data, dtype=np.float32))[None, None]


def scn_forward(model: SCN, volume: Volume3D) -> tuple[HeatmapStack, HeatmapStack, HeatmapStack]:
    """Inference on one volume; returns ``(H_LA, H_SC, H)`` stacks."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            outs = model(volume_tensor(volume))
    finally:
        model.train(was_training)
    n = model.cfg.num_landmarks
    valid = np.ones(n, dtype=bool)
    return tuple(HeatmapStack(o[0].numpy(), valid, volume.spacing) for o in outs)


def save_scn(model: SCN, path):
    return save_checkpoint(model, "scn", path)


def load_scn(path) -> SCN:
    cfg, state = read_checkpoint(path, "scn")
    model = SCN(SCNConfig(**tuplify(cfg)))
    model.load_state_dict(state)
    return model
