"""Gaussian landmark heatmaps, the masked localization objective, and argmax decoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import NUM_TEETH, LandmarkSet, Volume3D
from .kernels import gaussian_fill

DEFAULT_SIGMA = 4.0
TRUNCATE = 6.0


@dataclass(frozen=True)
class LocalizationLossConfig:
    alpha: float = 100.0  # sigma penalty
    lam: float = 5e-5  # weight decay
    squared_distance: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lam must be non-negative")


@dataclass(frozen=True, eq=False)
class HeatmapStack:
    """``channels[i]`` is the heatmap of landmark ``i``; ``validity[i]`` is False for missing teeth."""

    channels: np.ndarray
    validity: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float32)
        if ch.ndim != 4:
            raise ValueError(f"heatmap stack must be (N, nx, ny, nz), got {ch.shape}")
        val = np.asarray(self.validity, dtype=bool).reshape(-1)
        if val.shape[0] != ch.shape[0]:
            raise ValueError(f"validity has {val.shape[0]} entries for {ch.shape[0]} channels")
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "validity", val)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def num_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.channels.shape[1:])

    def channel(self, i: int) -> Volume3D:
        return Volume3D(self.channels[i], self.spacing)


def make_sigmas(n: int = NUM_TEETH, value: float = DEFAULT_SIGMA) -> np.ndarray:
    return np.full(n, float(value), dtype=np.float64)


def _check_sigmas(sigmas) -> np.ndarray:
    s = np.asarray(sigmas, dtype=np.float64).reshape(-1)
    if s.size == 0 or np.any(~np.isfinite(s)) or np.any(s <= 0):
        raise ValueError("sigmas must be finite and positive")
    return s


def nearest_voxel(coord, shape) -> np.ndarray:
    """Index of the voxel whose center is closest to ``coord``.

    Exact half-way ties resolve to the lower index, matching the argmax
    tie-break of :func:`extract_coordinates`.
    """
    c = np.asarray(coord, dtype=np.float64)
    idx = np.ceil(c - 0.5)
    return np.clip(idx, 0, np.asarray(shape) - 1).astype(np.int64)


def gaussian_channel(shape, center, sigma: float, squared: bool = True, truncate: float = TRUNCATE) -> Volume3D:
    """Single landmark heatmap peaking at 1 on the voxel nearest ``center``.

    ``squared=False`` selects the literal ``exp(-|x - c| / (2 sigma^2))``
    variant. Values beyond ``truncate * sigma`` are zero.
    """
    shape = tuple(int(s) for s in shape)
    if sigma <= 0 or not np.isfinite(sigma):
        raise ValueError(f"sigma must be positive, got {sigma}")
    c = np.asarray(center, dtype=np.float64)
    if c.shape != (3,) or np.any(c < 0) or np.any(c >= np.asarray(shape)):
        raise ValueError(f"center {tuple(c)} outside volume of shape {shape}")
    out = np.zeros(shape, dtype=np.float32)
    gaussian_fill(out, c, nearest_voxel(c, shape), sigma, truncate * sigma, squared)
    return Volume3D(out)


def build_targets(
    landmarks: LandmarkSet,
    shape,
    sigmas,
    squared: bool = True,
    truncate: float = TRUNCATE,
    spacing=(1.0, 1.0, 1.0),
) -> HeatmapStack:
    """Target stack for the first ``len(sigmas)`` landmark slots."""
    shape = tuple(int(s) for s in shape)
    s = _check_sigmas(sigmas)
    if landmarks.reference_shape is not None and tuple(landmarks.reference_shape) != shape:
        raise ValueError(f"landmarks reference shape {landmarks.reference_shape} != target shape {shape}")
    n = s.size
    if n > NUM_TEETH:
        raise ValueError(f"at most {NUM_TEETH} channels, got {n}")
    channels = np.zeros((n,) + shape, dtype=np.float32)
    valid = landmarks.valid[:n].copy()
    for i in np.flatnonzero(valid):
        c = landmarks.coords[i]
        if np.any(c < 0) or np.any(c >= np.asarray(shape)):
            raise ValueError(f"landmark {i} at {tuple(c)} outside shape {shape}")
        gaussian_fill(channels[i], c, nearest_voxel(c, shape), s[i], truncate * s[i], squared)
    return HeatmapStack(channels, valid, spacing)


def target_heatmaps_torch(
    coords: torch.Tensor,
    validity: torch.Tensor,
    shape,
    sigmas: torch.Tensor,
    squared: bool = True,
) -> torch.Tensor:
    """Differentiable (w.r.t. ``sigmas``) target stack of shape ``(N, *shape)``.

    Untruncated; invalid channels are zero.
    """
    dtype = sigmas.dtype
    coords = coords.to(dtype)
    grids = [torch.arange(n, dtype=dtype, device=sigmas.device) for n in shape]
    peak = torch.clamp(torch.ceil(coords - 0.5), min=torch.zeros(3, dtype=dtype),
                       max=torch.tensor([n - 1 for n in shape], dtype=dtype))
    dx = (grids[0][None, :] - coords[:, 0:1]) ** 2
    dy = (grids[1][None, :] - coords[:, 1:2]) ** 2
    dz = (grids[2][None, :] - coords[:, 2:3]) ** 2
    d2 = dx[:, :, None, None] + dy[:, None, :, None] + dz[:, None, None, :]
    ref2 = ((peak - coords) ** 2).sum(dim=1)
    two_s2 = (2.0 * sigmas**2)[:, None, None, None]
    if squared:
        g = torch.exp(-(d2 - ref2[:, None, None, None]) / two_s2)
    else:
        g = torch.exp(-(torch.sqrt(d2) - torch.sqrt(ref2)[:, None, None, None]) / two_s2)
    return g * validity.to(dtype)[:, None, None, None]


def _to_tensor(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, HeatmapStack):
        x = x.channels
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def localization_loss(pred, target, sigmas, weight_norm=0.0, cfg: LocalizationLossConfig | None = None, validity=None):
    """Masked sum of squared heatmap differences plus ``alpha*|sigma| + lam*weight_norm``.

    ``pred`` and ``target`` are :class:`HeatmapStack` objects or arrays/tensors
    of shape ``(N, ...)``; for raw arrays the channel mask comes from
    ``validity`` (default: the target stack's, else all valid). Returns a
    float for numpy inputs and a tensor when any input is a tensor.
    """
    cfg = cfg or LocalizationLossConfig(alpha=0.0, lam=0.0)
    as_torch = any(isinstance(v, torch.Tensor) for v in (pred, target, sigmas, weight_norm))
    if validity is None:
        if isinstance(target, HeatmapStack):
            validity = target.validity
        elif isinstance(pred, HeatmapStack):
            validity = pred.validity
    p = _to_tensor(pred)
    t = _to_tensor(target, dtype=p.dtype)
    if p.shape != t.shape:
        raise ValueError(f"pred shape {tuple(p.shape)} != target shape {tuple(t.shape)}")
    s = _to_tensor(sigmas, dtype=p.dtype).reshape(-1)
    w = _to_tensor(weight_norm, dtype=p.dtype)
    for name, v in (("pred", p), ("target", t), ("sigmas", s), ("weight_norm", w)):
        if not bool(torch.isfinite(v.detach()).all()):
            raise ValueError(f"non-finite values in {name}")
    if bool((w.detach() < 0).any()):
        raise ValueError("weight_norm must be non-negative")
    if validity is None:
        mask = torch.ones(p.shape[0], dtype=p.dtype)
    else:
        mask = torch.as_tensor(np.asarray(validity, dtype=bool) if not isinstance(validity, torch.Tensor) else validity)
        mask = mask.to(p.dtype).reshape(-1)
    if mask.shape[0] != p.shape[0]:
        raise ValueError("validity length must match channel count")
    sq = (p - t) ** 2
    data_term = (sq.reshape(p.shape[0], -1).sum(dim=1) * mask).sum()
    loss = data_term + cfg.alpha * torch.linalg.vector_norm(s) + cfg.lam * w
    return loss if as_torch else float(loss)


def extract_coordinates(pred: HeatmapStack, reference_shape=None) -> LandmarkSet:
    """Argmax voxel per valid channel; ties go to the lowest linear index."""
    ch = pred.channels
    n = ch.shape[0]
    if n == 0 or ch[0].size == 0:
        raise ValueError("empty heatmap stack")
    coords = np.full((NUM_TEETH, 3), -1.0)
    shape = ch.shape[1:]
    flat = ch.reshape(n, -1)
    for i in range(min(n, NUM_TEETH)):
        if not pred.validity[i]:
            continue
        row = flat[i]
        if np.all(np.isnan(row)):
            raise ValueError(f"channel {i} is all NaN")
        coords[i] = np.unravel_index(int(np.nanargmax(row)), shape)
    return LandmarkSet(coords, reference_shape if reference_shape is not None else shape)


def rescale_coordinates(lms: LandmarkSet, from_shape, to_shape) -> LandmarkSet:
    """Per-axis ``to/from`` scaling; missing sentinels pass through."""
    f = np.asarray(from_shape, dtype=np.float64)
    t = np.asarray(to_shape, dtype=np.float64)
    if f.shape != (3,) or t.shape != (3,) or np.any(f <= 0) or np.any(t <= 0):
        raise ValueError("shapes must be three positive sizes")
    coords = lms.coords.copy()
    valid = lms.valid
    coords[valid] = coords[valid] * (t / f)
    coords[valid] = np.minimum(coords[valid], np.nextafter(t, 0))
    return LandmarkSet(coords, tuple(int(v) for v in t))
