"""Class-imbalance losses on probabilities.

Every function takes probabilities ``p`` (sigmoid of the U-Net logits) and
targets of the same shape, as numpy arrays or torch tensors. Numpy inputs
return floats; tensor inputs return differentiable scalar tensors.

Inputs with ``ndim >= 4`` are treated as a batch along the first axis: region
terms (Tversky, Dice) are computed per sample and then averaged, per-voxel
terms (focal, balanced BCE) are plain means over every voxel.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import torch

PROB_CLAMP = 1e-7
EPSILON = 1e-6


@dataclass(frozen=True)
class LossParams:
    alpha: float = 0.9
    beta: float = 0.9
    gamma: float = 2.0
    delta: float = 0.5
    epsilon: float = EPSILON
    prob_clamp: float = PROB_CLAMP

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.epsilon <= 0 or not 0 <= self.prob_clamp < 0.5:
            raise ValueError("epsilon must be positive and prob_clamp in [0, 0.5)")

    def with_(self, **kw) -> "LossParams":
        return replace(self, **kw)


def _prep(p, y):
    as_torch = isinstance(p, torch.Tensor) or isinstance(y, torch.Tensor)
    if not isinstance(p, torch.Tensor):
        p = torch.as_tensor(np.asarray(p, dtype=np.float64))
    if not isinstance(y, torch.Tensor):
        y = torch.as_tensor(np.asarray(y, dtype=np.float64))
    y = y.to(p.dtype)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: probabilities {tuple(p.shape)} vs targets {tuple(y.shape)}")
    return p, y, as_torch


def _out(value: torch.Tensor, as_torch: bool):
    return value if as_torch else float(value)


def _sample_sums(x: torch.Tensor) -> torch.Tensor:
    if x.ndim >= 4:
        return x.reshape(x.shape[0], -1).sum(dim=1)
    return x.sum().reshape(1)


def _focal(p, y, alpha, gamma, clamp):
    p = p.clamp(clamp, 1.0 - clamp)
    p_t = y * p + (1 - y) * (1 - p)
    alpha_t = y * alpha + (1 - y) * (1 - alpha)
    return (-alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()


def focal_loss(p, y, alpha: float = 0.9, gamma: float = 2.0, prob_clamp: float = PROB_CLAMP):
    """Mean of ``-alpha_t (1 - p_t)^gamma log(p_t)``.

    Soft (smoothed) targets interpolate ``p_t`` and ``alpha_t`` linearly
    between the two classes.
    """
    p, y, as_torch = _prep(p, y)
    return _out(_focal(p, y, alpha, gamma, prob_clamp), as_torch)


def _tversky(p, g, beta, eps):
    pg = _sample_sums(p * g)
    p_not_g = _sample_sums(p * (1 - g))
    g_not_p = _sample_sums((1 - p) * g)
    return (pg + eps) / (pg + beta * p_not_g + (1 - beta) * g_not_p + eps)


def tversky_index(p, g, beta: float = 0.9, epsilon: float = EPSILON):
    """Soft Tversky index; ``beta`` weights false positives, ``1 - beta`` false negatives."""
    p, g, as_torch = _prep(p, g)
    return _out(_tversky(p, g, beta, epsilon).mean(), as_torch)


def focal_tversky_loss(p, g, beta: float = 0.9, gamma: float = 2.0, epsilon: float = EPSILON):
    p, g, as_torch = _prep(p, g)
    ti = _tversky(p, g, beta, epsilon)
    # clamp guards the 1/gamma root at TI == 1
    return _out(torch.clamp(1.0 - ti, min=0.0).pow(1.0 / gamma).mean(), as_torch)


def _bbce(p, y, alpha, clamp):
    p = p.clamp(clamp, 1.0 - clamp)
    return (-alpha * y * torch.log(p) - (1 - alpha) * (1 - y) * torch.log(1 - p)).mean()


def balanced_bce(p, y, alpha: float = 0.9, prob_clamp: float = PROB_CLAMP):
    p, y, as_torch = _prep(p, y)
    return _out(_bbce(p, y, alpha, prob_clamp), as_torch)


def _dice(p, y, eps):
    return (2 * _sample_sums(p * y) + eps) / (_sample_sums(p) + _sample_sums(y) + eps)


def soft_dice(p, y, epsilon: float = EPSILON):
    p, y, as_torch = _prep(p, y)
    return _out(_dice(p, y, epsilon).mean(), as_torch)


def combo_loss(p, y, alpha: float = 0.9, delta: float = 0.5, epsilon: float = EPSILON, prob_clamp: float = PROB_CLAMP):
    """``delta * BBCE - (1 - delta) * Dice``; can be negative."""
    p, y, as_torch = _prep(p, y)
    value = delta * _bbce(p, y, alpha, prob_clamp) - (1 - delta) * _dice(p, y, epsilon).mean()
    return _out(value, as_torch)


LOSS_NAMES = ("focal", "focal_tversky", "combo")


def get_loss(name: str, params: LossParams | None = None) -> Callable:
    """Loss callable ``f(probs, targets)`` selected by name."""
    prm = params or LossParams()
    if name == "focal":
        return lambda p, y: focal_loss(p, y, prm.alpha, prm.gamma, prm.prob_clamp)
    if name == "focal_tversky":
        return lambda p, y: focal_tversky_loss(p, y, prm.beta, prm.gamma, prm.epsilon)
    if name == "combo":
        return lambda p, y: combo_loss(p, y, prm.alpha, prm.delta, prm.epsilon, prm.prob_clamp)
    raise ValueError(f"unknown loss {name!r}; expected one of {LOSS_NAMES}")
