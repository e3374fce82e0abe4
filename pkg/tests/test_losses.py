import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from toothseg.losses import (
    LossParams,
    balanced_bce,
    combo_loss,
    focal_loss,
    focal_tversky_loss,
    get_loss,
    soft_dice,
    tversky_index,
)


def bce_oracle(p, y, clamp=1e-7):
    """Plain mean binary cross-entropy, written independently of the package."""
    p = np.clip(np.asarray(p, dtype=np.float64), clamp, 1 - clamp)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def tversky_oracle(p, g, beta, eps):
    pg = float(np.sum(p * g))
    fp = float(np.sum(p * (1 - g)))
    fn = float(np.sum((1 - p) * g))
    return (pg + eps) / (pg + beta * fp + (1 - beta) * fn + eps)


def test_focal_perfect():
    assert focal_loss(np.ones((3, 3, 3)), np.ones((3, 3, 3))) < 1e-6
    assert focal_loss(np.zeros(4), np.zeros(4)) < 1e-6


def test_focal_scalar():
    expected = 0.9 * 0.25 * math.log(2)
    assert expected == pytest.approx(0.1559581, abs=1e-7)
    assert focal_loss([0.5], [1.0], alpha=0.9, gamma=2.0) == pytest.approx(expected, rel=1e-12)


def test_focal_reduces_to_half_bce():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.01, 0.99, (6, 6, 6))
    y = (rng.random((6, 6, 6)) < 0.3).astype(float)
    assert focal_loss(p, y, alpha=0.5, gamma=0.0) == pytest.approx(0.5 * bce_oracle(p, y), rel=1e-12)


def test_tversky_identity_and_disjoint():
    g = np.zeros((4, 4, 4))
    g[1:3, 1:3, 1:3] = 1
    assert tversky_index(g, g) == pytest.approx(1.0, abs=1e-12)
    other = np.zeros_like(g)
    other[0, 0, :] = 1
    assert tversky_index(other, g) < 1e-6


def test_tversky_hand_value():
    p = np.array([1, 1, 1, 0], dtype=float)
    g = np.array([1, 1, 0, 1], dtype=float)  # |PG|=2, |P\G|=1, |G\P|=1
    assert tversky_index(p, g, beta=0.9, epsilon=1e-12) == pytest.approx(2 / 3, rel=1e-9)


def test_tversky_matches_oracle():
    rng = np.random.default_rng(1)
    p = rng.random((5, 5, 5))
    g = (rng.random((5, 5, 5)) < 0.4).astype(float)
    assert tversky_index(p, g, 0.7, 1e-6) == pytest.approx(tversky_oracle(p, g, 0.7, 1e-6), rel=1e-12)


def test_ftl_values():
    g = np.zeros((2, 2, 2))
    g[0] = 1
    assert focal_tversky_loss(g, g) == pytest.approx(0.0, abs=1e-6)
    # |PG|=3, |G\P|=1, beta -> 0 gives TI = 3/4
    p = np.array([1, 1, 1, 0], dtype=float)
    y = np.array([1, 1, 1, 1], dtype=float)
    ti = tversky_index(p, y, beta=1e-12, epsilon=1e-15)
    assert ti == pytest.approx(0.75, rel=1e-9)
    assert focal_tversky_loss(p, y, beta=1e-12, gamma=2.0, epsilon=1e-15) == pytest.approx(0.5, rel=1e-9)


def test_ftl_gamma_one_is_one_minus_ti():
    rng = np.random.default_rng(2)
    p = rng.random((6, 6, 6))
    g = (rng.random((6, 6, 6)) < 0.2).astype(float)
    assert focal_tversky_loss(p, g, 0.9, 1.0) == pytest.approx(1 - tversky_index(p, g, 0.9), rel=1e-12)


def test_bbce_values():
    assert balanced_bce(np.ones(5), np.ones(5)) < 1e-6
    expected = 0.9 * math.log(2)
    assert expected == pytest.approx(0.623832, abs=1e-6)
    assert balanced_bce([0.5], [1.0], alpha=0.9) == pytest.approx(expected, rel=1e-12)
    rng = np.random.default_rng(3)
    p = rng.uniform(0.01, 0.99, 50)
    y = (rng.random(50) < 0.5).astype(float)
    assert balanced_bce(p, y, alpha=0.5) == pytest.approx(0.5 * bce_oracle(p, y), rel=1e-12)


def test_dice_values():
    y = np.zeros(10)
    y[:6] = 1
    assert soft_dice(y, y) == pytest.approx(1.0, abs=1e-12)
    assert soft_dice(1 - y, y) < 1e-6
    x = np.zeros(10)
    x[3:7] = 1  # |X|=4, |X∩Y|=3
    assert soft_dice(x, y, epsilon=1e-15) == pytest.approx(0.6, rel=1e-12)


def test_combo_values():
    rng = np.random.default_rng(4)
    p = rng.uniform(0.01, 0.99, (4, 4, 4))
    y = (rng.random((4, 4, 4)) < 0.3).astype(float)
    assert combo_loss(p, y, delta=1.0) == balanced_bce(p, y)
    assert combo_loss(y, y, delta=0.0) == pytest.approx(-1.0, abs=1e-9)
    assert combo_loss(y, y, delta=0.5) == pytest.approx(-0.5, abs=1e-6)


def test_shape_mismatch():
    for fn in (focal_loss, tversky_index, focal_tversky_loss, balanced_bce, soft_dice, combo_loss):
        with pytest.raises(ValueError):
            fn(np.zeros((2, 2)), np.zeros((2, 3)))


def test_params_validation():
    with pytest.raises(ValueError):
        LossParams(alpha=1.5)
    with pytest.raises(ValueError):
        LossParams(beta=1.0)
    with pytest.raises(ValueError):
        LossParams(gamma=0.0)
    with pytest.raises(ValueError):
        get_loss("dice")


def test_batch_reduction_region_terms():
    rng = np.random.default_rng(5)
    p = rng.random((3, 1, 4, 4, 4))
    g = (rng.random((3, 1, 4, 4, 4)) < 0.3).astype(float)
    per = [tversky_oracle(p[b], g[b], 0.9, 1e-6) for b in range(3)]
    assert tversky_index(p, g) == pytest.approx(np.mean(per), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 1))
def test_loss_ranges(seed, delta_one):
    rng = np.random.default_rng(seed)
    p = rng.random((4, 4, 4))
    y = (rng.random((4, 4, 4)) < 0.3).astype(float)
    assert focal_loss(p, y) >= 0
    assert focal_tversky_loss(p, y) >= 0
    assert balanced_bce(p, y) >= 0
    delta = 1.0 if delta_one else 0.5
    assert combo_loss(p, y, delta=delta) >= -(1 - delta) - 1e-12
    assert 0 <= soft_dice(p, y) <= 1 + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 0.98), st.floats(0.001, 0.01), st.integers(0, 1))
def test_focal_decreasing_in_pt(pt, step, label):
    def fl(pt_val):
        p = pt_val if label == 1 else 1 - pt_val
        return focal_loss([p], [float(label)])

    assert fl(pt + step) < fl(pt)


def test_ti_increases_with_false_negative_prob():
    rng = np.random.default_rng(6)
    p = rng.uniform(0.1, 0.5, 20)
    g = np.zeros(20)
    g[:5] = 1
    base = tversky_index(p, g)
    p2 = p.copy()
    p2[0] += 0.2
    assert tversky_index(p2, g) > base


def _fd_grad(f, x, idx, h=1e-6):
    out = []
    flat = x.reshape(-1)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


@pytest.mark.parametrize(
    "fn",
    [
        lambda p, y: focal_loss(p, y, 0.9, 2.0),
        lambda p, y: tversky_index(p, y, 0.9),
        lambda p, y: focal_tversky_loss(p, y, 0.9, 2.0),
        lambda p, y: balanced_bce(p, y, 0.9),
        lambda p, y: soft_dice(p, y),
        lambda p, y: combo_loss(p, y, 0.9, 0.5),
    ],
    ids=["focal", "tversky", "focal_tversky", "bbce", "dice", "combo"],
)
def test_gradients_match_fd(fn):
    rng = np.random.default_rng(7)
    p = rng.uniform(0.05, 0.95, (6, 6, 6))
    y = (rng.random((6, 6, 6)) < 0.3).astype(float)
    pt = torch.tensor(p, requires_grad=True)
    fn(pt, torch.tensor(y)).backward()
    idx = rng.choice(p.size, 30, replace=False)
    fd = _fd_grad(lambda x: fn(x, y), p.copy(), idx)
    np.testing.assert_allclose(pt.grad.numpy().reshape(-1)[idx], fd, rtol=1e-4, atol=1e-10)
