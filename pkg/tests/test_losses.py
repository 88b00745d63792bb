import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2t.losses import loss_depth, loss_rgb, ssim


def reference_ssim(x, y):
    """Direct windowed sums over an explicitly zero-padded image."""
    ax = np.arange(11) - 5.0
    g1 = np.exp(-ax**2 / (2 * 1.5**2))
    w = np.outer(g1, g1) / g1.sum() ** 2
    H, W, C = x.shape
    total = 0.0
    for ch in range(C):
        xp = np.pad(x[..., ch], 5)
        yp = np.pad(y[..., ch], 5)
        for i in range(H):
            for j in range(W):
                px, py = xp[i:i + 11, j:j + 11], yp[i:i + 11, j:j + 11]
                mx, my = (w * px).sum(), (w * py).sum()
                vx = (w * px * px).sum() - mx**2
                vy = (w * py * py).sum() - my**2
                cxy = (w * px * py).sum() - mx * my
                c1, c2 = 0.01**2, 0.03**2
                total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return total / (H * W * C)


def test_rgb_identical_is_zero(rng):
    x = rng.random((16, 16, 3))
    assert loss_rgb(x, x, 0.1)[0] == pytest.approx(0.0, abs=1e-15)


def test_rgb_black_white_pure_l1():
    assert loss_rgb(np.zeros((8, 8, 3)), np.ones((8, 8, 3)), 0.0)[0] == 1.0


def test_rgb_matches_reference(rng):
    x, y = rng.random((14, 17, 3)), rng.random((14, 17, 3))
    ref = 0.8 * np.abs(x - y).mean() + 0.2 * (1 - reference_ssim(x, y)) / 2
    assert abs(loss_rgb(x, y, 0.2)[0] - ref) < 1e-8
    assert abs(ssim(x, y) - reference_ssim(x, y)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_rgb_non_negative(seed, lam):
    rng = np.random.default_rng(seed)
    assert loss_rgb(rng.random((12, 12, 3)), rng.random((12, 12, 3)), lam)[0] >= 0


def test_rgb_gradient_finite_differences(rng):
    x, y = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    _, g = loss_rgb(x, y, 0.3)
    fd = np.zeros_like(x)
    h = 1e-6
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd[i] = (loss_rgb(xp, y, 0.3)[0] - loss_rgb(xm, y, 0.3)[0]) / (2 * h)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-3


def test_rgb_shape_mismatch():
    with pytest.raises(ValueError):
        loss_rgb(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_depth_trivial_values(rng):
    D = rng.uniform(1, 5, (16, 16))
    assert loss_depth(D, 1 / D)[0] == pytest.approx(0.0, abs=1e-12)
    assert loss_depth(D, 3.0 / D + 0.7)[0] == pytest.approx(0.0, abs=1e-10)
    assert loss_depth(D, -1 / D)[0] == pytest.approx(2.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0), st.floats(-10.0, 10.0))
def test_depth_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    D = rng.uniform(1, 5, (8, 8))
    m = rng.random((8, 8))
    assert abs(loss_depth(D, a * m + b)[0] - loss_depth(D, m)[0]) < 1e-10


def test_depth_constant_input_is_uncorrelated(rng):
    val, g = loss_depth(np.full((8, 8), 2.0), rng.random((8, 8)))
    assert val == 1.0 and not g.any()
    val, g = loss_depth(rng.uniform(1, 2, (8, 8)), np.ones((8, 8)))
    assert val == 1.0 and not g.any()


def test_depth_alpha_mask(rng):
    D = rng.uniform(1, 5, (8, 8))
    m = 1 / D
    alpha = np.ones((8, 8))
    alpha[:4] = 0.1
    m[:4] = rng.random((4, 8))  # garbage where the render is empty
    val, g = loss_depth(D, m, alpha)
    assert val == pytest.approx(0.0, abs=1e-12)
    assert not g[:4].any()


def test_depth_gradient_finite_differences(rng):
    D = rng.uniform(1, 5, (16, 16))
    m = rng.random((16, 16))
    _, g = loss_depth(D, m)
    fd = np.zeros_like(D)
    h = 1e-6
    for i in np.ndindex(D.shape):
        Dp, Dm = D.copy(), D.copy()
        Dp[i] += h
        Dm[i] -= h
        fd[i] = (loss_depth(Dp, m)[0] - loss_depth(Dm, m)[0]) / (2 * h)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-3
