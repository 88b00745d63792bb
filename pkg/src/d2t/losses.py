"""Photometric and depth-correlation losses with their image-space adjoints."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
DEPTH_ALPHA_MIN = 0.5


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _blur(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Same-size separable filtering with zero padding, per channel."""
    out = ndimage.correlate1d(img, g, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(out, g, axis=1, mode="constant", cval=0.0)


def _check_pair(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x, y = _check_pair(x, y)
    g = gaussian_window()
    mx, my = _blur(x, g), _blur(y, g)
    sxx = _blur(x * x, g) - mx * mx
    syy = _blur(y * y, g) - my * my
    sxy = _blur(x * y, g) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5, zero padding)."""
    return float(ssim_map(x, y).mean())


def ssim_with_grad(x: np.ndarray, y: np.ndarray):
    """Mean SSIM and its gradient with respect to ``x``."""
    shape = np.shape(x)
    x, y = _check_pair(x, y)
    g = gaussian_window()
    mx, my = _blur(x, g), _blur(y, g)
    sxx = _blur(x * x, g) - mx * mx
    syy = _blur(y * y, g) - my * my
    sxy = _blur(x * y, g) - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    s = a1 * a2 / (b1 * b2)
    n = s.size
    # partials of the map w.r.t. the local moments mean(x), mean(x^2), mean(xy)
    d_mx = s * (2 * my / a1 - 2 * my / a2 - 2 * mx / b1 + 2 * mx / b2) / n
    d_exx = -s / b2 / n
    d_exy = 2 * s / a2 / n
    # zero-padded correlation with a symmetric kernel is self-adjoint
    grad = _blur(d_mx, g) + 2 * x * _blur(d_exx, g) + y * _blur(d_exy, g)
    return float(s.mean()), grad.reshape(shape)


def loss_rgb(rendered: np.ndarray, target: np.ndarray, lam: float = 0.1):
    """``(1 - lam) * mean|r - t| + lam * (1 - SSIM) / 2`` and its gradient w.r.t. ``rendered``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    l1 = np.abs(diff).mean()
    grad = (1.0 - lam) * np.sign(diff) / diff.size
    value = (1.0 - lam) * l1
    if lam > 0:
        s, gs = ssim_with_grad(rendered, target)
        value += lam * (1.0 - s) / 2.0
        grad = grad - 0.5 * lam * gs
    return float(value), grad


def loss_depth(rendered_depth: np.ndarray, mono: np.ndarray, alpha: np.ndarray | None = None,
               alpha_min: float = DEPTH_ALPHA_MIN):
    """One minus the Pearson correlation of rendered inverse depth and mono depth.

    Only pixels with accumulated alpha above ``alpha_min`` and finite positive
    depth take part. Returns ``(value, gradient w.r.t. rendered_depth)``; a
    degenerate (constant) input gives 1 with zero gradient.
    """
    D = np.asarray(rendered_depth, dtype=np.float64)
    mono = np.asarray(mono, dtype=np.float64)
    if D.shape != mono.shape:
        raise ValueError(f"depth shapes differ: {D.shape} vs {mono.shape}")
    valid = np.isfinite(D) & (D > 0) & np.isfinite(mono)
    if alpha is not None:
        valid &= np.asarray(alpha) > alpha_min
    grad = np.zeros_like(D)
    if np.count_nonzero(valid) < 2:
        log.debug("depth loss: fewer than two valid pixels")
        return 1.0, grad
    inv = 1.0 / D[valid]
    xc = inv - inv.mean()
    yc = mono[valid] - mono[valid].mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    scale = max(np.abs(inv).max(), np.abs(mono[valid]).max(), 1e-300)
    if sxx <= (1e-12 * scale) ** 2 * len(xc) or syy <= (1e-12 * scale) ** 2 * len(yc):
        log.info("depth loss: zero variance, treating as uncorrelated")
        return 1.0, grad
    norm = np.sqrt(sxx * syy)
    rho = float(xc @ yc) / norm
    d_inv = yc / norm - rho * xc / sxx
    grad[valid] = d_inv * inv * inv  # d(1 - rho)/dD = drho/dinv * inv^2
    return 1.0 - rho, grad
