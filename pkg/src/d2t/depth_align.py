"""Confidence-aware alignment of monocular inverse depth to coarse depth.

A mono-depth network predicts relative inverse depth up to an unknown affine
map. We upsample the coarse (metric, gauge-fixed) depth and its confidence to
the mono resolution, keep only the most confident fraction ``P`` of pixels and
solve the 2x2 least-squares problem

    min_{a,b}  sum_mask ( 1 / D_up - (b + a * D_mono) )^2

so the aligned depth is ``1 / (b + a * D_mono)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import upsample_bilinear

DEFAULT_P = 0.3


class DepthAlignError(ValueError):
    pass


class DegenerateFitError(DepthAlignError):
    """The normal matrix is singular (e.g. constant mono depth over the mask)."""


class NonPositiveDepthError(DepthAlignError):
    def __init__(self, count: int):
        super().__init__(f"aligned depth is non-positive at {count} pixel(s)")
        self.count = count


@dataclass(frozen=True)
class AffineDepthFit:
    scale: float
    shift: float
    mask: np.ndarray
    retained_fraction: float

    def inverse_depth(self, mono: np.ndarray) -> np.ndarray:
        return self.shift + self.scale * np.asarray(mono, dtype=np.float64)


def build_confidence(confidences) -> np.ndarray:
    """Pointwise maximum over all confidence maps of one view."""
    maps = [np.asarray(c, dtype=np.float64) for c in confidences]
    if not maps:
        raise DepthAlignError("need at least one confidence map")
    shape = maps[0].shape
    bad = [k for k, c in enumerate(maps) if c.shape != shape]
    if bad:
        raise DepthAlignError(f"confidence maps {bad} do not match shape {shape}")
    return np.maximum.reduce(maps)


def top_p_mask(confidence: np.ndarray, P: float = DEFAULT_P) -> np.ndarray:
    """Mask of the ``ceil(P * W * H)`` most confident pixels.

    Ties are broken in raster order (earlier pixels win).
    """
    if not 0.0 < P <= 1.0:
        raise DepthAlignError(f"P must lie in (0, 1], got {P}")
    conf = np.asarray(confidence, dtype=np.float64)
    n = conf.size
    # round() guards against P * n landing a few ulps above an integer
    keep = min(n, math.ceil(round(P * n, 9)))
    order = np.argsort(-conf.ravel(), kind="stable")
    mask = np.zeros(n, dtype=bool)
    mask[order[:keep]] = True
    return mask.reshape(conf.shape)


def fit_affine(coarse_up: np.ndarray, mono: np.ndarray, mask: np.ndarray,
               retained_fraction: float | None = None) -> AffineDepthFit:
    coarse_up = np.asarray(coarse_up, dtype=np.float64)
    mono = np.asarray(mono, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not (coarse_up.shape == mono.shape == mask.shape):
        raise DepthAlignError(
            f"shape mismatch: coarse {coarse_up.shape}, mono {mono.shape}, mask {mask.shape}"
        )
    d = coarse_up[mask]
    m = mono[mask]
    if d.size < 2:
        raise DegenerateFitError("fewer than two masked pixels")
    if not np.all(d > 0) or not np.all(np.isfinite(d)):
        raise DepthAlignError("coarse depth must be positive and finite on the mask")

    target = 1.0 / d
    # centered normal equations; same minimizer, better conditioned
    m_mean = m.mean()
    t_mean = target.mean()
    mc = m - m_mean
    smm = float(mc @ mc)
    if smm <= 1e-14 * max(1.0, float(m @ m)):
        raise DegenerateFitError("mono depth is constant over the mask")
    a = float(mc @ (target - t_mean)) / smm
    b = float(t_mean - a * m_mean)

    denom = b + a * mono
    bad = int(np.count_nonzero(~(denom > 0)))
    if bad:
        raise NonPositiveDepthError(bad)
    P = float(mask.mean()) if retained_fraction is None else float(retained_fraction)
    return AffineDepthFit(a, b, mask, P)


def apply_fit(mono: np.ndarray, fit: AffineDepthFit) -> np.ndarray:
    denom = fit.inverse_depth(mono)
    bad = int(np.count_nonzero(~(denom > 0)))
    if bad:
        raise NonPositiveDepthError(bad)
    return 1.0 / denom


def align_view_depth(coarse_depth: np.ndarray, confidences, mono: np.ndarray,
                     P: float = DEFAULT_P) -> tuple[np.ndarray, AffineDepthFit]:
    """Full alignment for one view: upsample, mask, fit, apply.

    ``coarse_depth`` and ``confidences`` live at the pointmap resolution,
    ``mono`` at image resolution.
    """
    mono = np.asarray(mono, dtype=np.float64)
    H, W = mono.shape
    conf = build_confidence(confidences)
    coarse_up = upsample_bilinear(coarse_depth, H, W)
    conf_up = upsample_bilinear(conf, H, W)
    # invalid coarse pixels never enter the fit
    conf_up = np.where(np.isfinite(coarse_up) & (coarse_up > 0), conf_up, -np.inf)
    mask = top_p_mask(conf_up, P)
    fit = fit_affine(np.where(mask, coarse_up, 1.0), mono, mask, retained_fraction=P)
    return apply_fit(mono, fit), fit
