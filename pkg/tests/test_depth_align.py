import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2t.depth_align import (AffineDepthFit, DegenerateFitError, DepthAlignError, NonPositiveDepthError,
                             align_view_depth, apply_fit, build_confidence, fit_affine, top_p_mask)
from d2t.geometry import upsample_bilinear


def test_build_confidence_trivial(rng):
    A = rng.random((5, 6))
    np.testing.assert_array_equal(build_confidence([A]), A)
    np.testing.assert_array_equal(build_confidence([A, np.zeros_like(A)]), A)


def test_build_confidence_brute_force(rng):
    maps = [rng.random((7, 9)) for _ in range(3)]
    out = build_confidence(maps)
    for i in range(7):
        for j in range(9):
            assert out[i, j] == max(m[i, j] for m in maps)


def test_build_confidence_errors():
    with pytest.raises(DepthAlignError):
        build_confidence([np.ones((2, 2)), np.ones((3, 2))])
    with pytest.raises(DepthAlignError):
        build_confidence([])


def test_top_p_trivial():
    assert top_p_mask(np.random.default_rng(0).random((4, 5)), 1.0).all()
    m = top_p_mask(np.array([[4.0, 3.0], [2.0, 1.0]]), 0.5)
    np.testing.assert_array_equal(m, [[True, True], [False, False]])


def test_top_p_brute_force(rng):
    c = rng.random((64, 64))
    m = top_p_mask(c, 0.3)
    k = math.ceil(0.3 * c.size)
    assert m.sum() == k
    thresh = np.sort(c.ravel())[::-1][k - 1]
    np.testing.assert_array_equal(m, c >= thresh)


def test_top_p_ties_raster_order():
    m = top_p_mask(np.ones((2, 3)), 0.5)
    np.testing.assert_array_equal(m, [[True, True, True], [False, False, False]])


def test_top_p_rejects_bad_fraction():
    with pytest.raises(DepthAlignError):
        top_p_mask(np.ones((2, 2)), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0), st.integers(0, 10_000))
def test_top_p_monotone(p1, p2, seed):
    c = np.random.default_rng(seed).random((8, 8))
    lo, hi = sorted((p1, p2))
    a, b = top_p_mask(c, lo), top_p_mask(c, hi)
    assert a.sum() <= b.sum()
    # every kept pixel outranks every dropped one
    assert c[b].min() >= (c[~b].max() if (~b).any() else -np.inf)


def _depth(rng, shape=(24, 32)):
    return 1.0 + 3.0 * rng.random(shape)


def test_fit_identity(rng):
    D = _depth(rng)
    fit = fit_affine(D, 1.0 / D, np.ones(D.shape, bool))
    assert abs(fit.scale - 1) < 1e-10 and abs(fit.shift) < 1e-10


def test_fit_recovers_affine(rng):
    D = _depth(rng)
    fit = fit_affine(D, (1.0 / D - 0.3) / 2.0, np.ones(D.shape, bool))
    assert abs(fit.scale - 2) < 1e-9 and abs(fit.shift - 0.3) < 1e-9
    np.testing.assert_allclose(apply_fit((1.0 / D - 0.3) / 2.0, fit), D, rtol=1e-8)


def test_fit_ignores_corruption_outside_mask(rng):
    D = _depth(rng)
    mono = (1.0 / D - 0.3) / 2.0
    conf = rng.random(D.shape)
    mask = top_p_mask(conf, 0.3)
    corrupted = np.where(mask, mono, mono * rng.uniform(0.5, 1.5, D.shape))
    fit = fit_affine(D, corrupted, mask)
    assert abs(fit.scale - 2) < 1e-6 and abs(fit.shift - 0.3) < 1e-6


def test_fit_masked_noisy_median_error(rng):
    D = _depth(rng)
    mono = (1.0 / D - 0.3) / 2.0 * (1 + 0.01 * rng.standard_normal(D.shape))
    mask = top_p_mask(rng.random(D.shape), 0.3)
    out = apply_fit(mono, fit_affine(D, mono, mask))
    assert np.median(np.abs(out[mask] - D[mask]) / D[mask]) < 0.01


def test_fit_degenerate_constant_mono(rng):
    with pytest.raises(DegenerateFitError):
        fit_affine(_depth(rng), np.full((24, 32), 0.5), np.ones((24, 32), bool))


def test_fit_non_positive_depth_counts_pixels():
    D = np.array([[1.0, 2.0, 4.0]])
    mono = np.array([[1.0, 0.5, 0.25]])
    mask = np.array([[True, True, False]])
    # the fit on the first two pixels is exact; pushing the unmasked pixel negative breaks it
    with pytest.raises(NonPositiveDepthError) as info:
        fit_affine(D, np.array([[1.0, 0.5, -5.0]]), mask)
    assert info.value.count == 1
    fit = fit_affine(D, mono, mask)
    np.testing.assert_allclose(apply_fit(mono, fit), [[1.0, 2.0, 4.0]])


def test_apply_fit_trivial():
    fit = AffineDepthFit(1.0, 0.0, np.ones((2, 2), bool), 1.0)
    np.testing.assert_array_equal(apply_fit(np.full((2, 2), 0.5), fit), np.full((2, 2), 2.0))
    with pytest.raises(NonPositiveDepthError):
        apply_fit(np.full((2, 2), -1.0), fit)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 10.0), st.floats(-0.2, 0.5), st.integers(0, 10_000))
def test_exact_recovery_property(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    D = _depth(rng, (6, 7))
    mono = alpha * (1.0 / D) + beta
    mask = top_p_mask(rng.random(D.shape), 0.3)
    np.testing.assert_allclose(apply_fit(mono, fit_affine(D, mono, mask)), D, rtol=1e-8)


def test_fit_beats_grid_search(rng):
    D = _depth(rng, (5, 5))
    mono = rng.random((5, 5))
    mask = np.ones((5, 5), bool)
    fit = fit_affine(D, mono, mask)

    def residual(a, b):
        return float(np.sum((1.0 / D - (b + a * mono)) ** 2))

    best = residual(fit.scale, fit.shift)
    for a in np.linspace(fit.scale - 1, fit.scale + 1, 200):
        for b in np.linspace(fit.shift - 1, fit.shift + 1, 200):
            assert best <= residual(a, b) + 1e-15


def test_align_view_depth_upsamples(rng):
    # coarse depth at half resolution, mono at full resolution, exact affine relation
    coarse = np.full((12, 16), 2.0) + np.linspace(0, 1, 16)[None, :]
    up = upsample_bilinear(coarse, 24, 32)
    mono = (1.0 / up - 0.1) / 3.0
    depth, fit = align_view_depth(coarse, [rng.random((12, 16))], mono, P=0.3)
    np.testing.assert_allclose(depth, up, rtol=1e-8)
    assert fit.retained_fraction == 0.3
    assert fit.mask.sum() == math.ceil(0.3 * 24 * 32)
