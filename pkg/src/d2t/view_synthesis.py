"""Pseudo ground truth at unseen viewpoints: sample, warp, clean, inpaint."""

from __future__ import annotations

import logging
import os
import subprocess
import tempfile
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import ndimage
from scipy.interpolate import BSpline
from scipy.spatial.transform import Rotation, Slerp

from .geometry import CameraIntrinsics, Pose, compose, invert

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 5


class ViewSynthesisError(ValueError):
    pass


class WarpDegenerateError(ViewSynthesisError):
    pass


class InpaintError(ViewSynthesisError):
    pass


@dataclass
class NovelPoseSet:
    poses: list[Pose]
    source_views: list[int]

    def __len__(self):
        return len(self.poses)


@dataclass
class WarpResult:
    warped: np.ndarray
    raw_mask: np.ndarray
    cleaned_mask: np.ndarray
    zbuffer: np.ndarray
    inpainted: np.ndarray | None = None
    pose: Pose | None = None
    source_view: int | None = None
    skipped: int = 0

    @property
    def hole_fraction(self) -> float:
        return 1.0 - float(self.cleaned_mask.mean())


class Inpainter(Protocol):
    """Fills the pixels where ``mask`` is False; must keep the True pixels untouched."""

    def __call__(self, image: np.ndarray, mask: np.ndarray) -> np.ndarray: ...


# --------------------------------------------------------------------------- poses


def _clamped_uniform_knots(n_ctrl: int, degree: int) -> np.ndarray:
    inner = np.linspace(0.0, 1.0, n_ctrl - degree + 1)
    return np.concatenate([np.zeros(degree), inner, np.ones(degree)])


def center_spline(centers: np.ndarray) -> BSpline:
    """Clamped uniform B-spline (cubic when possible) with the centers as control points."""
    centers = np.asarray(centers, dtype=np.float64)
    degree = min(3, len(centers) - 1)
    return BSpline(_clamped_uniform_knots(len(centers), degree), centers, degree)


def sample_novel_poses(training_poses: Sequence[Pose], K_p: int) -> NovelPoseSet:
    """``K_p`` poses between every consecutive pair of training cameras.

    Centers come from a clamped B-spline over the camera centers; rotations are
    slerped between the two bracketing training rotations at the same local
    parameter. Each pose is assigned the training view with the nearest center.
    """
    N = len(training_poses)
    if N < 2:
        raise ViewSynthesisError("need at least two training poses")
    if K_p < 1:
        raise ViewSynthesisError(f"K_p must be >= 1, got {K_p}")
    centers = np.stack([p.center for p in training_poses])
    spline = center_spline(centers)
    c2w = Rotation.from_matrix(np.stack([p.rotation.T for p in training_poses]))

    local = np.arange(1, K_p + 1) / (K_p + 1.0)
    poses, sources = [], []
    for seg in range(N - 1):
        slerp = Slerp([0.0, 1.0], c2w[[seg, seg + 1]])
        rots = slerp(local).as_matrix()
        pts = spline((seg + local) / (N - 1))
        for R_c2w, c in zip(rots, pts):
            R = R_c2w.T
            poses.append(Pose(R, -R @ c))
            d = np.linalg.norm(centers - c, axis=1)
            sources.append(int(np.argmin(d)))  # argmin keeps the lowest index on ties
    return NovelPoseSet(poses, sources)


# --------------------------------------------------------------------------- warping


def warp(source: np.ndarray, depth: np.ndarray, src_pose: Pose, dst_pose: Pose,
         intrinsics: CameraIntrinsics) -> WarpResult:
    """Forward-splat ``source`` into ``dst_pose`` through ``depth`` with Z-buffering."""
    source = np.asarray(source, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    if source.shape[:2] != (H, W) or intrinsics.shape != (H, W):
        raise ViewSynthesisError(
            f"resolution mismatch: image {source.shape[:2]}, depth {(H, W)}, camera {intrinsics.shape}"
        )
    valid = np.isfinite(depth) & (depth > 0)
    skipped = int(depth.size - np.count_nonzero(valid))
    if skipped > 0.5 * depth.size:
        raise WarpDegenerateError(f"{skipped} of {depth.size} source pixels have no valid depth")

    rel = compose(dst_pose, invert(src_pose))  # source camera -> destination camera
    rays = intrinsics.rays()[valid]
    cam = rays * depth[valid][:, None]
    dst = cam @ rel.rotation.T + rel.translation
    z = dst[:, 2]
    front = z > 0
    f = intrinsics.focal
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.rint(f * dst[:, 0] / z + intrinsics.cx)
        v = np.rint(f * dst[:, 1] / z + intrinsics.cy)
    inside = front & (u >= 0) & (u < W) & (v >= 0) & (v < H)
    src_idx = np.flatnonzero(valid.ravel())[inside]
    dst_idx = (v[inside].astype(np.int64) * W + u[inside].astype(np.int64))
    z = z[inside]

    # nearest depth wins; ties go to the earlier source pixel
    order = np.lexsort((src_idx, z, dst_idx))
    dst_sorted = dst_idx[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = dst_sorted[1:] != dst_sorted[:-1]
    win = order[first]

    warped = np.zeros((H * W, 3))
    zbuf = np.full(H * W, np.inf)
    mask = np.zeros(H * W, dtype=bool)
    warped[dst_idx[win]] = source.reshape(-1, 3)[src_idx[win]]
    zbuf[dst_idx[win]] = z[win]
    mask[dst_idx[win]] = True
    return WarpResult(
        warped=warped.reshape(H, W, 3),
        raw_mask=mask.reshape(H, W),
        cleaned_mask=mask.reshape(H, W).copy(),
        zbuffer=zbuf.reshape(H, W),
        pose=dst_pose,
        skipped=skipped,
    )


def window_counts(mask: np.ndarray, w: int) -> tuple[np.ndarray, np.ndarray]:
    """True-pixel count and clipped window size of every ``w x w`` window."""
    kernel = np.ones((w, w), dtype=np.int64)
    m = np.asarray(mask, dtype=np.int64)
    counts = ndimage.correlate(m, kernel, mode="constant", cval=0)
    sizes = ndimage.correlate(np.ones_like(m), kernel, mode="constant", cval=0)
    return counts, sizes


def clean_mask(raw_mask: np.ndarray, w: int = DEFAULT_WINDOW) -> np.ndarray:
    """Drop isolated warped pixels.

    A True pixel survives if at least ``w*w/2`` pixels of its window (itself
    included, window clipped at the border) are True, or if its clipped window
    is entirely True. False pixels never change.
    """
    if w < 3 or w % 2 == 0:
        raise ViewSynthesisError(f"window must be odd and >= 3, got {w}")
    raw_mask = np.asarray(raw_mask, dtype=bool)
    counts, sizes = window_counts(raw_mask, w)
    keep = (2 * counts >= w * w) | (counts == sizes)
    return raw_mask & keep


# --------------------------------------------------------------------------- inpainting


def _push_pull(image: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Coarse fill: average known pixels down a pyramid, then pull back up."""
    H, W = known.shape
    if known.all() or min(H, W) == 1:
        if known.any():
            out = image.copy()
            out[~known] = image[known].mean(axis=0)
            return out
        return image.copy()
    wgt = known.astype(np.float64)
    Hp, Wp = H + H % 2, W + W % 2
    img_p = np.zeros((Hp, Wp, image.shape[2]))
    w_p = np.zeros((Hp, Wp))
    img_p[:H, :W] = image * wgt[..., None]
    w_p[:H, :W] = wgt
    w_c = w_p.reshape(Hp // 2, 2, Wp // 2, 2).sum(axis=(1, 3))
    s_c = img_p.reshape(Hp // 2, 2, Wp // 2, 2, -1).sum(axis=(1, 3))
    known_c = w_c > 0
    coarse = np.where(known_c[..., None], s_c / np.maximum(w_c, 1e-12)[..., None], 0.0)
    coarse = _push_pull(coarse, known_c)
    up = np.repeat(np.repeat(coarse, 2, axis=0), 2, axis=1)[:H, :W]
    return np.where(known[..., None], image, up)


def inpaint_diffusion(image: np.ndarray, mask: np.ndarray, *, tol: float = 1e-4,
                      max_sweeps: int = 500) -> np.ndarray:
    """Harmonic hole filling: each hole pixel relaxes to the mean of its in-bounds 4-neighbors."""
    image = np.asarray(image, dtype=np.float64)
    known = np.asarray(mask, dtype=bool)
    if known.shape != image.shape[:2]:
        raise InpaintError(f"mask {known.shape} does not match image {image.shape[:2]}")
    if not known.any():
        raise InpaintError("mask has no valid pixels to anchor the fill")
    if known.all():
        return image.copy()
    out = _push_pull(image, known)
    holes = ~known
    H, W = known.shape
    nbr = np.zeros((H, W))
    nbr[1:] += 1
    nbr[:-1] += 1
    nbr[:, 1:] += 1
    nbr[:, :-1] += 1
    for _ in range(max_sweeps):
        acc = np.zeros_like(out)
        acc[1:] += out[:-1]
        acc[:-1] += out[1:]
        acc[:, 1:] += out[:, :-1]
        acc[:, :-1] += out[:, 1:]
        new = acc / nbr[..., None]
        change = np.abs(new[holes] - out[holes]).max()
        out[holes] = new[holes]
        if change < tol:
            break
    out[known] = image[known]
    return out


class ExternalInpainter:
    """Runs ``<command> <image.png> <mask.png> <out.png>`` in a scratch directory.

    ``mask.png`` is 8-bit with 255 on the holes to fill and 0 on valid pixels.
    Known pixels of the result are restored from the input, so 8-bit round
    trips never touch them.
    """

    def __init__(self, command: Sequence[str] | str, timeout: float | None = 600.0):
        self.command = [command] if isinstance(command, str) else list(command)
        self.timeout = timeout

    def __call__(self, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        from .pipeline.formats import read_png, write_png

        mask = np.asarray(mask, dtype=bool)
        with tempfile.TemporaryDirectory(prefix="d2t-inpaint-") as tmp:
            img_p = os.path.join(tmp, "image.png")
            mask_p = os.path.join(tmp, "mask.png")
            out_p = os.path.join(tmp, "out.png")
            write_png(img_p, image)
            write_png(mask_p, np.where(mask, 0.0, 1.0))
            proc = subprocess.run(self.command + [img_p, mask_p, out_p],
                                  capture_output=True, timeout=self.timeout)
            if proc.returncode != 0:
                raise InpaintError(
                    f"inpainter exited with {proc.returncode}: {proc.stderr.decode(errors='replace').strip()}"
                )
            if not os.path.exists(out_p):
                raise InpaintError("inpainter did not write its output image")
            filled = read_png(out_p)
        if filled.shape != image.shape:
            raise InpaintError(f"inpainter returned shape {filled.shape}, expected {image.shape}")
        filled[mask] = image[mask]
        return filled


# --------------------------------------------------------------------------- composite


def synthesize(images: Sequence[np.ndarray], depths: Sequence[np.ndarray], poses: Sequence[Pose],
               novel: NovelPoseSet, intrinsics: CameraIntrinsics,
               inpainter: Callable[[np.ndarray, np.ndarray], np.ndarray] = inpaint_diffusion,
               window: int = DEFAULT_WINDOW, failures: list | None = None) -> list[WarpResult]:
    """Warp, clean and inpaint one pseudo view per novel pose.

    Poses whose warp or inpainting fails are skipped; a record is appended to
    ``failures`` (when given) and a warning is logged.
    """
    if not (len(images) == len(depths) == len(poses)):
        raise ViewSynthesisError("images, depths and poses must have equal length")
    results = []
    for k, (pose, src) in enumerate(zip(novel.poses, novel.source_views)):
        try:
            res = warp(images[src], depths[src], poses[src], pose, intrinsics)
            res.cleaned_mask = clean_mask(res.raw_mask, window)
            res.source_view = src
            if not res.cleaned_mask.any():
                raise InpaintError("no pixel survived mask cleaning")
            res.inpainted = inpainter(res.warped, res.cleaned_mask)
            res.inpainted[res.cleaned_mask] = res.warped[res.cleaned_mask]
        except ViewSynthesisError as exc:
            log.warning("novel pose %d (source view %d) skipped: %s", k, src, exc)
            if failures is not None:
                failures.append({"pose_index": k, "source_view": src, "error": str(exc)})
            continue
        results.append(res)
    return results
