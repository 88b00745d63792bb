"""Camera, pose and image-grid primitives shared by the whole pipeline.

Conventions used everywhere in the package:

* ``Pose`` maps world coordinates to camera coordinates (``x_cam = R x_world + t``).
* Pixel ``(i, j)`` is column ``i``, row ``j`` and samples the continuous image
  location ``(i, j)``; the principal point sits at ``(W/2, H/2)``.
* Scalar maps are ``(H, W)`` float arrays, color images ``(H, W, 3)`` floats in
  ``[0, 1]`` and masks ``(H, W)`` bool arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Invalid geometric input (non-positive depth, bad shapes, ...)."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera with a shared focal and a centered principal point."""

    focal: float
    width: int
    height: int

    def __post_init__(self):
        if not (np.isfinite(self.focal) and self.focal > 0):
            raise GeometryError(f"focal must be positive, got {self.focal}")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError(f"image size must be positive, got {self.width}x{self.height}")

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.focal, 0.0, self.cx], [0.0, self.focal, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def scaled_to(self, width: int, height: int) -> "CameraIntrinsics":
        """Same camera seen at another resolution (focal scales with width)."""
        return CameraIntrinsics(self.focal * width / self.width, width, height)

    def rays(self) -> np.ndarray:
        """``(H, W, 3)`` array of ``K^-1 [i, j, 1]`` for every pixel."""
        j, i = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack(
            [(i - self.cx) / self.focal, (j - self.cy) / self.focal, np.ones_like(i)], axis=-1
        )


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    Rn = U @ Vt
    if np.linalg.det(Rn) < 0:
        U[:, -1] *= -1
        Rn = U @ Vt
    return Rn


def _is_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    return bool(
        np.abs(R @ R.T - np.eye(3)).max() <= tol and abs(np.linalg.det(R) - 1.0) <= tol
    )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid world-to-camera transform ``x_cam = rotation @ x_world + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise GeometryError("pose entries must be finite")
        if not _is_rotation(R):
            R = _orthonormalize(R)
        R.setflags(write=False)
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation) -> "Pose":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, float)).as_matrix(), translation)

    @classmethod
    def look_at(cls, center, target, up=(0.0, -1.0, 0.0)) -> "Pose":
        """Camera at ``center`` looking at ``target`` (+z forward, +y down)."""
        center = np.asarray(center, float)
        z = np.asarray(target, float) - center
        z /= np.linalg.norm(z)
        x = np.cross(np.asarray(up, float), z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R, -R @ center)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform ``(..., 3)`` world points into the camera frame."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def __repr__(self):
        rv = Rotation.from_matrix(self.rotation).as_rotvec()
        return f"Pose(rotvec={np.round(rv, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: Pose) -> Pose:
    Rt = a.rotation.T
    return Pose(Rt, -Rt @ a.translation)


def hat(w) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def _so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * W
        + (theta - np.sin(theta)) / theta**3 * (W @ W)
    )


def se3_exp(xi) -> Pose:
    """Exponential of a twist ``(rotation 3-vector, translation 3-vector)``."""
    xi = np.asarray(xi, dtype=np.float64)
    w, v = xi[:3], xi[3:]
    if not np.any(xi):
        return Pose.identity()
    R = Rotation.from_rotvec(w).as_matrix()
    return Pose(R, _so3_left_jacobian(w) @ v)


def se3_log(T: Pose) -> np.ndarray:
    w = Rotation.from_matrix(T.rotation).as_rotvec()
    v = np.linalg.solve(_so3_left_jacobian(w), T.translation)
    return np.concatenate([w, v])


def perturb(pose: Pose, xi) -> Pose:
    """Left-multiplied perturbation ``exp(xi) ∘ pose``; a zero twist returns ``pose`` itself."""
    xi = np.asarray(xi, dtype=np.float64)
    if not np.any(xi):
        return pose
    return compose(se3_exp(xi), pose)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle (radians) of a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    sin = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    cos = (np.trace(R) - 1.0) / 2.0
    return float(np.arctan2(sin, cos))


class Projection(NamedTuple):
    pixel: np.ndarray  # (..., 2) real pixel coordinates (i, j)
    depth: np.ndarray  # (...,) camera-frame z
    in_front: np.ndarray  # (...,) bool; False marks behind-camera points


def unproject(pixel, depth, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point ``K^-1 [i d, j d, d]`` for pixel ``(i, j)`` at depth ``d``.

    Vectorized: ``pixel`` is ``(..., 2)`` and ``depth`` broadcasts against ``(...)``.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise GeometryError("unproject requires strictly positive depth")
    f = intrinsics.focal
    x = (pixel[..., 0] - intrinsics.cx) * depth / f
    y = (pixel[..., 1] - intrinsics.cy) * depth / f
    return np.stack(np.broadcast_arrays(x, y, depth), axis=-1)


def project(point, intrinsics: CameraIntrinsics) -> Projection:
    """Project camera-frame points; points with ``z <= 0`` are tagged, not raised.

    The pixel of a tagged point is NaN.
    """
    point = np.asarray(point, dtype=np.float64)
    z = point[..., 2]
    in_front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        zs = np.where(in_front, z, np.nan)
        u = intrinsics.focal * point[..., 0] / zs + intrinsics.cx
        v = intrinsics.focal * point[..., 1] / zs + intrinsics.cy
    return Projection(np.stack([u, v], axis=-1), z, in_front)


def depth_to_points(depth: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-frame pointmap ``(H, W, 3)`` of a depth map (no positivity check)."""
    return intrinsics.rays() * depth[..., None]


def upsample_bilinear(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of an ``(h, w)`` or ``(h, w, C)`` grid.

    Corner pixels map to corner pixels, so constant maps and functions that are
    bilinear in pixel coordinates are reproduced exactly. Lookups clamp at the
    border.
    """
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape[:2]
    ys = np.linspace(0.0, h - 1.0, height) if height > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, width) if width > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    if values.ndim == 3:
        wy = wy[:, None, None]
        wx = wx[None, :, None]
    else:
        wy = wy[:, None]
        wx = wx[None, :]
    top = values[y0][:, x0] * (1 - wx) + values[y0][:, x1] * wx
    bottom = values[y1][:, x0] * (1 - wx) + values[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def as_color_image(values) -> np.ndarray:
    """Validate an ``(H, W, 3)`` image and clamp it to ``[0, 1]``."""
    img = np.asarray(values, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise GeometryError(f"expected (H, W, 3) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise GeometryError("image contains non-finite samples")
    return np.clip(img, 0.0, 1.0)


def umeyama(src: np.ndarray, dst: np.ndarray, weights=None, with_scale: bool = True):
    """Weighted least-squares similarity ``dst ≈ s R src + t``.

    Returns ``(s, R, t)`` and raises ``GeometryError`` when the weighted
    cross-covariance is rank deficient (fewer than two independent directions).
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise GeometryError(f"point sets differ in shape: {src.shape} vs {dst.shape}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, float).ravel()
    wsum = w.sum()
    if not wsum > 0:
        raise GeometryError("weights sum to zero")
    w = w / wsum
    mu_s = w @ src
    mu_d = w @ dst
    xs = src - mu_s
    xd = dst - mu_d
    cov = (xd * w[:, None]).T @ xs
    var_s = float(w @ np.einsum("ij,ij->i", xs, xs))
    U, S, Vt = np.linalg.svd(cov)
    scale_ref = max(S[0], 1e-300)
    if S[1] <= 1e-12 * scale_ref or var_s <= 0:
        raise GeometryError("degenerate point configuration for similarity alignment")
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    s = float(np.trace(np.diag(S) @ D) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t
