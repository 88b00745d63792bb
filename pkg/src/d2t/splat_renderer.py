"""CPU Gaussian splatting with hand-written reverse-mode gradients.

Each Gaussian is projected with the usual first-order (EWA) covariance
``J W Sigma W^T J^T`` plus a small screen-space dilation, globally sorted front
to back by camera depth, and alpha-composited per pixel. The footprint is cut
off at three standard deviations with a C1 taper, so the rendered image stays
continuously differentiable in every parameter.

Gradients are returned for all Gaussian fields and for a left-multiplied
se(3) perturbation ``exp(xi) * pose`` of the world-to-camera pose, with
``xi = (rotation, translation)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraIntrinsics, Pose

CUTOFF = 9.0  # squared Mahalanobis radius (3 sigma)
_E9 = np.exp(-0.5 * CUTOFF)
_NORM = 1.0 - _E9 * (1.0 + 0.5 * CUTOFF)
ALPHA_EPS = 1e-4


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _logit(p):
    return np.log(p) - np.log1p(-p)


def footprint(s: np.ndarray) -> np.ndarray:
    """Gaussian falloff ``exp(-s/2)`` tapered to reach zero with zero slope at ``s = 9``."""
    return np.where(s < CUTOFF, (np.exp(-0.5 * s) - _E9 * (1.0 + 0.5 * (CUTOFF - s))) / _NORM, 0.0)


def footprint_grad(s: np.ndarray) -> np.ndarray:
    return np.where(s < CUTOFF, 0.5 * (_E9 - np.exp(-0.5 * s)) / _NORM, 0.0)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from ``(N, 4)`` quaternions ``(w, x, y, z)`` (normalized here)."""
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1).reshape(q.shape[:-1] + (3, 3))


def _rotmat_grad_to_quat(q: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``quat_to_rotmat(q)`` back to the raw quaternion."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = G.reshape(-1, 9)
    # d R_flat / d(w, x, y, z), row-major entries of R
    dw = 2 * np.stack([0 * w, -z, y, z, 0 * w, -x, -y, x, 0 * w], axis=-1)
    dx = 2 * np.stack([0 * w, y, z, y, -2 * x, -w, z, w, -2 * x], axis=-1)
    dy = 2 * np.stack([-2 * y, x, w, x, 0 * w, z, -w, z, -2 * y], axis=-1)
    dz = 2 * np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, 0 * w], axis=-1)
    gq = np.stack([(g * d).sum(axis=-1) for d in (dw, dx, dy, dz)], axis=-1)
    return (gq - qn * (gq * qn).sum(axis=-1, keepdims=True)) / norm


@dataclass
class GaussianCloud:
    positions: np.ndarray
    log_scales: np.ndarray
    quaternions: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    FIELDS = ("positions", "log_scales", "quaternions", "opacity_logits", "colors")

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.quaternions = np.asarray(self.quaternions, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.normalize()

    def __len__(self):
        return len(self.positions)

    @property
    def opacities(self) -> np.ndarray:
        return _sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def normalize(self):
        """Unit quaternions and colors clamped to [0, 1]."""
        if len(self):
            self.quaternions /= np.linalg.norm(self.quaternions, axis=1, keepdims=True)
            np.clip(self.colors, 0.0, 1.0, out=self.colors)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f).copy() for f in self.FIELDS))

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))


@dataclass
class InitConfig:
    max_points: int | None = None
    neighbors: int = 3
    initial_opacity: float = 0.1
    fallback_scale: float = 0.01
    seed: int = 0


def init_from_points(points: np.ndarray, colors: np.ndarray,
                     config: InitConfig | None = None) -> GaussianCloud:
    """One isotropic Gaussian per (optionally subsampled) point.

    The scale is the mean distance to the ``k`` nearest neighbours, with ``k``
    truncated to the number of other points available.
    """
    config = config or InitConfig()
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("cannot initialize a Gaussian cloud from zero points")
    if len(colors) != len(points):
        raise ValueError(f"{len(points)} points but {len(colors)} colors")
    if config.max_points is not None and len(points) > config.max_points:
        rng = np.random.default_rng(config.seed)
        keep = np.sort(rng.choice(len(points), config.max_points, replace=False))
        points, colors = points[keep], colors[keep]
    n = len(points)
    k = min(config.neighbors, n - 1)
    if k == 0:
        scale = np.full(n, config.fallback_scale)
    else:
        dist, _ = cKDTree(points).query(points, k=k + 1)
        scale = np.maximum(np.asarray(dist).reshape(n, -1)[:, 1:].mean(axis=1), 1e-7)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianCloud(
        positions=points.copy(),
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        quaternions=quats,
        opacity_logits=np.full(n, _logit(config.initial_opacity)),
        colors=np.clip(colors, 0.0, 1.0),
    )


@dataclass
class RenderConfig:
    near: float = 0.01
    dilation: float = 0.3  # screen-space low-pass added to the 2D covariance (pixels^2)
    normalize_depth: bool = True  # expected depth: composite divided by accumulated alpha


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray  # NaN where alpha <= 1e-4
    alpha: np.ndarray
    raw_depth: np.ndarray  # composited depth without the sentinel
    n_pairs: int = 0


@dataclass
class RenderGradients:
    positions: np.ndarray
    log_scales: np.ndarray
    quaternions: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    pose: np.ndarray  # (6,) rotation then translation

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in GaussianCloud.FIELDS}


@dataclass
class _Context:
    vis: np.ndarray  # indices of projected Gaussians
    p_cam: np.ndarray
    Rq: np.ndarray
    S: np.ndarray
    M: np.ndarray
    Sigma3: np.ndarray
    A: np.ndarray
    J: np.ndarray
    conic: np.ndarray
    gidx: np.ndarray  # per pair: index into vis
    pix: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    s: np.ndarray
    opac: np.ndarray
    alpha: np.ndarray
    T: np.ndarray
    seg_start: np.ndarray
    seg_id: np.ndarray
    T_final: np.ndarray  # per pixel
    raw_depth: np.ndarray
    acc_alpha: np.ndarray


def _segmented_exclusive_cumsum(x, seg_id, seg_start):
    cs = np.cumsum(x)
    excl = cs - x
    return excl - excl[seg_start][seg_id]


def _rasterize(cloud: GaussianCloud, pose: Pose, K: CameraIntrinsics, cfg: RenderConfig):
    H, W = K.shape
    n_pix = H * W
    Rw, tw = pose.rotation, pose.translation
    f = K.focal

    p_cam = cloud.positions @ Rw.T + tw
    vis = np.flatnonzero(p_cam[:, 2] > cfg.near)
    p = p_cam[vis]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]

    Rq = quat_to_rotmat(cloud.quaternions[vis])
    S = np.exp(cloud.log_scales[vis])
    M = Rq * S[:, None, :]
    Sigma3 = M @ M.transpose(0, 2, 1)
    A = Rw @ Sigma3 @ Rw.T
    J = np.zeros((len(vis), 2, 3))
    J[:, 0, 0] = f / z
    J[:, 0, 2] = -f * x / z**2
    J[:, 1, 1] = f / z
    J[:, 1, 2] = -f * y / z**2
    cov2 = J @ A @ J.transpose(0, 2, 1)
    cov2[:, 0, 0] += cfg.dilation
    cov2[:, 1, 1] += cfg.dilation
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    conic = np.stack([cov2[:, 1, 1] / det, -cov2[:, 0, 1] / det, cov2[:, 0, 0] / det], axis=-1)
    u = f * x / z + K.cx
    v = f * y / z + K.cy

    rx = 3.0 * np.sqrt(cov2[:, 0, 0])
    ry = 3.0 * np.sqrt(cov2[:, 1, 1])
    x0 = np.maximum(np.ceil(u - rx), 0).astype(np.int64)
    x1 = np.minimum(np.floor(u + rx), W - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(v - ry), 0).astype(np.int64)
    y1 = np.minimum(np.floor(v + ry), H - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny

    total = int(counts.sum())
    gidx = np.repeat(np.arange(len(vis)), counts)
    offs = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - offs
    nxg = nx[gidx]
    px = x0[gidx] + local % np.maximum(nxg, 1)
    py = y0[gidx] + local // np.maximum(nxg, 1)
    dx = px - u[gidx]
    dy = py - v[gidx]
    a, b, c = conic[gidx, 0], conic[gidx, 1], conic[gidx, 2]
    s = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    keep = s < CUTOFF
    gidx, dx, dy, s = gidx[keep], dx[keep], dy[keep], s[keep]
    pix = (py[keep] * W + px[keep]).astype(np.int64)

    # front-to-back by camera z, index order on ties
    rank = np.empty(len(vis), dtype=np.int64)
    rank[np.lexsort((vis, z))] = np.arange(len(vis))
    order = np.argsort(pix * max(len(vis), 1) + rank[gidx], kind="stable")
    gidx, pix, dx, dy, s = gidx[order], pix[order], dx[order], dy[order], s[order]

    opac = _sigmoid(cloud.opacity_logits[vis])
    alpha = opac[gidx] * footprint(s)
    log1m = np.log1p(-alpha)
    if len(pix):
        new_seg = np.ones(len(pix), dtype=bool)
        new_seg[1:] = pix[1:] != pix[:-1]
        seg_start = np.flatnonzero(new_seg)
        seg_id = np.cumsum(new_seg) - 1
    else:
        seg_start = np.zeros(0, dtype=np.int64)
        seg_id = np.zeros(0, dtype=np.int64)
    T = np.exp(_segmented_exclusive_cumsum(log1m, seg_id, seg_start))
    weight = alpha * T

    colors = cloud.colors[vis]
    color = np.stack(
        [np.bincount(pix, weights=weight * colors[gidx, ch], minlength=n_pix) for ch in range(3)],
        axis=-1,
    )
    raw_depth = np.bincount(pix, weights=weight * z[gidx], minlength=n_pix)
    T_final = np.exp(np.bincount(pix, weights=log1m, minlength=n_pix))
    acc_alpha = 1.0 - T_final

    ctx = _Context(vis, p, Rq, S, M, Sigma3, A, J, conic, gidx, pix, dx, dy, s, opac, alpha, T,
                   seg_start, seg_id, T_final, raw_depth, acc_alpha)
    return color.reshape(H, W, 3), raw_depth, acc_alpha, ctx


def _finish(color, raw_depth, acc_alpha, K: CameraIntrinsics, cfg: RenderConfig, n_pairs: int):
    H, W = K.shape
    with np.errstate(divide="ignore", invalid="ignore"):
        d = raw_depth / acc_alpha if cfg.normalize_depth else raw_depth.copy()
    d = np.where(acc_alpha > ALPHA_EPS, d, np.nan)
    return RenderOutput(color=color, depth=d.reshape(H, W), alpha=acc_alpha.reshape(H, W),
                        raw_depth=raw_depth.reshape(H, W), n_pairs=n_pairs)


def render(cloud: GaussianCloud, pose: Pose, intrinsics: CameraIntrinsics,
           config: RenderConfig | None = None) -> RenderOutput:
    cfg = config or RenderConfig()
    color, raw_depth, acc, ctx = _rasterize(cloud, pose, intrinsics, cfg)
    return _finish(color, raw_depth, acc, intrinsics, cfg, len(ctx.pix))


def render_differentiable(cloud: GaussianCloud, pose: Pose, intrinsics: CameraIntrinsics,
                          config: RenderConfig | None = None):
    """Render once and return ``(output, backward)``.

    ``backward(grad_color=None, grad_depth=None, grad_alpha=None)`` maps
    per-pixel adjoints of ``output.color``, ``output.depth`` and ``output.alpha``
    to a :class:`RenderGradients`. Depth adjoints on sentinel pixels
    (alpha <= 1e-4) are ignored.
    """
    cfg = config or RenderConfig()
    color, raw_depth, acc, ctx = _rasterize(cloud, pose, intrinsics, cfg)
    out = _finish(color, raw_depth, acc, intrinsics, cfg, len(ctx.pix))

    def backward(grad_color=None, grad_depth=None, grad_alpha=None) -> RenderGradients:
        return _backward(cloud, pose, intrinsics, cfg, ctx, grad_color, grad_depth, grad_alpha)

    return out, backward


def render_with_gradients(cloud: GaussianCloud, pose: Pose, intrinsics: CameraIntrinsics,
                          grad_color: np.ndarray | None = None, grad_depth: np.ndarray | None = None,
                          grad_alpha: np.ndarray | None = None,
                          config: RenderConfig | None = None) -> tuple[RenderOutput, RenderGradients]:
    """Render and backpropagate fixed per-pixel adjoints of color, depth and alpha."""
    out, backward = render_differentiable(cloud, pose, intrinsics, config)
    return out, backward(grad_color, grad_depth, grad_alpha)


def _backward(cloud, pose, intrinsics, cfg, ctx, grad_color, grad_depth, grad_alpha) -> RenderGradients:
    H, W = intrinsics.shape
    n_pix = H * W
    raw_depth, acc = ctx.raw_depth, ctx.acc_alpha
    gC = np.zeros((n_pix, 3)) if grad_color is None else np.asarray(grad_color, float).reshape(n_pix, 3)
    gD = np.zeros(n_pix) if grad_depth is None else np.asarray(grad_depth, float).reshape(n_pix).copy()
    gA = np.zeros(n_pix) if grad_alpha is None else np.asarray(grad_alpha, float).reshape(n_pix).copy()
    live = acc > ALPHA_EPS
    gD = np.where(live, np.nan_to_num(gD), 0.0)
    if cfg.normalize_depth:
        safe = np.where(live, acc, 1.0)
        gA = gA - gD * raw_depth / safe**2
        gD = gD / safe

    N = len(cloud)
    nv = len(ctx.vis)
    gidx, pix = ctx.gidx, ctx.pix
    colors = cloud.colors[ctx.vis]
    z = ctx.p_cam[:, 2]
    weight = ctx.alpha * ctx.T

    # compositing
    wk = np.einsum("ij,ij->i", gC[pix], colors[gidx]) + gD[pix] * z[gidx]
    g_col = np.stack([np.bincount(gidx, weights=weight * gC[pix, ch], minlength=nv) for ch in range(3)], -1)
    g_z = np.bincount(gidx, weights=weight * gD[pix], minlength=nv)
    contrib = wk * weight
    after = np.bincount(pix, weights=contrib, minlength=n_pix)[pix] - (
        _segmented_exclusive_cumsum(contrib, ctx.seg_id, ctx.seg_start) + contrib)
    inv1m = 1.0 / (1.0 - ctx.alpha)
    g_alpha = ctx.T * wk - after * inv1m + gA[pix] * ctx.T_final[pix] * inv1m

    # alpha = opacity * footprint(s)
    fp = footprint(ctx.s)
    g_logit = np.bincount(gidx, weights=g_alpha * fp, minlength=nv) * ctx.opac * (1.0 - ctx.opac)
    g_s = g_alpha * ctx.opac[gidx] * footprint_grad(ctx.s)
    a, b, c = ctx.conic[gidx, 0], ctx.conic[gidx, 1], ctx.conic[gidx, 2]
    dx, dy = ctx.dx, ctx.dy
    g_u = -np.bincount(gidx, weights=g_s * 2.0 * (a * dx + b * dy), minlength=nv)
    g_v = -np.bincount(gidx, weights=g_s * 2.0 * (b * dx + c * dy), minlength=nv)
    g_ca = np.bincount(gidx, weights=g_s * dx * dx, minlength=nv)
    g_cb = np.bincount(gidx, weights=g_s * 2.0 * dx * dy, minlength=nv)
    g_cc = np.bincount(gidx, weights=g_s * dy * dy, minlength=nv)

    # conic = inverse of the 2D covariance
    Q = np.empty((nv, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = ctx.conic[:, 0], ctx.conic[:, 1], ctx.conic[:, 1], ctx.conic[:, 2]
    GQ = np.empty((nv, 2, 2))
    GQ[:, 0, 0], GQ[:, 0, 1], GQ[:, 1, 0], GQ[:, 1, 1] = g_ca, 0.5 * g_cb, 0.5 * g_cb, g_cc
    G2 = -Q @ GQ @ Q

    # cov2 = J A J^T
    J, A = ctx.J, ctx.A
    GA = J.transpose(0, 2, 1) @ G2 @ J
    GJ = 2.0 * G2 @ J @ A
    Rw = pose.rotation
    GSigma3 = Rw.T @ GA @ Rw
    GRw = 2.0 * np.einsum("nij,jk,nkl->il", GA, Rw, ctx.Sigma3)
    GM = 2.0 * GSigma3 @ ctx.M
    GRq = GM * ctx.S[:, None, :]
    g_S = np.einsum("nik,nik->nk", ctx.Rq, GM)
    g_ls = g_S * ctx.S
    g_q = _rotmat_grad_to_quat(cloud.quaternions[ctx.vis], GRq)

    # projection Jacobian and mean
    f = intrinsics.focal
    x, y = ctx.p_cam[:, 0], ctx.p_cam[:, 1]
    gp = np.zeros((nv, 3))
    gp[:, 0] = GJ[:, 0, 2] * (-f / z**2) + g_u * f / z
    gp[:, 1] = GJ[:, 1, 2] * (-f / z**2) + g_v * f / z
    gp[:, 2] = (
        (GJ[:, 0, 0] + GJ[:, 1, 1]) * (-f / z**2)
        + GJ[:, 0, 2] * (2.0 * f * x / z**3)
        + GJ[:, 1, 2] * (2.0 * f * y / z**3)
        - g_u * f * x / z**2
        - g_v * f * y / z**2
        + g_z
    )
    mu = cloud.positions[ctx.vis]
    g_mu = gp @ Rw
    GRw = GRw + gp.T @ mu
    g_t = gp.sum(axis=0)
    Apose = GRw @ Rw.T
    g_w = np.array([Apose[2, 1] - Apose[1, 2], Apose[0, 2] - Apose[2, 0], Apose[1, 0] - Apose[0, 1]])
    g_w = g_w + np.cross(pose.translation, g_t)

    def scatter(vals, shape):
        full = np.zeros((N,) + shape)
        full[ctx.vis] = vals
        return full

    grads = RenderGradients(
        positions=scatter(g_mu, (3,)),
        log_scales=scatter(g_ls, (3,)),
        quaternions=scatter(g_q, (4,)),
        opacity_logits=scatter(g_logit, ()),
        colors=scatter(g_col, (3,)),
        pose=np.concatenate([g_w, g_t]),
    )
    return grads
