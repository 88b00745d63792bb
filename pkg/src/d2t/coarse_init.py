"""Coarse construction: focal estimation and global alignment of pairwise pointmaps.

Every image pair ``e = (n, m)`` comes with two pointmaps expressed in view
``n``'s camera frame at an arbitrary per-pair scale. We estimate the shared
focal with a Weiszfeld iteration, then solve for per-edge similarities
``(sigma_e, T_e)``, per-view world-to-camera poses ``T_n`` and per-pixel depths
``D_n`` so that the world points

    chi_n(i, j) = T_n^-1 ( D_n(i, j) * K^-1 [i, j, 1] )

agree with every ``sigma_e T_e X_{v,e}`` in the confidence-weighted squared
sense. ``prod_e sigma_e = 1`` fixes the global scale and view 0 is pinned to
the identity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import (
    CameraIntrinsics,
    GeometryError,
    Pose,
    _is_rotation,
    _orthonormalize,
    umeyama,
)

log = logging.getLogger(__name__)


class CoarseInitError(ValueError):
    pass


class NoSignalError(CoarseInitError):
    """All confidences are zero."""


class DegenerateGeometryError(CoarseInitError):
    pass


class AlignmentDivergedError(CoarseInitError):
    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


@dataclass
class PairPrediction:
    """Pointmaps of views ``n`` and ``m``, both expressed in view ``n``'s frame."""

    edge: tuple[int, int]
    pointmap_n: np.ndarray
    pointmap_m: np.ndarray
    confidence_n: np.ndarray
    confidence_m: np.ndarray

    def __post_init__(self):
        self.edge = (int(self.edge[0]), int(self.edge[1]))
        self.pointmap_n = np.asarray(self.pointmap_n, dtype=np.float64)
        self.pointmap_m = np.asarray(self.pointmap_m, dtype=np.float64)
        self.confidence_n = np.asarray(self.confidence_n, dtype=np.float64)
        self.confidence_m = np.asarray(self.confidence_m, dtype=np.float64)
        H, W = self.confidence_n.shape
        for name, arr, shape in [
            ("pointmap_n", self.pointmap_n, (H, W, 3)),
            ("pointmap_m", self.pointmap_m, (H, W, 3)),
            ("confidence_m", self.confidence_m, (H, W)),
        ]:
            if arr.shape != shape:
                raise CoarseInitError(f"edge {self.edge}: {name} has shape {arr.shape}, expected {shape}")
        if not (np.all(np.isfinite(self.pointmap_n)) and np.all(np.isfinite(self.pointmap_m))):
            raise CoarseInitError(f"edge {self.edge}: pointmaps must be finite")
        if np.any(self.confidence_n < 0) or np.any(self.confidence_m < 0):
            raise CoarseInitError(f"edge {self.edge}: confidences must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.confidence_n.shape

    def views(self):
        """``(view, pointmap, confidence)`` for both members of the pair."""
        n, m = self.edge
        return [(n, self.pointmap_n, self.confidence_n), (m, self.pointmap_m, self.confidence_m)]


@dataclass
class ViewGraph:
    n_views: int
    edges: list[PairPrediction]

    def __post_init__(self):
        if self.n_views < 2:
            raise CoarseInitError("need at least two views")
        seen = set()
        for p in self.edges:
            n, m = p.edge
            if not (0 <= n < self.n_views and 0 <= m < self.n_views) or n == m:
                raise CoarseInitError(f"invalid edge {p.edge}")
            key = (min(n, m), max(n, m))
            if key in seen:
                raise CoarseInitError(f"duplicate edge {key}")
            seen.add(key)
        expected = self.n_views * (self.n_views - 1) // 2
        if len(seen) != expected:
            raise CoarseInitError(
                f"graph is not complete: {len(seen)} of {expected} unordered pairs present"
            )
        shapes = {p.shape for p in self.edges}
        if len(shapes) != 1:
            raise CoarseInitError(f"pair predictions disagree on resolution: {sorted(shapes)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.edges[0].shape


# --------------------------------------------------------------------------- focal


def estimate_focal(prediction: PairPrediction, intrinsics_shape=None, *,
                   max_iter: int = 50, rtol: float = 1e-6) -> float:
    """Robust (L1) focal estimate from the first pointmap of a pair.

    Minimizes ``sum C ||(i - W/2, j - H/2) - f (X/Z, Y/Z)||`` over ``f`` by
    iteratively reweighted least squares (Weiszfeld).
    """
    X = prediction.pointmap_n
    C = prediction.confidence_n
    H, W = C.shape
    if intrinsics_shape is not None:
        W, H = intrinsics_shape
        if (H, W) != C.shape:
            raise CoarseInitError(f"shape {intrinsics_shape} does not match pointmap {C.shape[::-1]}")
    if not np.any(C > 0):
        raise NoSignalError("all confidences are zero")

    jj, ii = np.mgrid[0:H, 0:W].astype(np.float64)
    z = X[..., 2]
    valid = (C > 0) & (z > 0)
    if np.count_nonzero(valid) < 10:
        raise DegenerateGeometryError("fewer than 10 confident pixels in front of the camera")
    c = C[valid]
    u = X[valid][:, :2] / z[valid][:, None]
    p = np.stack([ii[valid] - W / 2.0, jj[valid] - H / 2.0], axis=-1)

    pu = np.einsum("ij,ij->i", p, u)
    uu = np.einsum("ij,ij->i", u, u)
    denom = c @ uu
    if denom <= 1e-12 * c.sum():
        raise DegenerateGeometryError("all points lie on the optical axis; focal is unidentifiable")

    f = (c @ pu) / denom
    eps = 1e-12 * max(W, H)
    for _ in range(max_iter):
        r = np.linalg.norm(p - f * u, axis=1)
        w = c / np.maximum(r, eps)
        f_new = (w @ pu) / (w @ uu)
        done = abs(f_new - f) < rtol * abs(f)
        f = f_new
        if done:
            break
    if not f > 0:
        raise DegenerateGeometryError(f"estimated focal is non-positive ({f})")
    return float(f)


def average_focal(per_pair_focals) -> float:
    vals = [float(v) for v in per_pair_focals]
    if not vals:
        raise CoarseInitError("no focal estimates to average")
    return float(np.mean(vals))


def estimate_shared_focal(graph: ViewGraph) -> float:
    """Average of the per-pair focal estimates over all edges."""
    return average_focal(estimate_focal(p) for p in graph.edges)


# --------------------------------------------------------------------------- alignment


@dataclass
class AlignConfig:
    iterations: int = 300
    step: float = 0.5
    decay: float = 0.995
    backtracking: bool = True
    max_backtracks: int = 20
    divergence_factor: float = 10.0


def view_points(pose: Pose, depth: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """World points of one view from its pose and depth map."""
    cam = intrinsics.rays() * depth[..., None]
    return (cam - pose.translation) @ pose.rotation


@dataclass
class GlobalAlignmentState:
    intrinsics: CameraIntrinsics
    view_poses: list[Pose]
    depths: np.ndarray  # (N, H, W)
    edges: list[tuple[int, int]]
    edge_poses: list[Pose]
    edge_scales: np.ndarray
    trace: list[dict] = field(default_factory=list)

    @property
    def points(self) -> np.ndarray:
        """``(N, H, W, 3)`` world points, recomputed from poses and depths."""
        return np.stack(
            [view_points(T, D, self.intrinsics) for T, D in zip(self.view_poses, self.depths)]
        )

    def objective(self, graph: ViewGraph) -> float:
        pts = self.points.reshape(len(self.view_poses), -1, 3)
        idx = {e: k for k, e in enumerate(self.edges)}
        total = 0.0
        for pred in graph.edges:
            k = idx[pred.edge]
            s, T = self.edge_scales[k], self.edge_poses[k]
            for v, X, C in pred.views():
                r = pts[v] - s * T.apply(X.reshape(-1, 3))
                total += float(C.ravel() @ np.einsum("ij,ij->i", r, r))
        return total


def extract_depths(state: GlobalAlignmentState) -> list[np.ndarray]:
    return [d.copy() for d in state.depths]


class _Problem:
    """Flattened residual/gradient evaluation for the alignment objective."""

    def __init__(self, graph: ViewGraph, intrinsics: CameraIntrinsics):
        self.N = graph.n_views
        self.edges = [p.edge for p in graph.edges]
        self.rays = intrinsics.rays().reshape(-1, 3)
        self.X = []  # per edge: [(v, X (P,3), C (P,))] for both members
        for p in graph.edges:
            self.X.append([(v, X.reshape(-1, 3), C.ravel()) for v, X, C in p.views()])

    def points(self, Rv, tv, D):
        cam = D[..., None] * self.rays[None]
        return np.einsum("npk,nkj->npj", cam - tv[:, None, :], Rv)

    def value(self, p) -> float:
        Rv, tv, D, Re, te, s = p
        chi = self.points(Rv, tv, D)
        sig = np.exp(s)
        total = 0.0
        for k, members in enumerate(self.X):
            for v, X, C in members:
                r = chi[v] - sig[k] * (X @ Re[k].T + te[k])
                total += C @ np.einsum("ij,ij->i", r, r)
        return float(total)

    def gradient(self, p):
        """Objective, gradients and Gauss-Newton diagonal for every block."""
        Rv, tv, D, Re, te, s = p
        N = self.N
        chi = self.points(Rv, tv, D)
        sig = np.exp(s)
        g_chi = np.zeros_like(chi)
        w_chi = np.zeros(chi.shape[:2])
        g_Re = np.zeros((len(self.X), 3))
        g_te = np.zeros((len(self.X), 3))
        g_s = np.zeros(len(self.X))
        h_Re = np.zeros((len(self.X), 3))
        h_te = np.zeros(len(self.X))
        h_s = np.zeros(len(self.X))
        total = 0.0
        for k, members in enumerate(self.X):
            for v, X, C in members:
                a = X @ Re[k].T
                y = a + te[k]
                r = chi[v] - sig[k] * y
                total += C @ np.einsum("ij,ij->i", r, r)
                g = 2.0 * C[:, None] * r
                g_chi[v] += g
                w_chi[v] += 2.0 * C
                g_te[k] -= sig[k] * g.sum(axis=0)
                g_Re[k] += sig[k] * np.cross(g, a).sum(axis=0)
                g_s[k] -= sig[k] * np.einsum("ij,ij->i", g, y).sum()
                csum = 2.0 * C.sum()
                h_te[k] += sig[k] ** 2 * csum
                h_Re[k] += sig[k] ** 2 * (2.0 * C) @ (np.einsum("ij,ij->i", a, a)[:, None] - a**2)
                h_s[k] += sig[k] ** 2 * (2.0 * C) @ np.einsum("ij,ij->i", y, y)

        # chain through chi_v = R_v^T (D ray - t_v)
        gc = np.einsum("nkj,npj->npk", Rv, g_chi)  # R_v g
        q = D[..., None] * self.rays[None] - tv[:, None, :]
        g_D = np.einsum("npk,pk->np", gc, self.rays)
        g_tv = -gc.sum(axis=1)
        g_Rv = np.cross(gc, q).sum(axis=1)
        h_D = w_chi * np.einsum("pk,pk->p", self.rays, self.rays)[None]
        h_tv = np.repeat(w_chi.sum(axis=1)[:, None], 3, axis=1)
        qq = np.einsum("npk,npk->np", q, q)
        h_Rv = np.einsum("np,npk->nk", w_chi, qq[..., None] - q**2)
        grads = (g_Rv, g_tv, g_D, g_Re, g_te, g_s)
        diag = (h_Rv, h_tv, h_D, h_Re, h_te[:, None], h_s)
        return float(total), grads, diag


def _rotate(R: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = Rotation.from_rotvec(w).as_matrix() @ R
    for k in range(len(out)):
        if not _is_rotation(out[k]):
            out[k] = _orthonormalize(out[k])
    return out


def _retract(p, step):
    Rv, tv, D, Re, te, s = p
    dRv, dtv, dD, dRe, dte, ds = step
    ds = ds - ds.mean()
    s_new = s + ds
    s_new = s_new - s_new.mean()
    return (_rotate(Rv, dRv), tv + dtv, D + dD, _rotate(Re, dRe), te + dte, s_new)


def _max_spanning_tree(n_views: int, scores: dict) -> list[tuple]:
    """Prim's algorithm on edge scores; returns edges in insertion order."""
    best = max(scores, key=lambda e: (scores[e], -e[0], -e[1]))
    placed = {best[0], best[1]}
    order = [best]
    while len(placed) < n_views:
        cands = [e for e in scores if (e[0] in placed) != (e[1] in placed)]
        e = max(cands, key=lambda e: (scores[e], -e[0], -e[1]))
        order.append(e)
        placed.update(e)
    return order


def _pnp_dlt(world: np.ndarray, rays: np.ndarray, weights: np.ndarray) -> Pose:
    """Linear pose from world points and their camera rays (normalized DLT)."""
    sel = weights > 0
    Xw, r = world[sel], rays[sel]
    mu = Xw.mean(axis=0)
    scale = np.sqrt(((Xw - mu) ** 2).sum(axis=1).mean()) or 1.0
    Xn = (Xw - mu) / scale
    Xh = np.hstack([Xn, np.ones((len(Xn), 1))])
    zeros = np.zeros_like(Xh)
    a = r[:, 0:1] / r[:, 2:3]
    b = r[:, 1:2] / r[:, 2:3]
    A = np.vstack([np.hstack([Xh, zeros, -a * Xh]), np.hstack([zeros, Xh, -b * Xh])])
    _, _, Vt = np.linalg.svd(A, full_matrices=False)
    P = Vt[-1].reshape(3, 4)
    U, S, Vr = np.linalg.svd(P[:, :3])
    lam = S.mean()
    if np.linalg.det(U @ Vr) < 0:
        lam = -lam
    R = np.sign(lam) * U @ Vr
    t = P[:, 3] / lam
    # undo the normalization: x_cam = R (Xw - mu)/scale + t  ->  scale the whole camera
    t_world = scale * t - R @ mu
    if np.median((Xw @ R.T + t_world)[:, 2]) < 0:
        raise DegenerateGeometryError("PnP placed the points behind the camera")
    return _orthogonal_iteration(Pose(R, t_world), Xw, r, weights[sel])


def _orthogonal_iteration(pose: Pose, world: np.ndarray, rays: np.ndarray, weights: np.ndarray,
                          iterations: int = 30) -> Pose:
    """Refine a pose by alternating ray projection and rigid Procrustes."""
    v = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    for _ in range(iterations):
        cam = pose.apply(world)
        proj = v * np.einsum("ij,ij->i", cam, v)[:, None]
        _, R, t = umeyama(world, proj, weights, with_scale=False)
        new = Pose(R, t)
        moved = np.abs(new.matrix() - pose.matrix()).max()
        pose = new
        if moved < 1e-13:
            break
    return pose


def _initialize(graph: ViewGraph, problem: _Problem):
    N = graph.n_views
    preds = {p.edge: p for p in graph.edges}
    scores = {e: float(p.confidence_n.mean() * p.confidence_m.mean()) for e, p in preds.items()}
    tree = _max_spanning_tree(N, scores)

    edge_sim = {}
    world = {}
    root = preds[tree[0]]
    edge_sim[tree[0]] = (1.0, np.eye(3), np.zeros(3))
    for v, X, _ in root.views():
        world[v] = X.reshape(-1, 3)
    for e in tree[1:]:
        pred = preds[e]
        (v0, X0, C0), (v1, X1, C1) = pred.views()
        if v0 in world:
            anchor, src, w, other, Xo = v0, X0, C0, v1, X1
        else:
            anchor, src, w, other, Xo = v1, X1, C1, v0, X0
        s, R, t = umeyama(src.reshape(-1, 3), world[anchor], w.ravel())
        edge_sim[e] = (s, R, t / s)
        world[other] = s * (Xo.reshape(-1, 3) @ R.T) + t
    for e, pred in preds.items():
        if e in edge_sim:
            continue
        (v0, X0, C0), (v1, X1, C1) = pred.views()
        src = np.vstack([X0.reshape(-1, 3), X1.reshape(-1, 3)])
        dst = np.vstack([world[v0], world[v1]])
        s, R, t = umeyama(src, dst, np.concatenate([C0.ravel(), C1.ravel()]))
        edge_sim[e] = (s, R, t / s)

    rays = problem.rays
    Rv = np.zeros((N, 3, 3))
    tv = np.zeros((N, 3))
    D = np.zeros((N, rays.shape[0]))
    for v in range(N):
        covering = [(float(C.mean()), e, X, C, v == e[0])
                    for e, p in preds.items() for u, X, C in p.views() if u == v]
        _, e, X, C, own = max(covering, key=lambda c: (c[0], c[4], -c[1][0], -c[1][1]))
        s, R, t = edge_sim[e]
        if own:
            pose = Pose(R.T, -s * R.T @ t)
        else:
            pose = _pnp_dlt(s * (X.reshape(-1, 3) @ R.T + t), rays, C.ravel())
        pts = s * (X.reshape(-1, 3) @ R.T + t)
        z = pose.apply(pts)[:, 2]
        good = z > 0
        if not np.any(good):
            raise DegenerateGeometryError(f"view {v}: no points in front of the camera")
        D[v] = np.where(good, z, np.median(z[good]))
        Rv[v], tv[v] = pose.rotation, pose.translation

    Re = np.stack([edge_sim[e][1] for e in problem.edges])
    te = np.stack([edge_sim[e][2] for e in problem.edges])
    sig = np.array([edge_sim[e][0] for e in problem.edges])

    # gauge: view 0 at the identity, prod(sigma) = 1
    R0, t0 = Rv[0].copy(), tv[0].copy()
    c = float(np.exp(-np.log(sig).mean()))
    te = np.einsum("ij,ej->ei", R0, te) + t0[None] / sig[:, None]
    Re = np.einsum("ij,ejk->eik", R0, Re)
    sig = c * sig
    tv = c * (tv - np.einsum("nij,jk,k->ni", Rv, R0.T, t0))
    Rv = np.einsum("nij,kj->nik", Rv, R0)
    D = c * D
    Rv[0], tv[0] = np.eye(3), np.zeros(3)
    s = np.log(sig)
    s -= s.mean()
    return (Rv, tv, D, Re, te, s)


def _check_pair_support(graph: ViewGraph):
    for p in graph.edges:
        for v, _, C in p.views():
            thr = np.percentile(C, 10)
            if np.count_nonzero(C > thr) < 100 and np.count_nonzero(C > 0) < 100:
                raise CoarseInitError(
                    f"edge {p.edge}, view {v}: fewer than 100 pixels above the 10th confidence percentile"
                )


def align_global(graph: ViewGraph, intrinsics: CameraIntrinsics,
                 config: AlignConfig | None = None) -> GlobalAlignmentState:
    """Confidence-weighted global alignment by preconditioned gradient descent.

    Steps are scaled by the Gauss-Newton diagonal of each parameter block and
    accepted only when the objective does not increase (backtracking halves
    the step). The per-edge log-scales are kept at zero mean, so the product
    of the scales stays exactly one.
    """
    config = config or AlignConfig()
    if intrinsics.shape != graph.shape:
        raise CoarseInitError(f"intrinsics {intrinsics.shape} do not match pointmaps {graph.shape}")
    _check_pair_support(graph)
    problem = _Problem(graph, intrinsics)
    try:
        params = _initialize(graph, problem)
    except GeometryError as exc:
        raise DegenerateGeometryError(f"initialization failed: {exc}") from exc

    f0 = problem.value(params)
    trace = [{"iteration": 0, "objective": f0, "step": 0.0,
              "sigma_product": float(np.exp(params[5]).prod())}]
    f = f0
    for it in range(1, config.iterations + 1):
        f, grads, diag = problem.gradient(params)
        damp = 1e-12 * max(1.0, max(float(d.max()) for d in diag))
        direction = [-g / (h + damp) for g, h in zip(grads, diag)]
        direction[0][0] = 0.0  # view 0 rotation fixed
        direction[1][0] = 0.0  # view 0 translation fixed
        alpha = config.step * config.decay ** (it - 1)
        accepted = False
        for _ in range(config.max_backtracks if config.backtracking else 1):
            cand = _retract(params, [alpha * d for d in direction])
            f_new = problem.value(cand)
            if not config.backtracking or f_new <= f:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # no decrease at any step length: stationary up to rounding
            break
        params, f = cand, f_new
        trace.append({"iteration": it, "objective": f, "step": alpha,
                      "sigma_product": float(np.exp(params[5]).prod())})
        if not np.isfinite(f) or f > config.divergence_factor * max(f0, 1e-300):
            raise AlignmentDivergedError(
                f"alignment diverged at iteration {it} (objective {f:.3e}, initial {f0:.3e})", trace
            )
    log.debug("global alignment: objective %.3e -> %.3e", f0, f)

    Rv, tv, D, Re, te, s = params
    H, W = intrinsics.shape
    return GlobalAlignmentState(
        intrinsics=intrinsics,
        view_poses=[Pose(Rv[n], tv[n]) for n in range(graph.n_views)],
        depths=D.reshape(graph.n_views, H, W),
        edges=list(problem.edges),
        edge_poses=[Pose(Re[k], te[k]) for k in range(len(problem.edges))],
        edge_scales=np.exp(s),
        trace=trace,
    )
