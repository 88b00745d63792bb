"""Analytic desk-scale scenes standing in for the pretrained-model outputs.

Images and depths are ray-cast from closed-form geometry, so every derived
quantity (pointmaps, mono depth, poses) has an exact ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from ..coarse_init import PairPrediction, ViewGraph
from ..geometry import CameraIntrinsics, Pose

SCENE_KINDS = ("plane", "box", "spheres")


@dataclass
class SyntheticSceneSpec:
    kind: str = "box"
    n_views: int = 3
    n_test_views: int = 2
    width: int = 64
    height: int = 48
    focal: float = 56.0
    arc_degrees: float = 30.0
    arc_radius: float = 1.2
    pair_scales: tuple = ()  # per-edge pointmap scales; empty -> random in [0.5, 2]
    pointmap_noise: float = 0.0  # relative depth noise on pair predictions
    corrupt_fraction: float = 0.0  # fraction of low-confidence pixels replaced by garbage
    mono_affine: tuple = (2.0, 0.3)  # (a, b) with 1/D = b + a * mono
    n_spheres: int = 6

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}; expected one of {SCENE_KINDS}")
        if self.n_views < 2:
            raise ValueError("need at least two training views")
        self.pair_scales = tuple(float(s) for s in self.pair_scales)
        self.mono_affine = tuple(float(v) for v in self.mono_affine)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pair_scales"] = list(self.pair_scales)
        d["mono_affine"] = list(self.mono_affine)
        return d


# --------------------------------------------------------------------------- geometry

ROOM = np.array([1.6, 1.0, 2.0])  # half extents of the box room


def _texture(u: np.ndarray, v: np.ndarray, base: np.ndarray) -> np.ndarray:
    """Smooth periodic color pattern in surface coordinates (u, v)."""
    r = 0.5 + 0.22 * np.sin(2.6 * u + 0.3) * np.cos(2.1 * v)
    g = 0.5 + 0.22 * np.sin(1.7 * v - 0.8 * u + 1.1)
    b = 0.5 + 0.22 * np.cos(2.3 * u + 1.4 * v)
    col = np.stack([r, g, b], axis=-1)
    return np.clip(0.55 * col + 0.45 * base, 0.0, 1.0)


_WALL_COLORS = np.array([
    [0.9, 0.3, 0.2], [0.2, 0.6, 0.9], [0.3, 0.85, 0.35],
    [0.85, 0.8, 0.25], [0.7, 0.35, 0.8], [0.25, 0.8, 0.8],
])


@dataclass
class AnalyticScene:
    kind: str
    spheres: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    sphere_colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    @property
    def diameter(self) -> float:
        return float(2.0 * np.linalg.norm(ROOM)) if self.kind != "plane" else 4.0

    def cast(self, origins: np.ndarray, dirs: np.ndarray):
        """Return ``(t, color)`` of the first hit along each ray (t = inf on miss)."""
        n = len(dirs)
        t_best = np.full(n, np.inf)
        color = np.zeros((n, 3))
        if self.kind == "plane":
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (2.0 - origins[:, 2]) / dirs[:, 2]
            hit = np.isfinite(t) & (t > 0)
            t_best = np.where(hit, t, np.inf)
            p = origins + dirs * np.where(hit, t, 0.0)[:, None]
            color = _texture(p[:, 0] * 2.0, p[:, 1] * 2.0, np.array([0.6, 0.5, 0.4]))
            return t_best, color

        for axis in range(3):
            for side, sgn in enumerate((-1.0, 1.0)):
                with np.errstate(divide="ignore", invalid="ignore"):
                    t = (sgn * ROOM[axis] - origins[:, axis]) / dirs[:, axis]
                ok = np.isfinite(t) & (t > 1e-9) & (t < t_best)
                if not np.any(ok):
                    continue
                p = origins[ok] + dirs[ok] * t[ok, None]
                a, b = [k for k in range(3) if k != axis]
                t_best[ok] = t[ok]
                color[ok] = _texture(p[:, a] * 1.5, p[:, b] * 1.5, _WALL_COLORS[2 * axis + side])
        for (cx, cy, cz, rad), base in zip(self.spheres, self.sphere_colors):
            oc = origins - np.array([cx, cy, cz])
            bq = np.einsum("ij,ij->i", oc, dirs)
            aq = np.einsum("ij,ij->i", dirs, dirs)
            cq = np.einsum("ij,ij->i", oc, oc) - rad**2
            disc = bq**2 - aq * cq
            ok = disc > 0
            t = np.full(n, np.inf)
            t[ok] = (-bq[ok] - np.sqrt(disc[ok])) / aq[ok]
            ok &= (t > 1e-9) & (t < t_best)
            if not np.any(ok):
                continue
            p = origins[ok] + dirs[ok] * t[ok, None]
            nrm = (p - np.array([cx, cy, cz])) / rad
            t_best[ok] = t[ok]
            color[ok] = _texture(nrm[:, 0] * 3.0, nrm[:, 1] * 3.0 + nrm[:, 2], base)
        return t_best, color

    def render(self, pose: Pose, intrinsics: CameraIntrinsics):
        """Ground-truth ``(image, depth)`` with depth measured along camera z."""
        rays = intrinsics.rays().reshape(-1, 3)
        dirs = rays @ pose.rotation  # camera rays rotated into world, z-component 1 in camera
        origins = np.broadcast_to(pose.center, dirs.shape)
        t, color = self.cast(np.ascontiguousarray(origins), dirs)
        H, W = intrinsics.shape
        # rays have unit camera-z, so the ray parameter equals camera depth
        return color.reshape(H, W, 3), t.reshape(H, W)


def make_scene(kind: str, rng: np.random.Generator, n_spheres: int = 6) -> AnalyticScene:
    if kind != "spheres":
        return AnalyticScene(kind)
    centers = rng.uniform([-1.0, -0.6, 0.6], [1.0, 0.6, 1.6], size=(n_spheres, 3))
    radii = rng.uniform(0.12, 0.3, size=(n_spheres, 1))
    colors = rng.uniform(0.15, 0.95, size=(n_spheres, 3))
    return AnalyticScene(kind, np.hstack([centers, radii]), colors)


def camera_arc(n: int, spec: SyntheticSceneSpec, offset: float = 0.0) -> list[Pose]:
    """Cameras on a horizontal arc looking at a point behind the room center."""
    target = np.array([0.0, 0.0, 1.2])
    half = np.radians(spec.arc_degrees) / 2.0
    if n == 1:
        angles = np.array([0.0]) + offset
    else:
        angles = np.linspace(-half, half, n) + offset
    poses = []
    for k, a in enumerate(angles):
        center = target + spec.arc_radius * np.array([np.sin(a), 0.0, -np.cos(a)])
        center[1] = 0.08 * np.sin(1.7 * k + 0.3)
        if spec.kind == "plane":
            center[2] -= 0.3
        poses.append(Pose.look_at(center, target))
    return poses


def _held_out_arc(spec: SyntheticSceneSpec) -> list[Pose]:
    step = np.radians(spec.arc_degrees) / (spec.n_views - 1)
    half = np.radians(spec.arc_degrees) / 2.0
    offsets = -half + step * (np.arange(spec.n_test_views) % (spec.n_views - 1) + 0.5)
    target = np.array([0.0, 0.0, 1.2])
    poses = []
    for k, a in enumerate(offsets):
        center = target + spec.arc_radius * np.array([np.sin(a), 0.0, -np.cos(a)])
        center[1] = 0.05 * np.cos(1.3 * k)
        if spec.kind == "plane":
            center[2] -= 0.3
        poses.append(Pose.look_at(center, target))
    return poses


@dataclass
class SyntheticScene:
    """Everything the oracle produces, kept in memory."""

    spec: SyntheticSceneSpec
    intrinsics: CameraIntrinsics
    images: list[np.ndarray]
    depths: list[np.ndarray]
    poses: list[Pose]
    test_images: list[np.ndarray]
    test_depths: list[np.ndarray]
    test_poses: list[Pose]
    pairs: list[PairPrediction]
    mono: list[np.ndarray]
    scene: AnalyticScene

    @property
    def graph(self) -> ViewGraph:
        return ViewGraph(len(self.images), self.pairs)


def pair_prediction(n: int, m: int, depths, poses, intrinsics: CameraIntrinsics, scale: float = 1.0,
                    confidences=None) -> PairPrediction:
    """Exact pointmaps of views ``n`` and ``m`` in camera ``n``'s frame, times ``scale``."""
    rays = intrinsics.rays()
    Xn = rays * depths[n][..., None]
    cam_m = rays * depths[m][..., None]
    world_m = (cam_m - poses[m].translation) @ poses[m].rotation
    Xm = poses[n].apply(world_m)
    if confidences is None:
        confidences = (np.ones(depths[n].shape), np.ones(depths[m].shape))
    return PairPrediction((n, m), scale * Xn, scale * Xm, confidences[0], confidences[1])


def _confidence(depth: np.ndarray) -> np.ndarray:
    # nearer surfaces are more confident; strictly positive everywhere
    return 1.0 + 2.0 * np.exp(-depth / np.median(depth))


def generate(spec: SyntheticSceneSpec, seed: int = 0) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    scene = make_scene(spec.kind, rng, spec.n_spheres)
    K = CameraIntrinsics(spec.focal, spec.width, spec.height)
    poses = camera_arc(spec.n_views, spec)
    # held-out views sit between consecutive training cameras
    test_poses = _held_out_arc(spec)

    images, depths = zip(*(scene.render(p, K) for p in poses))
    test = [scene.render(p, K) for p in test_poses]

    edges = [(n, m) for n in range(spec.n_views) for m in range(n + 1, spec.n_views)]
    scales = list(spec.pair_scales) or list(np.exp(rng.uniform(np.log(0.5), np.log(2.0), len(edges))))
    if len(scales) != len(edges):
        raise ValueError(f"pair_scales needs {len(edges)} entries, got {len(scales)}")
    pairs = []
    for (n, m), s in zip(edges, scales):
        conf = (_confidence(depths[n]), _confidence(depths[m]))
        pred = pair_prediction(n, m, depths, poses, K, s, conf)
        if spec.pointmap_noise > 0:
            for X in (pred.pointmap_n, pred.pointmap_m):
                X *= 1.0 + spec.pointmap_noise * rng.standard_normal(X.shape[:2])[..., None]
        if spec.corrupt_fraction > 0:
            for X, C in ((pred.pointmap_n, pred.confidence_n), (pred.pointmap_m, pred.confidence_m)):
                k = int(round(spec.corrupt_fraction * C.size))
                worst = np.argsort(C.ravel(), kind="stable")[:k]
                flat = X.reshape(-1, 3)
                flat[worst] *= rng.uniform(0.2, 3.0, size=(k, 1))
                C.ravel()[worst] *= 0.05
        pairs.append(pred)

    a, b = spec.mono_affine
    mono = [(1.0 / d - b) / a for d in depths]
    return SyntheticScene(
        spec=spec, intrinsics=K, images=list(images), depths=list(depths), poses=poses,
        test_images=[t[0] for t in test], test_depths=[t[1] for t in test], test_poses=test_poses,
        pairs=pairs, mono=mono, scene=scene,
    )
