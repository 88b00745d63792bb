"""Scene directories: writing synthetic ones and ingesting any that follow the layout.

Layout::

    images/view_{k}.png            training images
    pairs/{n}_{m}.{x,y,z}.pfm      pointmap of view n, in view n's frame
    pairs/{n}_{m}.{mx,my,mz}.pfm   pointmap of view m, in view n's frame
    pairs/{n}_{m}.{cn,cm}.pfm      confidences of views n and m
    mono/view_{k}.pfm              monocular depth proxy (affine in inverse depth)
    gt/poses.json                  optional ground-truth world-to-camera poses
    test/view_{k}.png              optional held-out images
    gt/test_poses.json             optional held-out poses
    config.json                    scene description
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..coarse_init import PairPrediction, ViewGraph
from ..geometry import Pose
from .formats import FormatError, read_json, read_pfm, read_png, read_poses, write_json, write_pfm, write_png, write_poses
from .synthetic import SyntheticSceneSpec, generate

log = logging.getLogger(__name__)

MAX_SIDE = 512
POINT_CHANNELS = ("x", "y", "z")
OTHER_CHANNELS = ("mx", "my", "mz")


class IngestError(ValueError):
    """Scene directory problems, one entry per offending file."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("scene directory is not usable:\n  " + "\n  ".join(self.problems))


@dataclass
class SceneBundle:
    root: Path
    images: list[np.ndarray]
    pairs: list[PairPrediction]
    mono: list[np.ndarray]
    gt_poses: list[Pose] | None = None
    test_images: list[np.ndarray] = field(default_factory=list)
    test_poses: list[Pose] | None = None
    meta: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def n_views(self) -> int:
        return len(self.images)

    @property
    def graph(self) -> ViewGraph:
        return ViewGraph(self.n_views, self.pairs)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images[0].shape[:2]

    def confidences(self) -> list[list[np.ndarray]]:
        """All confidence maps of each view, gathered from every pair it belongs to."""
        out = [[] for _ in range(self.n_views)]
        for pair in self.pairs:
            for v, _, c in pair.views():
                out[v].append(c)
        return out


def _pair_stem(n: int, m: int) -> str:
    return f"{n}_{m}"


def write_scene(root, images, pairs, mono, gt_poses=None, test_images=(), test_poses=None, meta=None):
    root = Path(root)
    for k, img in enumerate(images):
        write_png(root / "images" / f"view_{k}.png", img)
    for pair in pairs:
        n, m = pair.edge
        stem = root / "pairs" / _pair_stem(n, m)
        for c, name in enumerate(POINT_CHANNELS):
            write_pfm(f"{stem}.{name}.pfm", pair.pointmap_n[..., c])
        for c, name in enumerate(OTHER_CHANNELS):
            write_pfm(f"{stem}.{name}.pfm", pair.pointmap_m[..., c])
        write_pfm(f"{stem}.cn.pfm", pair.confidence_n)
        write_pfm(f"{stem}.cm.pfm", pair.confidence_m)
    for k, d in enumerate(mono):
        write_pfm(root / "mono" / f"view_{k}.pfm", d)
    if gt_poses is not None:
        write_poses(root / "gt" / "poses.json", gt_poses)
    for k, img in enumerate(test_images):
        write_png(root / "test" / f"view_{k}.png", img)
    if test_poses is not None:
        write_poses(root / "gt" / "test_poses.json", test_poses)
    meta = dict(meta or {})
    meta["n_views"] = len(images)
    write_json(root / "config.json", meta)
    return root


def synth_scene(spec: SyntheticSceneSpec, seed: int, root) -> Path:
    """Generate an analytic scene and write it in the exchange layout."""
    sc = generate(spec, seed)
    return write_scene(
        root, sc.images, sc.pairs, sc.mono, sc.poses, sc.test_images, sc.test_poses,
        meta={"kind": "synthetic", "seed": seed, "spec": spec.to_dict(), "focal": spec.focal},
    )


def _load(problems, path, reader, hint=None):
    if not Path(path).exists():
        problems.append(f"{path}: missing" + (f" ({hint})" if hint else ""))
        return None
    try:
        return reader(path)
    except FormatError as exc:
        problems.append(str(exc))
    except (OSError, ValueError) as exc:
        problems.append(f"{path}: {exc}")
    return None


def _count_views(root: Path, meta: dict) -> int:
    if "n_views" in meta:
        return int(meta["n_views"])
    k = 0
    while (root / "images" / f"view_{k}.png").exists():
        k += 1
    return k


def ingest(root) -> SceneBundle:
    """Load and validate a scene directory; every problem found is reported at once."""
    root = Path(root)
    if not root.is_dir():
        raise IngestError([f"{root}: not a directory"])
    problems: list[str] = []
    warnings: list[str] = []
    meta = {}
    if (root / "config.json").exists():
        meta = _load(problems, root / "config.json", read_json) or {}
    n = _count_views(root, meta)
    if n < 2:
        raise IngestError(problems + [f"{root / 'images'}: need at least 2 training images, found {n}"])

    hint_pairs = "produce pairwise pointmaps with the external model adapter or `d2t synth`"
    hint_mono = "produce monocular depth with the external model adapter or `d2t synth`"
    images = [_load(problems, root / "images" / f"view_{k}.png", read_png) for k in range(n)]
    mono = [_load(problems, root / "mono" / f"view_{k}.pfm", read_pfm, hint_mono) for k in range(n)]

    pairs = []
    for a in range(n):
        for b in range(a + 1, n):
            stem = root / "pairs" / _pair_stem(a, b)
            chans = {c: _load(problems, f"{stem}.{c}.pfm", read_pfm, hint_pairs)
                     for c in POINT_CHANNELS + OTHER_CHANNELS + ("cn", "cm")}
            if any(v is None for v in chans.values()):
                continue
            shapes = {c: v.shape for c, v in chans.items()}
            if len(set(shapes.values())) != 1:
                problems.append(f"{stem}.*.pfm: channel resolutions differ: {shapes}")
                continue
            try:
                pairs.append(PairPrediction(
                    (a, b),
                    np.stack([chans[c] for c in POINT_CHANNELS], axis=-1),
                    np.stack([chans[c] for c in OTHER_CHANNELS], axis=-1),
                    chans["cn"], chans["cm"],
                ))
            except ValueError as exc:
                problems.append(f"{stem}.*.pfm: {exc}")

    _check_resolutions(problems, "images", [(root / "images" / f"view_{k}.png", im) for k, im in enumerate(images)])
    _check_resolutions(problems, "mono depth", [(root / "mono" / f"view_{k}.pfm", d) for k, d in enumerate(mono)])
    _check_resolutions(problems, "pair predictions", [(root / "pairs" / _pair_stem(*p.edge), p.confidence_n) for p in pairs])
    if images[0] is not None and mono[0] is not None and images[0].shape[:2] != mono[0].shape:
        problems.append(f"mono depth resolution {mono[0].shape} differs from image resolution {images[0].shape[:2]}")

    gt_poses = test_poses = None
    if (root / "gt" / "poses.json").exists():
        gt_poses = _load(problems, root / "gt" / "poses.json", read_poses)
        if gt_poses is not None and len(gt_poses) != n:
            problems.append(f"{root / 'gt' / 'poses.json'}: {len(gt_poses)} poses for {n} views")
    test_images = []
    k = 0
    while (root / "test" / f"view_{k}.png").exists():
        test_images.append(_load(problems, root / "test" / f"view_{k}.png", read_png))
        k += 1
    if (root / "gt" / "test_poses.json").exists():
        test_poses = _load(problems, root / "gt" / "test_poses.json", read_poses)
        if test_poses is not None and len(test_poses) != len(test_images):
            problems.append(f"{root / 'gt' / 'test_poses.json'}: {len(test_poses)} poses for {len(test_images)} test images")

    if problems:
        raise IngestError(problems)
    for name, shape in (("images", images[0].shape[:2]), ("pair predictions", pairs[0].shape)):
        if max(shape) > MAX_SIDE:
            msg = f"{name}: longer side {max(shape)} exceeds {MAX_SIDE} pixels"
            log.warning(msg)
            warnings.append(msg)
    return SceneBundle(root, images, pairs, mono, gt_poses, test_images, test_poses, meta, warnings)


def _check_resolutions(problems, label, items):
    shapes = [(path, arr.shape[:2]) for path, arr in items if arr is not None]
    if not shapes:
        return
    counts = {}
    for _, s in shapes:
        counts[s] = counts.get(s, 0) + 1
    if len(counts) > 1:
        common = max(counts, key=lambda s: (counts[s], s))
        bad = [f"{p} {s}" for p, s in shapes if s != common]
        problems.append(f"{label}: mixed resolutions, expected {common}; offenders: " + ", ".join(bad))
