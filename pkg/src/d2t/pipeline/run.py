"""Stage-by-stage pipeline runner.

Every stage reads only what earlier stages persisted under ``stages/<name>/``
and finishes by writing a ``done.json`` marker, so a run can resume from any
stage boundary and reproduce the same bytes.
"""

from __future__ import annotations

import json
import logging
import shutil
import traceback
from pathlib import Path

import numpy as np

from ..coarse_init import estimate_shared_focal, align_global, extract_depths, view_points
from ..depth_align import align_view_depth
from ..evaluation import Trajectory, align_gt_to_estimate, localize_test_view, nearest_pose, pose_metrics, psnr, ssim
from ..geometry import CameraIntrinsics, compose, se3_exp
from ..optimizer import coarse_stage, fine_stage
from ..splat_renderer import GaussianCloud, InitConfig, RenderConfig, init_from_points, render
from ..view_synthesis import ExternalInpainter, inpaint_diffusion, sample_novel_poses, synthesize
from .config import STAGES, PipelineConfig
from .formats import (atomic_write_bytes, atomic_write_text, dumps, read_json, read_poses, write_json,
                      write_model, write_png, write_poses)
from .scene import ingest

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


# --------------------------------------------------------------------------- persistence helpers


def save_array(path: Path, arr: np.ndarray) -> None:
    import io

    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    atomic_write_bytes(path, buf.getvalue())


def load_array(path: Path) -> np.ndarray:
    return np.load(path, allow_pickle=False)


def cloud_to_array(cloud: GaussianCloud) -> np.ndarray:
    return np.concatenate([cloud.positions, cloud.log_scales, cloud.quaternions,
                           cloud.opacity_logits[:, None], cloud.colors], axis=1)


def cloud_from_array(arr: np.ndarray) -> GaussianCloud:
    return GaussianCloud(arr[:, 0:3], arr[:, 3:6], arr[:, 6:10], arr[:, 10], arr[:, 11:14])


def write_trace(path: Path, records) -> None:
    atomic_write_text(path, "".join(json.dumps(_plain(r), sort_keys=True) + "\n" for r in records))


def read_trace(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# --------------------------------------------------------------------------- context


class RunContext:
    def __init__(self, config: PipelineConfig):
        self.scene = ingest(config.scene_dir)
        self.config = config.resolved(self.scene.n_views)
        self.root = Path(config.run_dir)
        self.render_config = RenderConfig(normalize_depth=self.config.normalize_depth)

    def stage_dir(self, name: str) -> Path:
        return self.root / "stages" / name

    @property
    def image_intrinsics(self) -> CameraIntrinsics:
        info = read_json(self.stage_dir("ccm") / "camera.json")
        return CameraIntrinsics(info["focal"], info["width"], info["height"])

    def load_cloud(self, stage: str) -> GaussianCloud:
        return cloud_from_array(load_array(self.stage_dir(stage) / "cloud.npy"))

    def inpainter(self):
        sel = self.config.inpainter
        if sel in ("builtin", "", None):
            return inpaint_diffusion
        return ExternalInpainter(sel.split() if isinstance(sel, str) else sel)


def _colors_for(image: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resample of ``image`` onto a ``shape`` pixel grid."""
    H, W = shape
    h, w = image.shape[:2]
    if (h, w) == (H, W):
        return image
    rows = np.clip(np.rint(np.arange(H) * (h - 1) / max(H - 1, 1)).astype(int), 0, h - 1)
    cols = np.clip(np.rint(np.arange(W) * (w - 1) / max(W - 1, 1)).astype(int), 0, w - 1)
    return image[rows][:, cols]


def _resample_depth(depth: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    from ..geometry import upsample_bilinear

    if depth.shape == tuple(shape):
        return depth
    return upsample_bilinear(depth, shape[0], shape[1])


# --------------------------------------------------------------------------- stages


def stage_ccm(ctx: RunContext) -> None:
    cfg, scene, out = ctx.config, ctx.scene, ctx.stage_dir("ccm")
    graph = scene.graph
    Hp, Wp = scene.pairs[0].shape
    focal = estimate_shared_focal(graph)
    K_pair = CameraIntrinsics(focal, Wp, Hp)
    state = align_global(graph, K_pair, cfg.align)
    depths = np.stack(extract_depths(state))
    H, W = scene.image_shape
    K_img = K_pair.scaled_to(W, H)

    points = np.concatenate([view_points(p, d, K_pair).reshape(-1, 3) for p, d in zip(state.view_poses, depths)])
    colors = np.concatenate([_colors_for(im, (Hp, Wp)).reshape(-1, 3) for im in scene.images])
    cloud = init_from_points(points, colors, InitConfig(max_points=cfg.max_gaussians, seed=cfg.seed))

    poses = list(state.view_poses)
    noise = {"rotation_deg": cfg.pose_noise_deg, "translation_frac": cfg.pose_noise_frac, "twists": []}
    if cfg.pose_noise_deg > 0 or cfg.pose_noise_frac > 0:
        diameter = float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
        rng = np.random.default_rng(cfg.seed + 1)
        noisy = []
        for p in poses:
            axis = rng.standard_normal(3)
            direction = rng.standard_normal(3)
            xi = np.concatenate([np.radians(cfg.pose_noise_deg) * axis / np.linalg.norm(axis),
                                 cfg.pose_noise_frac * diameter * direction / np.linalg.norm(direction)])
            noise["twists"].append(xi.tolist())
            noisy.append(compose(se3_exp(xi), p))
        noise["diameter"] = diameter
        poses = noisy

    write_json(out / "camera.json", {"focal": K_img.focal, "width": W, "height": H,
                                     "pair_focal": focal, "pair_width": Wp, "pair_height": Hp})
    write_poses(out / "poses_aligned.json", state.view_poses)
    write_poses(out / "poses.json", poses)
    write_json(out / "noise.json", noise)
    write_json(out / "alignment.json", {"objective": state.objective(graph), "trace": _plain(state.trace)})
    save_array(out / "depths.npy", depths)
    save_array(out / "cloud.npy", cloud_to_array(cloud))


def stage_coarse(ctx: RunContext) -> None:
    cfg, scene, out = ctx.config, ctx.scene, ctx.stage_dir("coarse")
    cloud = ctx.load_cloud("ccm")
    poses = read_poses(ctx.stage_dir("ccm") / "poses.json")
    res = coarse_stage(cloud, poses, scene.images, scene.mono, ctx.image_intrinsics,
                       cfg.schedule, cfg.weights, render_config=ctx.render_config)
    save_array(out / "cloud.npy", cloud_to_array(res.cloud))
    save_array(out / "perturbation.npy", res.perturbation.vectors())
    write_poses(out / "poses.json", res.poses)
    write_trace(out / "trace.jsonl", res.trace)
    write_trace(ctx.root / "trace.jsonl", res.trace)


def stage_cada(ctx: RunContext) -> None:
    cfg, scene, out = ctx.config, ctx.scene, ctx.stage_dir("cada")
    depths = load_array(ctx.stage_dir("ccm") / "depths.npy")
    conf = scene.confidences()
    aligned, fits = [], []
    for v in range(scene.n_views):
        d, fit = align_view_depth(depths[v], conf[v], scene.mono[v], cfg.P)
        aligned.append(d)
        fits.append({"view": v, "scale": fit.scale, "shift": fit.shift, "retained_fraction": fit.retained_fraction})
    save_array(out / "depths.npy", np.stack(aligned))
    write_json(out / "fits.json", fits)


def stage_synth(ctx: RunContext) -> None:
    cfg, scene, out = ctx.config, ctx.scene, ctx.stage_dir("synth")
    poses = read_poses(ctx.stage_dir("coarse") / "poses.json")
    depths = load_array(ctx.stage_dir("cada") / "depths.npy")
    K = ctx.image_intrinsics
    novel = sample_novel_poses(poses, cfg.K_p)
    failures = []
    results = synthesize(scene.images, list(depths), poses, novel, K, ctx.inpainter(), cfg.window, failures)
    if not results:
        raise RuntimeError("no novel view could be synthesized")
    save_array(out / "images.npy", np.stack([r.inpainted for r in results]))
    write_poses(out / "poses.json", [r.pose for r in results])
    write_json(out / "summary.json", {
        "requested": len(novel), "synthesized": len(results), "failures": failures,
        "source_views": [r.source_view for r in results],
        "hole_fraction": [r.hole_fraction for r in results],
    })
    for k, r in enumerate(results):
        write_png(out / "png" / f"pseudo_{k:03d}.png", r.inpainted)


def stage_fine(ctx: RunContext) -> None:
    cfg, scene, out = ctx.config, ctx.scene, ctx.stage_dir("fine")
    cloud = ctx.load_cloud("coarse")
    poses = read_poses(ctx.stage_dir("coarse") / "poses.json")
    pseudo = load_array(ctx.stage_dir("synth") / "images.npy")
    pseudo_poses = read_poses(ctx.stage_dir("synth") / "poses.json")
    res = fine_stage(cloud, poses, scene.images, scene.mono, list(pseudo), pseudo_poses, ctx.image_intrinsics,
                     cfg.schedule, cfg.weights, render_config=ctx.render_config)
    save_array(out / "cloud.npy", cloud_to_array(res.cloud))
    save_array(out / "perturbation.npy", res.perturbation.vectors())
    write_poses(out / "poses.json", res.poses)
    write_trace(out / "trace.jsonl", res.trace)
    coarse_trace = read_trace(ctx.stage_dir("coarse") / "trace.jsonl")
    write_trace(ctx.root / "trace.jsonl", coarse_trace + [_plain(r) for r in res.trace])
    write_model(ctx.root / "model.bin", res.cloud)
    write_poses(ctx.root / "poses_refined.json", res.poses)


def _evaluate_model(ctx: RunContext, stage: str, render_dir: Path | None) -> dict:
    cfg, scene = ctx.config, ctx.scene
    cloud = ctx.load_cloud(stage)
    poses = read_poses(ctx.stage_dir(stage) / "poses.json")
    K = ctx.image_intrinsics
    report = {"n_gaussians": len(cloud)}
    train_psnr = []
    for k, (img, p) in enumerate(zip(scene.images, poses)):
        color = render(cloud, p, K, ctx.render_config).color
        train_psnr.append(psnr(color, img))
        if render_dir is not None:
            write_png(render_dir / f"train_{k}.png", color)
    report["train_psnr"] = train_psnr
    if scene.gt_poses is not None:
        report["poses"] = pose_metrics(Trajectory.from_poses(poses), Trajectory.from_poses(scene.gt_poses)).to_dict()
    if scene.test_images and scene.test_poses is not None and scene.gt_poses is not None:
        mapped = align_gt_to_estimate(poses, scene.gt_poses, scene.test_poses)
        tests = []
        for k, (img, target) in enumerate(zip(scene.test_images, mapped)):
            init = target if cfg.test_init == "aligned_gt" else nearest_pose(poses, target.center)
            pose = localize_test_view(cloud, img, init, K, cfg.localize_steps, render_config=ctx.render_config)
            color = render(cloud, pose, K, ctx.render_config).color
            tests.append({"view": k, "psnr": psnr(color, img), "ssim": ssim(color, img)})
            if render_dir is not None:
                write_png(render_dir / f"test_{k}.png", color)
        report["test"] = tests
        report["test_psnr_mean"] = float(np.mean([t["psnr"] for t in tests]))
        report["test_ssim_mean"] = float(np.mean([t["ssim"] for t in tests]))
    return report


def stage_eval(ctx: RunContext) -> None:
    cfg, scene = ctx.config, ctx.scene
    metrics = {"ate_statistic": "rmse", "rpe_statistic": "mean over consecutive pairs"}
    metrics["fine"] = _evaluate_model(ctx, "fine", ctx.root / "renders")
    if cfg.eval_coarse:
        metrics["coarse"] = _evaluate_model(ctx, "coarse", None)
    if scene.gt_poses is not None:
        gt = Trajectory.from_poses(scene.gt_poses)
        init = read_poses(ctx.stage_dir("ccm") / "poses.json")
        aligned = read_poses(ctx.stage_dir("ccm") / "poses_aligned.json")
        metrics["initial_poses"] = pose_metrics(Trajectory.from_poses(init), gt).to_dict()
        metrics["aligned_poses"] = pose_metrics(Trajectory.from_poses(aligned), gt).to_dict()
    write_json(ctx.root / "metrics.json", _plain(metrics))


STAGE_FUNCS = {
    "ccm": stage_ccm, "coarse": stage_coarse, "cada": stage_cada,
    "synth": stage_synth, "fine": stage_fine, "eval": stage_eval,
}


# --------------------------------------------------------------------------- driver


def _marker(ctx: RunContext, stage: str) -> Path:
    return ctx.stage_dir(stage) / "done.json"


def completed_stages(run_dir) -> list[str]:
    root = Path(run_dir)
    return [s for s in STAGES if (root / "stages" / s / "done.json").exists()]


def run(config: PipelineConfig, skip_to: str | None = None, stop_after: str | None = None) -> Path:
    """Execute the pipeline; ``skip_to`` resumes at a stage whose predecessors are complete."""
    for name in (skip_to, stop_after):
        if name is not None and name not in STAGES:
            raise ValueError(f"unknown stage {name!r}; expected one of {STAGES}")
    ctx = RunContext(config)
    root = ctx.root
    root.mkdir(parents=True, exist_ok=True)
    start = STAGES.index(skip_to) if skip_to else 0
    stop = STAGES.index(stop_after) if stop_after else len(STAGES) - 1
    config_text = dumps(ctx.config.to_dict())
    if start > 0:
        missing = [s for s in STAGES[:start] if not _marker(ctx, s).exists()]
        if missing:
            raise ValueError(f"cannot skip to {skip_to!r}: stages {missing} have not completed in {root}")
        stored = root / "config.json"
        if stored.exists() and stored.read_text() != config_text:
            raise ValueError(f"cannot skip to {skip_to!r}: configuration differs from the one stored in {stored}")
    atomic_write_text(root / "config.json", config_text)
    failure = root / "failure.json"
    if failure.exists():
        failure.unlink()
    for stage in STAGES[start:]:
        # later results are stale once an earlier stage reruns
        for later in STAGES[STAGES.index(stage):]:
            if _marker(ctx, later).exists():
                _marker(ctx, later).unlink()
    for stage in STAGES[start:stop + 1]:
        d = ctx.stage_dir(stage)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        log.info("stage %s", stage)
        try:
            STAGE_FUNCS[stage](ctx)
        except Exception as exc:
            write_json(failure, {
                "stage": stage, "error": type(exc).__name__, "message": str(exc),
                "traceback": traceback.format_exc(),
            })
            raise StageError(stage, exc) from exc
        write_json(_marker(ctx, stage), {"stage": stage})
    return root
