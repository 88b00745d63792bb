"""Command line entry point: ``d2t {synth, ingest-check, run, eval, render}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import STAGES, ConfigError, PipelineConfig
from .formats import read_json, read_model, read_poses, write_png
from .scene import IngestError, ingest, synth_scene
from .synthetic import SCENE_KINDS, SyntheticSceneSpec

log = logging.getLogger("d2t")

# CLI flag -> (config path, type)
RUN_FLAGS = {
    "kp": ("K_p", int),
    "P": ("P", float),
    "window": ("window", int),
    "seed": ("seed", int),
    "max_gaussians": ("max_gaussians", int),
    "coarse_steps": ("schedule.coarse_steps", int),
    "fine_steps": ("schedule.fine_steps", int),
    "lambda_ssim": ("weights.rgb_ssim", float),
    "lambda_depth": ("weights.depth", float),
    "lambda_pseudo": ("weights.pseudo", float),
    "inpainter": ("inpainter", str),
    "localize_steps": ("localize_steps", int),
    "test_init": ("test_init", str),
    "pose_noise_deg": ("pose_noise_deg", float),
    "pose_noise_frac": ("pose_noise_frac", float),
}


def _set_path(d: dict, dotted: str, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d[k]
    d[keys[-1]] = value


def build_config(args) -> PipelineConfig:
    base = PipelineConfig()
    if getattr(args, "config", None):
        base = PipelineConfig.from_json(Path(args.config).read_text())
    d = base.to_dict()
    for flag, (path, _) in RUN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            _set_path(d, path, value)
    if getattr(args, "no_eval_coarse", False):
        d["eval_coarse"] = False
    if getattr(args, "unnormalized_depth", False):
        d["normalize_depth"] = False
    d["scene_dir"] = str(args.scene)
    d["run_dir"] = str(args.out)
    return PipelineConfig.from_dict(d)


def cmd_synth(args) -> int:
    spec = SyntheticSceneSpec(
        kind=args.kind, n_views=args.views, n_test_views=args.test_views, width=args.width, height=args.height,
        focal=args.focal, arc_degrees=args.arc_degrees, pointmap_noise=args.pointmap_noise,
        corrupt_fraction=args.corrupt, mono_affine=(args.mono_a, args.mono_b),
    )
    root = synth_scene(spec, args.seed, args.out)
    print(f"wrote {spec.kind} scene with {spec.n_views} views to {root}")
    return 0


def cmd_ingest_check(args) -> int:
    try:
        bundle = ingest(args.scene)
    except IngestError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    H, W = bundle.image_shape
    print(f"{bundle.n_views} views at {W}x{H}, {len(bundle.pairs)} pair predictions, "
          f"{len(bundle.mono)} mono depths, {len(bundle.test_images)} held-out views, "
          f"ground-truth poses: {'yes' if bundle.gt_poses is not None else 'no'}")
    for w in bundle.warnings:
        print(f"warning: {w}")
    return 0


def _run(config: PipelineConfig, skip_to=None, stop_after=None) -> int:
    from .run import StageError, run

    try:
        root = run(config, skip_to=skip_to, stop_after=stop_after)
    except StageError as exc:
        print(f"error: {exc} (details in {Path(config.run_dir) / 'failure.json'})", file=sys.stderr)
        return 1
    except (IngestError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    metrics = root / "metrics.json"
    if metrics.exists():
        m = read_json(metrics)
        fine = m.get("fine", {})
        if "test_psnr_mean" in fine:
            print(f"held-out PSNR {fine['test_psnr_mean']:.2f} dB, SSIM {fine['test_ssim_mean']:.3f}")
        if "poses" in fine:
            p = fine["poses"]
            print(f"ATE {p['ate_rmse']:.4f}, RPE_t {p['rpe_trans_x100']:.3f}, RPE_r {p['rpe_rot_deg']:.3f} deg")
    print(f"run directory: {root}")
    return 0


def cmd_run(args) -> int:
    try:
        config = build_config(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return _run(config, args.skip_to, args.stop_after)


def cmd_eval(args) -> int:
    stored = Path(args.run) / "config.json"
    if not stored.exists():
        print(f"error: {stored} not found; run the pipeline first", file=sys.stderr)
        return 1
    config = PipelineConfig.from_json(stored.read_text())
    return _run(config, skip_to="eval")


def cmd_render(args) -> int:
    from ..splat_renderer import RenderConfig, render
    from ..view_synthesis import sample_novel_poses

    run_dir = Path(args.run)
    try:
        cloud = read_model(run_dir / "model.bin")
        poses = read_poses(run_dir / "poses_refined.json")
        cam = read_json(run_dir / "stages" / "ccm" / "camera.json")
        cfg = PipelineConfig.from_json((run_dir / "config.json").read_text())
    except (OSError, ValueError) as exc:
        print(f"error: incomplete run directory {run_dir}: {exc}", file=sys.stderr)
        return 1
    from ..geometry import CameraIntrinsics

    K = CameraIntrinsics(cam["focal"], cam["width"], cam["height"])
    path = sample_novel_poses(poses, args.frames)
    rc = RenderConfig(normalize_depth=cfg.normalize_depth)
    out = Path(args.out)
    for k, pose in enumerate(path.poses):
        write_png(out / f"frame_{k:04d}.png", render(cloud, pose, K, rc).color)
    print(f"wrote {len(path.poses)} frames to {out}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="d2t", description="Sparse-view Gaussian splatting pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write an analytic scene directory")
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=SCENE_KINDS, default="box")
    s.add_argument("--views", type=int, default=3)
    s.add_argument("--test-views", type=int, default=2)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=48)
    s.add_argument("--focal", type=float, default=56.0)
    s.add_argument("--arc-degrees", type=float, default=30.0)
    s.add_argument("--pointmap-noise", type=float, default=0.0)
    s.add_argument("--corrupt", type=float, default=0.0)
    s.add_argument("--mono-a", type=float, default=2.0)
    s.add_argument("--mono-b", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest-check", help="validate a scene directory")
    s.add_argument("scene")
    s.set_defaults(func=cmd_ingest_check)

    s = sub.add_parser("run", help="run the pipeline on a scene directory")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON config; flags override its fields")
    s.add_argument("--skip-to", choices=STAGES)
    s.add_argument("--stop-after", choices=STAGES)
    for flag, (_, typ) in RUN_FLAGS.items():
        s.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ)
    s.add_argument("--no-eval-coarse", action="store_true")
    s.add_argument("--unnormalized-depth", action="store_true")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("eval", help="recompute metrics for a finished run")
    s.add_argument("run")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("render", help="render a smooth camera path through the refined poses")
    s.add_argument("run")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=10, help="frames between consecutive training views")
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
