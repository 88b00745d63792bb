"""Joint optimization of the Gaussian cloud and per-view pose corrections.

Two stages share one step routine. The coarse stage cycles over the training
views with an RGB plus depth-correlation loss. The fine stage adds, on every
step, an RGB term on one synthesized pseudo view whose pose stays fixed.
Training-view poses are refined through a left-multiplied se(3) correction
driven by Adam in the tangent space.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import CameraIntrinsics, Pose, compose, se3_exp, se3_log
from .losses import loss_depth, loss_rgb
from .splat_renderer import GaussianCloud, RenderConfig, render_differentiable

log = logging.getLogger(__name__)


class OptimizationError(RuntimeError):
    """Raised on a non-finite loss; carries the trace recorded so far."""

    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass
class LossWeights:
    rgb_ssim: float = 0.1
    depth: float = 0.5
    pseudo: float = 0.3

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"loss weight {name}={v} outside [0, 1]")


@dataclass
class LearningRates:
    position: float = 1.6e-4  # multiplied by the scene extent
    position_final: float = 1.6e-5
    log_scale: float = 5e-3
    quaternion: float = 1e-3
    opacity: float = 0.05
    color: float = 2.5e-3
    pose: float = 1e-3
    pose_final: float = 1e-4


@dataclass
class Schedule:
    coarse_steps: int = 300
    fine_steps: int = 1700
    lr: LearningRates = field(default_factory=LearningRates)
    refine_poses_in_fine: bool = True
    pose_warmup: int = 0  # steps at the start of each stage with poses held fixed

    def __post_init__(self):
        if isinstance(self.lr, dict):
            self.lr = LearningRates(**self.lr)
        if self.coarse_steps <= 0 or self.fine_steps <= 0:
            raise ValueError("stage step counts must be positive")


def decayed(lr0: float, lr1: float, step: int, total: int) -> float:
    """Log-linear interpolation from ``lr0`` to ``lr1`` over ``total`` steps."""
    if total <= 1 or lr0 <= 0 or lr1 <= 0:
        return lr0
    t = min(step / (total - 1), 1.0)
    return float(np.exp((1 - t) * np.log(lr0) + t * np.log(lr1)))


class Adam:
    def __init__(self, shape, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, grad: np.ndarray, lr: float) -> np.ndarray:
        """Return the update to add to the parameters."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return -lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class PosePerturbation:
    """Accumulated left corrections, one per training view."""

    corrections: list[Pose]

    @classmethod
    def zeros(cls, n: int) -> "PosePerturbation":
        return cls([Pose.identity() for _ in range(n)])

    def apply(self, poses: Sequence[Pose]) -> list[Pose]:
        return [compose(d, p) for d, p in zip(self.corrections, poses)]

    def vectors(self) -> np.ndarray:
        """``(N, 6)`` se(3) coordinates (rotation, translation) of each correction."""
        return np.stack([se3_log(d) for d in self.corrections])


@dataclass
class StageResult:
    cloud: GaussianCloud
    poses: list[Pose]
    perturbation: PosePerturbation
    trace: list[dict]


def scene_extent(poses: Sequence[Pose]) -> float:
    """1.1 times the largest camera distance from the mean camera center (at least 1e-3)."""
    centers = np.stack([p.center for p in poses])
    r = np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()
    return float(max(1.1 * r, 1e-3))


class _Trainer:
    def __init__(self, cloud, poses, intrinsics, schedule, weights, total_steps, extent, render_config,
                 refine_poses=True):
        self.cloud = cloud.copy()
        self.base_poses = list(poses)
        self.K = intrinsics
        self.schedule = schedule
        self.weights = weights
        self.total = total_steps
        self.extent = extent if extent is not None else scene_extent(poses)
        self.render_config = render_config or RenderConfig()
        self.refine_poses = refine_poses
        self.perturbation = PosePerturbation.zeros(len(poses))
        self.adam = {f: Adam(getattr(self.cloud, f).shape) for f in GaussianCloud.FIELDS}
        self.pose_adam = [Adam(6, eps=1e-8) for _ in poses]
        self.trace: list[dict] = []

    def pose(self, v: int) -> Pose:
        return compose(self.perturbation.corrections[v], self.base_poses[v])

    def _rates(self, step: int) -> dict:
        lr = self.schedule.lr
        return {
            "positions": decayed(lr.position, lr.position_final, step, self.total) * self.extent,
            "log_scales": lr.log_scale,
            "quaternions": lr.quaternion,
            "opacity_logits": lr.opacity,
            "colors": lr.color,
        }

    def _accumulate(self, total: dict, grads):
        for f in GaussianCloud.FIELDS:
            total[f] = total[f] + getattr(grads, f)

    def step(self, step: int, stage: str, view: int, image, mono, pseudo=None) -> dict:
        w = self.weights
        pose = self.pose(view)
        out, backward = render_differentiable(self.cloud, pose, self.K, self.render_config)
        l_rgb, g_rgb = loss_rgb(out.color, image, w.rgb_ssim)
        record = {"step": step, "stage": stage, "view": view, "rgb": l_rgb}
        g_depth = None
        loss = l_rgb
        if w.depth > 0 and mono is not None:
            l_d, g_d = loss_depth(out.depth, mono, out.alpha)
            record["depth"] = l_d
            loss += w.depth * l_d
            g_depth = w.depth * g_d
        record["train"] = loss
        grads = backward(g_rgb, g_depth)
        total = {f: getattr(grads, f) for f in GaussianCloud.FIELDS}

        if pseudo is not None and w.pseudo > 0:
            k, p_image, p_pose = pseudo
            p_out, p_backward = render_differentiable(self.cloud, p_pose, self.K, self.render_config)
            l_p, g_p = loss_rgb(p_out.color, p_image, w.rgb_ssim)
            record["pseudo_view"] = k
            record["pseudo_rgb"] = l_p
            loss += w.pseudo * l_p
            self._accumulate(total, p_backward(w.pseudo * g_p))
        record["loss"] = loss
        if not np.isfinite(loss):
            self.trace.append(record)
            raise OptimizationError(f"non-finite loss at {stage} step {step}", self.trace)

        rates = self._rates(step)
        for f in GaussianCloud.FIELDS:
            arr = getattr(self.cloud, f)
            arr += self.adam[f].step(total[f], rates[f])
        self.cloud.normalize()
        if self.refine_poses and step >= self.schedule.pose_warmup:
            lr = decayed(self.schedule.lr.pose, self.schedule.lr.pose_final, step, self.total)
            delta = self.pose_adam[view].step(grads.pose, lr)
            self.perturbation.corrections[view] = compose(se3_exp(delta), self.perturbation.corrections[view])
        self.trace.append(record)
        return record

    def result(self) -> StageResult:
        poses = [self.pose(v) for v in range(len(self.base_poses))]
        return StageResult(self.cloud, poses, self.perturbation, self.trace)


def coarse_stage(cloud: GaussianCloud, poses: Sequence[Pose], images: Sequence[np.ndarray],
                 monos: Sequence[np.ndarray] | None, intrinsics: CameraIntrinsics,
                 schedule: Schedule | None = None, weights: LossWeights | None = None, *,
                 steps: int | None = None, extent: float | None = None,
                 render_config: RenderConfig | None = None,
                 on_step: Callable[[dict], None] | None = None) -> StageResult:
    """Round-robin over the training views minimizing RGB + depth-correlation loss."""
    schedule = schedule or Schedule()
    weights = weights or LossWeights()
    steps = schedule.coarse_steps if steps is None else steps
    if len(images) != len(poses) or (monos is not None and len(monos) != len(poses)):
        raise ValueError("need one image (and one mono depth) per pose")
    tr = _Trainer(cloud, poses, intrinsics, schedule, weights, steps, extent, render_config)
    for step in range(steps):
        v = step % len(poses)
        rec = tr.step(step, "coarse", v, images[v], None if monos is None else monos[v])
        if on_step:
            on_step(rec)
    return tr.result()


def fine_stage(cloud: GaussianCloud, poses: Sequence[Pose], images: Sequence[np.ndarray],
               monos: Sequence[np.ndarray] | None, pseudo_images: Sequence[np.ndarray],
               pseudo_poses: Sequence[Pose], intrinsics: CameraIntrinsics,
               schedule: Schedule | None = None, weights: LossWeights | None = None, *,
               steps: int | None = None, extent: float | None = None,
               render_config: RenderConfig | None = None,
               on_step: Callable[[dict], None] | None = None) -> StageResult:
    """Coarse objective on one training view plus a weighted RGB term on one pseudo view per step."""
    schedule = schedule or Schedule()
    weights = weights or LossWeights()
    steps = schedule.fine_steps if steps is None else steps
    if len(pseudo_images) != len(pseudo_poses):
        raise ValueError("pseudo images and poses differ in length")
    if not pseudo_images and weights.pseudo > 0:
        raise ValueError("fine stage needs at least one synthesized view")
    tr = _Trainer(cloud, poses, intrinsics, schedule, weights, steps, extent, render_config,
                  refine_poses=schedule.refine_poses_in_fine)
    for step in range(steps):
        v = step % len(poses)
        pseudo = None
        if pseudo_images:
            k = step % len(pseudo_images)
            pseudo = (k, pseudo_images[k], pseudo_poses[k])
        rec = tr.step(step, "fine", v, images[v], None if monos is None else monos[v], pseudo)
        if on_step:
            on_step(rec)
    return tr.result()
