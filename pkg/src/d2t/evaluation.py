"""Image and trajectory metrics, plus test-view pose localization."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import CameraIntrinsics, GeometryError, Pose, compose, rotation_angle, se3_exp, umeyama
from .losses import loss_rgb
from .losses import ssim as _ssim
from .optimizer import Adam, decayed
from .splat_renderer import GaussianCloud, RenderConfig, render_differentiable

log = logging.getLogger(__name__)


class DegenerateTrajectoryError(GeometryError):
    pass


@dataclass
class Trajectory:
    """Ordered camera-to-world poses as ``(N, 3, 3)`` rotations and ``(N, 3)`` centers."""

    rotations: np.ndarray
    centers: np.ndarray

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3, 3)
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        if len(self.rotations) != len(self.centers):
            raise ValueError("rotation and center counts differ")

    def __len__(self):
        return len(self.centers)

    @classmethod
    def from_poses(cls, poses: Sequence[Pose]) -> "Trajectory":
        """From world-to-camera poses."""
        return cls(np.stack([p.rotation.T for p in poses]), np.stack([p.center for p in poses]))

    def to_poses(self) -> list[Pose]:
        return [Pose(R.T, -R.T @ c) for R, c in zip(self.rotations, self.centers)]

    def transformed(self, scale: float, R: np.ndarray, t: np.ndarray) -> "Trajectory":
        """Apply ``x -> scale * R x + t`` to the world frame."""
        return Trajectory(R @ self.rotations, scale * self.centers @ R.T + t)


@dataclass
class PoseMetrics:
    ate_rmse: float
    rpe_trans: float  # mean over consecutive pairs, times 100
    rpe_rot: float  # mean over consecutive pairs, degrees
    rpe_trans_pairs: np.ndarray | None = None
    rpe_rot_pairs: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {"ate_rmse": self.ate_rmse, "rpe_trans_x100": self.rpe_trans, "rpe_rot_deg": self.rpe_rot}


def umeyama_align(est: Trajectory, gt: Trajectory):
    """Similarity ``(s, R, t)`` with ``gt ≈ s R est + t`` on the camera centers."""
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(est) < 2:
        raise DegenerateTrajectoryError("need at least two poses to align")
    if len(est) == 2:
        return _align_two(est, gt)
    try:
        return umeyama(est.centers, gt.centers)
    except GeometryError as exc:
        raise DegenerateTrajectoryError(str(exc)) from None


def _align_two(est: Trajectory, gt: Trajectory):
    # scale from the pair distance; rotation from the mean camera orientation offset
    de = est.centers[1] - est.centers[0]
    dg = gt.centers[1] - gt.centers[0]
    ne, ng = np.linalg.norm(de), np.linalg.norm(dg)
    if ne < 1e-12 or ng < 1e-12:
        raise DegenerateTrajectoryError("coincident camera centers")
    R = gt.rotations[0] @ est.rotations[0].T
    s = ng / ne
    t = gt.centers.mean(axis=0) - s * est.centers.mean(axis=0) @ R.T
    return s, R, t


def pose_metrics(est: Trajectory, gt: Trajectory) -> PoseMetrics:
    """ATE (RMSE of aligned centers) and consecutive-pair RPE after similarity alignment."""
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    s, R, t = umeyama_align(est, gt)
    aligned = est.transformed(s, R, t)
    err = aligned.centers - gt.centers
    ate = float(np.sqrt((err**2).sum(axis=1).mean()))
    rt, rr = [], []
    for i in range(len(gt) - 1):
        # relative motion i -> i+1 in camera i's frame
        rel_g_R = gt.rotations[i].T @ gt.rotations[i + 1]
        rel_g_t = gt.rotations[i].T @ (gt.centers[i + 1] - gt.centers[i])
        rel_e_R = aligned.rotations[i].T @ aligned.rotations[i + 1]
        rel_e_t = aligned.rotations[i].T @ (aligned.centers[i + 1] - aligned.centers[i])
        err_R = rel_g_R.T @ rel_e_R
        err_t = rel_g_R.T @ (rel_e_t - rel_g_t)
        rt.append(np.linalg.norm(err_t))
        rr.append(np.degrees(rotation_angle(err_R)))
    rt, rr = np.array(rt), np.array(rr)
    return PoseMetrics(ate, float(100.0 * rt.mean()) if len(rt) else 0.0,
                       float(rr.mean()) if len(rr) else 0.0, 100.0 * rt, rr)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; ``inf`` for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    return _ssim(a, b)


@dataclass
class LocalizeConfig:
    lr: float = 2e-3
    lr_final: float = 1e-4
    rgb_ssim: float = 0.1


def localize_test_view(cloud: GaussianCloud, image: np.ndarray, init: Pose, intrinsics: CameraIntrinsics,
                       steps: int = 200, config: LocalizeConfig | None = None,
                       render_config: RenderConfig | None = None, history: list | None = None) -> Pose:
    """Fit a test-view pose against a frozen cloud; return the lowest-loss pose visited."""
    cfg = config or LocalizeConfig()
    pose = init
    best_pose, best_loss = init, np.inf
    adam = Adam(6, eps=1e-8)
    for step in range(steps):
        out, backward = render_differentiable(cloud, pose, intrinsics, render_config)
        loss, g = loss_rgb(out.color, image, cfg.rgb_ssim)
        if history is not None:
            history.append(loss)
        if not np.isfinite(loss):
            log.warning("localization stopped at step %d: non-finite loss", step)
            break
        if loss < best_loss:
            best_pose, best_loss = pose, loss
        grad = backward(g).pose
        pose = compose(se3_exp(adam.step(grad, decayed(cfg.lr, cfg.lr_final, step, steps))), pose)
    else:
        if steps > 0:
            # score the final iterate too
            out, _ = render_differentiable(cloud, pose, intrinsics, render_config)
            loss, _ = loss_rgb(out.color, image, cfg.rgb_ssim)
            if loss < best_loss:
                best_pose = pose
    return best_pose


def orientation_align(est: Trajectory, gt: Trajectory):
    """Similarity ``(s, R, t)`` with ``gt ≈ s R est + t`` that takes its rotation from the camera orientations.

    Center-only alignment leaves the roll about a near-straight trajectory undetermined; averaging the
    per-camera orientation offsets pins it down. Scale and translation then follow by least squares.
    """
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(est) < 2:
        raise DegenerateTrajectoryError("need at least two poses to align")
    M = np.einsum("nij,nkj->ik", gt.rotations, est.rotations)
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    ce = est.centers - est.centers.mean(axis=0)
    cg = gt.centers - gt.centers.mean(axis=0)
    var = float((ce**2).sum())
    if var < 1e-24:
        raise DegenerateTrajectoryError("coincident camera centers")
    s = float(((ce @ R.T) * cg).sum() / var)
    if s <= 0:
        raise DegenerateTrajectoryError("trajectories disagree in direction")
    t = gt.centers.mean(axis=0) - s * est.centers.mean(axis=0) @ R.T
    return s, R, t


def align_gt_to_estimate(est_train: Sequence[Pose], gt_train: Sequence[Pose], gt_poses: Sequence[Pose]) -> list[Pose]:
    """Map ground-truth poses into the estimate's frame through the train-set similarity."""
    s, R, t = orientation_align(Trajectory.from_poses(gt_train), Trajectory.from_poses(est_train))
    return Trajectory.from_poses(gt_poses).transformed(s, R, t).to_poses()


def nearest_pose(poses: Sequence[Pose], center: np.ndarray) -> Pose:
    d = [np.linalg.norm(p.center - center) for p in poses]
    return poses[int(np.argmin(d))]
