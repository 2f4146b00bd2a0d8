"""Cloud initialization from aligned pointmaps and staticness-aware training.

Only Gaussian positions, opacities and staticness are optimized (plus camera
poses when requested); color, rotation and scale keep their initial values and
the number of Gaussians never changes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logit

from .align import AlignState
from .geometry import Intrinsics, Pose, quat_normalize
from .splat import STATICNESS_EPS, GaussianCloud, render_backward, render_forward, staticness_to_logit
from .ssim import ssim_and_grad

log = logging.getLogger(__name__)

LossForm = Literal["masked", "literal"]


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"training loss became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    iterations: int = 4000
    lr_mu: float = 1.6e-4  # multiplied by the scene extent
    lr_opacity: float = 0.05
    lr_staticness: float = 0.05
    lr_pose_rot: float = 1e-4
    lr_pose_trans: float = 1e-3
    lambda_ssim: float = 0.2
    init_percentile: float = 50.0
    loss_form: LossForm = "masked"
    refine_poses: bool = True
    optimize_staticness: bool = True
    refine_test_iterations: int = 200
    staticness_eps: float = STATICNESS_EPS  # staticness kept in [eps, 1 - eps]
    seed: int = 0

    def validate(self) -> None:
        if self.iterations < 0:
            raise ValueError(f"iterations must be non-negative, got {self.iterations}")
        if self.lambda_ssim < 0:
            raise ValueError(f"lambda_ssim must be non-negative, got {self.lambda_ssim}")
        if not 0.0 <= self.init_percentile <= 100.0:
            raise ValueError(f"init_percentile must be in [0, 100], got {self.init_percentile}")
        if self.loss_form not in ("masked", "literal"):
            raise ValueError(f"unknown loss form {self.loss_form!r}")
        if not 0.0 < self.staticness_eps < 0.5:
            raise ValueError(f"staticness_eps must be in (0, 0.5), got {self.staticness_eps}")


@dataclass
class FrameDataset:
    images: np.ndarray  # (N, H, W, 3)
    poses: list[Pose]
    staticness: np.ndarray  # (N, H, W)
    intr: Intrinsics
    test_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        N = len(self.images)
        if len(self.poses) != N or len(self.staticness) != N:
            raise ValueError("images, poses and staticness maps must have one entry per frame")
        if self.images.shape[1:3] != (self.intr.height, self.intr.width):
            raise ValueError(f"images are {self.images.shape[1:3]}, intrinsics say {self.intr.height}x{self.intr.width}")
        self.test_index = np.asarray(self.test_index, dtype=np.int64)

    @property
    def num_frames(self) -> int:
        return len(self.images)

    @property
    def train_index(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.num_frames), self.test_index)


# ---------------------------------------------------------------------------
# initialization


def _select_top(conf: np.ndarray, percentile: float, rng: np.random.Generator) -> np.ndarray:
    """Indices of the top ``100 - percentile`` percent of ``conf``; equal values are ordered randomly."""
    keep = int(math.floor(conf.size * (1.0 - percentile / 100.0) + 1e-9))
    if keep == 0:
        return np.zeros(0, dtype=np.int64)
    tiebreak = rng.permutation(conf.size)
    order = np.lexsort((tiebreak, -conf))
    return np.sort(order[:keep])


def init_cloud(state: AlignState, confidences: np.ndarray, frame_masks: np.ndarray, images: np.ndarray,
               cfg: TrainConfig, frames: np.ndarray | None = None) -> GaussianCloud:
    """One Gaussian per surviving pixel of ``frames`` (default: all frames)."""
    N = state.num_frames
    if N < 2:
        raise ValueError("need at least 2 frames to initialize a cloud")
    frames = np.arange(N) if frames is None else np.asarray(frames)
    H, W = state.shape
    pts = state.global_pointmaps()[frames].reshape(-1, 3)
    conf = np.asarray(confidences, dtype=np.float64)[frames].reshape(-1)
    rng = np.random.default_rng(cfg.seed)
    sel = _select_top(conf, cfg.init_percentile, rng)
    if len(sel) == 0:
        raise ValueError(f"no points survive the {cfg.init_percentile}th-percentile confidence filter")
    mu = pts[sel]
    color = np.asarray(images, dtype=np.float64)[frames].reshape(-1, 3)[sel]
    M = np.asarray(frame_masks, dtype=np.float64)[frames].reshape(-1)[sel]
    tree = cKDTree(mu)
    k = min(4, len(mu))
    if k > 1:
        dist, _ = tree.query(mu, k=k)
        scale = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)
    else:
        scale = np.full(len(mu), 1e-2)
    n = len(mu)
    return GaussianCloud(
        mu=mu,
        log_scale=np.repeat(np.log(scale)[:, None], 3, axis=1),
        rotation=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        color=color,
        opacity_logit=np.full(n, logit(1.0 / N)),
        staticness_logit=staticness_to_logit(1.0 - M, cfg.staticness_eps),
        source_frame=frames[sel // (H * W)],
        source_pixel=sel % (H * W),
    )


# ---------------------------------------------------------------------------
# losses


def loss_image(rendered: np.ndarray, gt: np.ndarray, S: np.ndarray, form: LossForm = "masked") -> float:
    return loss_image_and_grad(rendered, gt, S, form)[0]


def loss_image_and_grad(rendered, gt, S, form: LossForm = "masked"):
    """Mean over pixels of the per-pixel RGB L1 norm, staticness weighted."""
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if rendered.shape != gt.shape or rendered.shape[:2] != S.shape:
        raise ValueError(f"shape mismatch: rendered {rendered.shape}, gt {gt.shape}, staticness {S.shape}")
    npix = S.size
    if form == "masked":
        diff = rendered - gt
        return float(np.sum(S[..., None] * np.abs(diff)) / npix), S[..., None] * np.sign(diff) / npix
    if form == "literal":
        diff = rendered - S[..., None] * gt
        return float(np.sum(np.abs(diff)) / npix), np.sign(diff) / npix
    raise ValueError(f"unknown loss form {form!r}")


def frame_loss(rendered, gt, S, cfg: TrainConfig):
    """Pixel term plus ``lambda_ssim * (1 - SSIM)``; returns (total, l1, 1 - ssim, dL/drendered)."""
    l1, g = loss_image_and_grad(rendered, gt, S, cfg.loss_form)
    if cfg.lambda_ssim == 0:
        return l1, l1, 0.0, g
    if cfg.loss_form == "masked":
        s, gs = ssim_and_grad(rendered, gt, S)
    else:
        s, gs = ssim_and_grad(rendered, S[..., None] * gt)
    return l1 + cfg.lambda_ssim * (1 - s), l1, 1 - s, g - cfg.lambda_ssim * gs


# ---------------------------------------------------------------------------
# optimization


class _Adam:
    def __init__(self, shape, lr: float, beta1=0.9, beta2=0.999, eps=1e-15):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr = lr
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray, lr: float | None = None) -> None:
        self.t += 1
        self.m *= self.b1
        self.m += (1 - self.b1) * grad
        self.v *= self.b2
        self.v += (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        param -= (self.lr if lr is None else lr) * mhat / (np.sqrt(vhat) + self.eps)


class _PoseOpt:
    def __init__(self, pose: Pose, cfg: TrainConfig):
        self.q = pose.q.copy()
        self.t = pose.t.copy()
        self.aq = _Adam(4, cfg.lr_pose_rot)
        self.at = _Adam(3, cfg.lr_pose_trans)

    def pose(self) -> Pose:
        return Pose(self.q.copy(), self.t.copy())

    def step(self, gq, gt) -> None:
        self.aq.step(self.q, gq)
        self.at.step(self.t, gt)
        self.q = quat_normalize(self.q)


def scene_extent(poses: list[Pose]) -> float:
    centers = np.stack([p.t for p in poses])
    ext = 1.1 * float(np.max(np.linalg.norm(centers - centers.mean(0), axis=1)))
    return ext if ext > 1e-6 else 1.0


@dataclass
class TrainResult:
    cloud: GaussianCloud
    poses: list[Pose]  # one per frame; only train frames change
    trace: list[tuple[int, float, float, float]]  # iteration, total, l1, 1 - ssim


def train(cloud: GaussianCloud, data: FrameDataset, cfg: TrainConfig,
          callback: Callable[[int, float], None] | None = None) -> TrainResult:
    cfg.validate()
    cloud = cloud.copy()
    poses = list(data.poses)
    train_idx = data.train_index
    if cfg.iterations > 0 and len(train_idx) == 0:
        raise ValueError("training split is empty")
    rng = np.random.default_rng(cfg.seed)
    cov_world = cloud.covariance()
    extent = scene_extent(poses)
    opt_mu = _Adam(cloud.mu.shape, cfg.lr_mu * extent)
    opt_op = _Adam(cloud.opacity_logit.shape, cfg.lr_opacity)
    opt_st = _Adam(cloud.staticness_logit.shape, cfg.lr_staticness)
    bound = float(logit(1.0 - cfg.staticness_eps))
    pose_opts: dict[int, _PoseOpt] = {}
    trace = []
    for it in range(cfg.iterations):
        f = int(train_idx[rng.integers(len(train_idx))])
        ctx = render_forward(cloud, poses[f], data.intr, "staticness", cov_world)
        total, l1, dssim, g_img = frame_loss(ctx.result.image, data.images[f], data.staticness[f], cfg)
        if not math.isfinite(total):
            raise TrainingDiverged(it)
        trace.append((it, total, l1, dssim))
        if callback is not None:
            callback(it, total)
        grads = render_backward(ctx, g_img, geometry_grads=False)
        opt_mu.step(cloud.mu, grads.mu)
        opt_op.step(cloud.opacity_logit, grads.opacity_logit)
        if cfg.optimize_staticness:
            opt_st.step(cloud.staticness_logit, grads.staticness_logit)
            np.clip(cloud.staticness_logit, -bound, bound, out=cloud.staticness_logit)
        if cfg.refine_poses:
            po = pose_opts.setdefault(f, _PoseOpt(poses[f], cfg))
            po.step(grads.pose_q, grads.pose_t)
            poses[f] = po.pose()
    return TrainResult(cloud, poses, trace)


def refine_test_poses(cloud: GaussianCloud, images: np.ndarray, poses: list[Pose], staticness: np.ndarray,
                      intr: Intrinsics, cfg: TrainConfig) -> list[Pose]:
    """Optimize each test pose against the frozen cloud; keeps the lowest-loss iterate per frame."""
    out = []
    cov_world = cloud.covariance()
    for img, pose, S in zip(images, poses, staticness):
        po = _PoseOpt(pose, cfg)
        best = (math.inf, pose)
        for it in range(cfg.refine_test_iterations + 1):
            current = po.pose()
            ctx = render_forward(cloud, current, intr, "staticness", cov_world)
            total, _, _, g_img = frame_loss(ctx.result.image, img, S, cfg)
            if not math.isfinite(total):
                raise TrainingDiverged(it)
            if total < best[0]:
                best = (total, current)
            if it == cfg.refine_test_iterations:
                break
            grads = render_backward(ctx, g_img, geometry_grads=False)
            po.step(grads.pose_q, grads.pose_t)
        out.append(best[1])
    return out


def prune_low_staticness(cloud: GaussianCloud, threshold: float = 0.5) -> GaussianCloud:
    """Drop Gaussians whose staticness is below ``threshold`` (export only)."""
    return cloud.subset(cloud.staticness >= threshold)
