"""Evaluation metrics: masked PSNR, masked SSIM, trajectory errors and the train/test split."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation

from .geometry import Pose, relative_pose, rotation_angle, umeyama
from .masks import DEFAULT_IOU_THRESHOLD
from .ssim import ssim

PSNR_CAP = 99.0
TEST_EVERY = 10


def static_region(dynamic_mask: np.ndarray, threshold: float = DEFAULT_IOU_THRESHOLD, dilation: int = 0) -> np.ndarray:
    """Pixels counted as static; ``dilation`` grows the dynamic set by that many 4-connected steps."""
    dyn = np.asarray(dynamic_mask, dtype=np.float64) >= threshold
    if dilation > 0:
        dyn = binary_dilation(dyn, iterations=dilation)
    return ~dyn


def masked_psnr(rendered, gt, dynamic_mask, threshold: float = DEFAULT_IOU_THRESHOLD, dilation: int = 0,
                cap: float = PSNR_CAP) -> float:
    """PSNR (peak 1) over pixels whose dynamic probability is below ``threshold``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape or rendered.shape[:2] != np.shape(dynamic_mask):
        raise ValueError(f"shape mismatch: rendered {rendered.shape}, gt {gt.shape}, mask {np.shape(dynamic_mask)}")
    keep = static_region(dynamic_mask, threshold, dilation)
    if not keep.any():
        raise ValueError("no static pixels left to evaluate")
    mse = float(np.mean((rendered[keep] - gt[keep]) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, -10.0 * math.log10(mse))


def masked_ssim(rendered, gt, dynamic_mask, threshold: float = DEFAULT_IOU_THRESHOLD, dilation: int = 0) -> float:
    keep = static_region(dynamic_mask, threshold, dilation)
    if not keep.any():
        raise ValueError("no static pixels left to evaluate")
    return ssim(rendered, gt, keep.astype(np.float64))


@dataclass(frozen=True)
class TrajectoryMetrics:
    ate: float
    rpe_trans: float
    rpe_rot: float  # degrees


def align_similarity(estimated: list[Pose], reference: list[Pose]) -> list[Pose]:
    """Estimated poses mapped by the similarity transform that best fits their centers to the reference."""
    src = np.stack([p.t for p in estimated])
    dst = np.stack([p.t for p in reference])
    R, t, s = umeyama(src, dst, with_scale=True)
    return [Pose.from_matrix(np.block([[R @ p.R, (s * R @ p.t + t)[:, None]], [np.zeros((1, 3)), np.ones((1, 1))]]))
            for p in estimated]


def trajectory_metrics(estimated: list[Pose], reference: list[Pose]) -> TrajectoryMetrics:
    """RMSE of ATE and per-step RPE after similarity alignment of ``estimated`` onto ``reference``."""
    if len(estimated) != len(reference):
        raise ValueError(f"trajectory lengths differ: {len(estimated)} vs {len(reference)}")
    if len(estimated) < 2:
        raise ValueError("need at least 2 poses")
    aligned = align_similarity(estimated, reference)
    err = np.stack([a.t - r.t for a, r in zip(aligned, reference)])
    ate = float(np.sqrt(np.mean(np.sum(err**2, axis=1))))
    dt, dr = [], []
    for i in range(len(reference) - 1):
        rel_ref = relative_pose(reference[i], reference[i + 1])
        rel_est = relative_pose(aligned[i], aligned[i + 1])
        E = rel_ref.inverse().compose(rel_est)
        dt.append(float(np.linalg.norm(E.t)))
        dr.append(math.degrees(rotation_angle(E.R)))
    return TrajectoryMetrics(ate, float(np.sqrt(np.mean(np.square(dt)))), float(np.sqrt(np.mean(np.square(dr)))))


def split_frames(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Every tenth frame (index 9 mod 10) is held out; fewer than 10 frames keeps everything for training."""
    idx = np.arange(n)
    if n < TEST_EVERY:
        warnings.warn(f"only {n} frames; using all of them for training and none for testing", stacklevel=2)
        return idx, idx[:0]
    test = idx % TEST_EVERY == TEST_EVERY - 1
    return idx[~test], idx[test]


METRIC_COLUMNS = ("sequence", "psnr", "ssim", "iou", "ate", "rpe_trans", "rpe_rot")
