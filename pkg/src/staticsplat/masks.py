"""Dynamic-mask aggregation, staticness maps and mask scoring."""

from __future__ import annotations

from typing import Mapping

import numpy as np

DEFAULT_IOU_THRESHOLD = 0.5


def _check_prob(values: np.ndarray, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"{what} must be a 2-D grid, got shape {values.shape}")
    if not np.all((values >= 0.0) & (values <= 1.0)):
        raise ValueError(f"{what} values must lie in [0, 1]")
    return values


def aggregate_masks(edges, pair_masks: Mapping[tuple[int, int], np.ndarray], t: int) -> np.ndarray:
    """Per-pixel mean of the pair masks on edges whose first frame is ``t``.

    ``edges`` is any iterable of ordered ``(n, m)`` pairs (a :class:`FrameGraph`
    works); ``pair_masks`` maps each edge to its soft mask for frame ``n``.
    """
    selected = [e for e in edges if e[0] == t]
    if not selected:
        raise ValueError(f"frame {t} is not the first frame of any edge; cannot aggregate its mask")
    acc = None
    for e in selected:
        m = _check_prob(pair_masks[e], f"pair mask {e}")
        acc = m.copy() if acc is None else acc + m
    return acc / len(selected)


def aggregate_all(edges, pair_masks, num_frames: int) -> np.ndarray:
    """Stack of aggregated masks for frames ``0..num_frames-1``."""
    edges = list(edges)
    return np.stack([aggregate_masks(edges, pair_masks, t) for t in range(num_frames)])


def staticness_from_mask(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if not np.all((m >= 0.0) & (m <= 1.0)):
        raise ValueError("mask values must lie in [0, 1]")
    return 1.0 - m


def binarize(m: np.ndarray, threshold: float = DEFAULT_IOU_THRESHOLD) -> np.ndarray:
    """Dynamic where the probability reaches ``threshold``."""
    return np.asarray(m) >= threshold


def mask_iou(pred: np.ndarray, gt: np.ndarray, threshold: float = DEFAULT_IOU_THRESHOLD) -> float:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = binarize(pred, threshold)
    g = binarize(gt, threshold)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def mask_from_uint8(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


def mask_to_uint8(m: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(m) * 255.0), 0, 255).astype(np.uint8)
