"""Heatmap and offset losses, ground-truth heatmaps, and PCK."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LAMBDA_HEATMAP = 2.0
PCK_THRESHOLD = 0.2


class UndefinedLossError(ValueError):
    """No valid keypoint to average over."""


@dataclass
class LossReport:
    heatmap_loss: float
    offset_loss: float
    total: float
    lambda_heatmap: float


def gt_heatmaps(keypoints: np.ndarray, valid: np.ndarray, h: int, w: int, sigma: float = 2.0,
                stride: int = 8) -> np.ndarray:
    """Gaussian bumps of height 1 centered on each keypoint's cell, ``(K, h, w)``."""
    if sigma <= 0:
        raise ValueError("heatmap sigma must be positive")
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    col = np.clip(np.floor(kp[:, 0] / stride), 0, w - 1)
    row = np.clip(np.floor(kp[:, 1] / stride), 0, h - 1)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    d2 = (xs[None] - col[:, None, None]) ** 2 + (ys[None] - row[:, None, None]) ** 2
    maps = np.exp(-d2 / (2.0 * sigma * sigma))
    maps[~np.asarray(valid, dtype=bool)] = 0.0
    return maps


def _valid_count(valid) -> int:
    n = int(np.count_nonzero(valid))
    if n == 0:
        raise UndefinedLossError("no valid keypoints")
    return n


def heatmap_loss(logits: Tensor, target: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean squared error between sigmoid(logits) and the target over valid maps."""
    k, hw = logits.shape
    target = np.asarray(target, dtype=np.float64).reshape(k, -1)
    if target.shape != (k, hw):
        raise ad.ShapeError(f"heatmap_loss: logits {logits.shape} vs target {target.shape}")
    n = _valid_count(valid)
    diff = ad.sub(ad.sigmoid(logits), target)
    sq = ad.mul(diff, diff)
    if not np.all(valid):
        sq = ad.mul(sq, np.repeat(np.asarray(valid, float)[:, None], hw, axis=1))
    return ad.scale(ad.total(sq), 1.0 / (n * hw))


def offset_loss(history: Sequence[Tensor], target: np.ndarray, valid: np.ndarray) -> Tensor:
    """L1 between every layer's coordinates and the target, averaged over layers and keypoints."""
    if not history:
        raise ValueError("offset_loss needs at least one layer")
    n = _valid_count(valid)
    target = np.asarray(target, dtype=np.float64)
    mask = np.repeat(np.asarray(valid, float)[:, None], 2, axis=1)
    acc = None
    for coords in history:
        err = ad.total(ad.mul(ad.absolute(ad.sub(coords, target)), mask))
        acc = err if acc is None else ad.add(acc, err)
    return ad.scale(acc, 1.0 / (len(history) * n))


def total_loss(heatmap, offset, lambda_heatmap: float = LAMBDA_HEATMAP):
    """``lambda * heatmap + offset``; works on floats or scalar tensors."""
    if isinstance(heatmap, Tensor) or isinstance(offset, Tensor):
        return ad.add(ad.scale(heatmap, lambda_heatmap), offset)
    return lambda_heatmap * heatmap + offset


def pck(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray, bbox, threshold: float = PCK_THRESHOLD) -> float:
    """Fraction of valid keypoints within ``threshold * max(bbox w, h)`` pixels."""
    correct, n = pck_counts(pred, gt, valid, bbox, threshold)
    if n == 0:
        raise UndefinedLossError("PCK undefined without valid keypoints")
    return correct / n


def pck_counts(pred, gt, valid, bbox, threshold: float = PCK_THRESHOLD) -> tuple[int, int]:
    if threshold <= 0:
        raise ValueError("PCK threshold must be positive")
    _, _, bw, bh = bbox
    if bw <= 0 or bh <= 0:
        raise ValueError("bounding box needs positive extents")
    valid = np.asarray(valid, dtype=bool)
    dist = np.linalg.norm(np.asarray(pred, float) - np.asarray(gt, float), axis=1)
    hit = dist <= threshold * max(bw, bh)
    return int(np.count_nonzero(hit & valid)), int(np.count_nonzero(valid))
