"""Similarity maps between support keypoints and query patches, and their peaks."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import ParamSet


def init_proposal(p: ParamSet, rng: np.random.Generator, channels: int) -> None:
    p["proposal.w_sim"] = np.eye(channels) + rng.normal(0.0, 0.01, size=(channels, channels))


def similarity(f_s: Tensor, f_q: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Bilinear logits ``F_s W F_q^T / sqrt(C)``, shape ``(K, h*w)``."""
    c = f_s.shape[1]
    if f_q.shape[1] != c:
        raise ad.ShapeError(f"similarity: channel mismatch {f_s.shape} vs {f_q.shape}")
    return ad.scale(ad.matmul(ad.matmul(f_s, params["proposal.w_sim"]), f_q, trans_b=True),
                    1.0 / np.sqrt(c))


def peak_select(maps: np.ndarray, h: int, w: int) -> np.ndarray:
    """Normalized pixel-center coordinates of each map's first maximum, ``(K, 2)``."""
    maps = np.asarray(maps, dtype=np.float64).reshape(-1, h * w)
    idx = np.argmax(maps, axis=1)
    row, col = np.divmod(idx, w)
    return np.stack([(col + 0.5) / w, (row + 0.5) / h], axis=1)
