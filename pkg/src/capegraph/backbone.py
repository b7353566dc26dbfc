"""Small strided CNN feature extractor and Gaussian-mask support pooling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import ParamSet

STRIDE = 8


class DegenerateMaskError(ValueError):
    pass


@dataclass
class FeatureMap:
    height: int
    width: int
    data: Tensor  # (h*w, C), row-major cells

    @property
    def channels(self) -> int:
        return self.data.shape[1]


@dataclass
class SupportFeatures:
    data: Tensor  # (K, C), invalid rows zero
    valid: np.ndarray


def channel_plan(in_channels: int, channels: int) -> list[int]:
    return [in_channels, channels // 4, channels // 2, channels]


def init_backbone(p: ParamSet, rng: np.random.Generator, in_channels: int, channels: int) -> None:
    plan = channel_plan(in_channels, channels)
    for i, (cin, cout) in enumerate(zip(plan[:-1], plan[1:]), start=1):
        p[f"backbone.conv{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), size=(3, 3, cin, cout))
        p[f"backbone.conv{i}.b"] = np.zeros(cout)


def extract_features(image: np.ndarray, params: Mapping[str, Tensor]) -> FeatureMap:
    """Three 3x3 stride-2 conv + relu blocks, flattened to ``(h*w, C)``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    h_img, w_img = image.shape[:2]
    if h_img % STRIDE or w_img % STRIDE:
        raise ValueError(f"image {h_img}x{w_img} not divisible by stride {STRIDE}")
    x = Tensor(image)
    for i in (1, 2, 3):
        x = ad.relu(ad.conv2d(x, params[f"backbone.conv{i}.w"], params[f"backbone.conv{i}.b"]))
    h, w, c = x.shape
    return FeatureMap(h, w, ad.reshape(x, (h * w, c)))


def gaussian_masks(keypoints: np.ndarray, h: int, w: int, variance: float = 1.0,
                   valid: np.ndarray | None = None, stride: int = STRIDE) -> np.ndarray:
    """Per-keypoint Gaussian masks on the feature grid, shape ``(K, h, w)``.

    Pixel keypoints map to grid units as ``px / stride - 0.5`` so that a
    keypoint at a cell's pixel center lands exactly on that cell.
    """
    if variance <= 0:
        raise ValueError("mask variance must be positive")
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2) / stride - 0.5
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    d2 = (xs[None] - kp[:, 0, None, None]) ** 2 + (ys[None] - kp[:, 1, None, None]) ** 2
    masks = np.exp(-d2 / (2.0 * variance))
    if valid is not None:
        masks[~np.asarray(valid, dtype=bool)] = 0.0
    return masks


def pool_support_features(fmap: FeatureMap, masks: np.ndarray, valid: np.ndarray) -> SupportFeatures:
    """Mask-weighted mean of feature cells per keypoint; invalid rows are zero."""
    valid = np.asarray(valid, dtype=bool)
    k = masks.shape[0]
    if masks.shape[1:] != (fmap.height, fmap.width):
        raise ValueError(f"mask grid {masks.shape[1:]} != feature grid {(fmap.height, fmap.width)}")
    weights = masks.reshape(k, -1).astype(np.float64)
    mass = weights.sum(axis=1)
    bad = np.nonzero(valid & ~(mass > 0))[0]
    if bad.size:
        raise DegenerateMaskError(f"zero-mass mask for valid keypoints {bad.tolist()}")
    weights = np.where(valid[:, None], weights / np.where(mass > 0, mass, 1.0)[:, None], 0.0)
    return SupportFeatures(ad.matmul(weights, fmap.data), valid.copy())


def average_shots(shots: Sequence[SupportFeatures]) -> SupportFeatures:
    """Per-keypoint mean over the shots where that keypoint is valid.

    Computed as ``ref + sum_s w_s (x_s - ref)`` with ``ref`` the first valid
    shot, so identical shots reproduce a single shot bit for bit.
    """
    if not shots:
        raise ValueError("average_shots needs at least one shot")
    shapes = {s.data.shape for s in shots}
    if len(shapes) != 1:
        raise ValueError(f"shots disagree on (K, C): {sorted(shapes)}")
    if len(shots) == 1:
        return shots[0]
    k, c = shots[0].data.shape
    valid = np.stack([s.valid for s in shots]).astype(bool)  # (S, K)
    count = valid.sum(axis=0)
    union = count > 0
    first = np.argmax(valid, axis=0)
    ref = None
    for s, shot in enumerate(shots):
        pick = union & (first == s)
        if not pick.any():
            continue
        term = ad.mul(shot.data, np.repeat(pick[:, None].astype(float), c, axis=1))
        ref = term if ref is None else ad.add(ref, term)
    if ref is None:
        return SupportFeatures(Tensor(np.zeros((k, c))), union)
    out = ref
    for s, shot in enumerate(shots):
        w = np.where(valid[s] & union & (first != s), 1.0 / np.maximum(count, 1), 0.0)
        if not w.any():
            continue
        out = ad.add(out, ad.mul(ad.sub(shot.data, ref), np.repeat(w[:, None], c, axis=1)))
    return SupportFeatures(out, union)
