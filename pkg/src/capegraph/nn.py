"""Parameter containers and the attention block shared by encoder and decoder."""
from __future__ import annotations

from collections.abc import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ParamSet(Mapping):
    """Ordered ``name -> float64 array`` store for every learnable tensor."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self.arrays: dict[str, np.ndarray] = {}
        for k, v in (arrays or {}).items():
            self.arrays[k] = np.array(v, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value) -> None:
        self.arrays[name] = np.array(value, dtype=np.float64)

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def size(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def copy(self) -> "ParamSet":
        return ParamSet(self.arrays)

    def equal(self, other: "ParamSet") -> bool:
        return list(self) == list(other) and all(
            np.array_equal(self[k], other[k]) for k in self)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_linear(p: ParamSet, name: str, rng, fan_in: int, fan_out: int, zero: bool = False) -> None:
    p[f"{name}.w"] = np.zeros((fan_in, fan_out)) if zero else xavier(rng, fan_in, fan_out)
    p[f"{name}.b"] = np.zeros(fan_out)


def init_norm(p: ParamSet, name: str, dim: int) -> None:
    p[f"{name}.gain"] = np.ones(dim)
    p[f"{name}.bias"] = np.zeros(dim)


def init_attention(p: ParamSet, name: str, rng, dim: int) -> None:
    for proj in ("q", "k", "v", "o"):
        init_linear(p, f"{name}.{proj}", rng, dim, dim)


def linear(x, params: Mapping[str, Tensor], name: str) -> Tensor:
    return ad.affine(x, params[f"{name}.w"], params[f"{name}.b"])


def norm(x, params: Mapping[str, Tensor], name: str) -> Tensor:
    return ad.layer_norm(x, params[f"{name}.gain"], params[f"{name}.bias"])


def multi_head_attention(q_in, k_in, v_in, params: Mapping[str, Tensor], name: str,
                         heads: int, key_mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention with ``heads`` heads.

    ``key_mask[j]`` False removes key ``j`` from every query's softmax.
    Returns the projected output and the head-averaged attention weights.
    """
    q = linear(q_in, params, f"{name}.q")
    k = linear(k_in, params, f"{name}.k")
    v = linear(v_in, params, f"{name}.v")
    dim = q.shape[1]
    if dim % heads:
        raise ad.ShapeError(f"attention width {dim} not divisible by {heads} heads")
    dh = dim // heads
    outs, weights = [], []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ad.slice_cols(q, lo, hi) if heads > 1 else q
        kh = ad.slice_cols(k, lo, hi) if heads > 1 else k
        vh = ad.slice_cols(v, lo, hi) if heads > 1 else v
        scores = ad.scale(ad.matmul(qh, kh, trans_b=True), 1.0 / np.sqrt(dh))
        attn = ad.softmax_masked(scores, key_mask)
        weights.append(attn.data)
        outs.append(ad.matmul(attn, vh))
    out = ad.concat_cols(outs) if heads > 1 else outs[0]
    return linear(out, params, f"{name}.o"), np.mean(weights, axis=0)


def row_mask(valid: np.ndarray, width: int) -> np.ndarray:
    return np.repeat(np.asarray(valid, dtype=np.float64)[:, None], width, axis=1)


def mask_rows(x: Tensor, valid: np.ndarray) -> Tensor:
    """Zero the rows of invalid keypoints (identity when all are valid)."""
    if np.all(valid):
        return x
    return ad.mul(x, row_mask(valid, x.shape[1]))


def sine_embed(coords: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of unit-square points, ``dim / 2`` channels per axis.

    Frequencies are geometric from 0.25 to 4 cycles per unit, so the finest
    band still resolves a 16-cell grid without aliasing.
    """
    if dim % 4:
        raise ValueError(f"embedding width must be divisible by 4, got {dim}")
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    n = dim // 4
    freqs = 2.0 * np.pi * np.geomspace(0.25, 4.0, n)
    parts = []
    for axis in (0, 1):
        ang = coords[:, axis:axis + 1] * freqs[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=1)


def grid_centers(h: int, w: int) -> np.ndarray:
    """Row-major normalized cell centers ``((col + .5) / w, (row + .5) / h)``."""
    rows, cols = np.divmod(np.arange(h * w), w)
    return np.stack([(cols + 0.5) / w, (rows + 0.5) / h], axis=1)
