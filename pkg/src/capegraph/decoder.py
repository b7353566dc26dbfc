"""Graph transformer decoder with iterative coordinate refinement.

Each layer: keypoint self-attention, cross-attention into query patches using
the current coordinates as a localization embedding, a graph-convolutional
feed-forward over the skeleton, and a logit-space coordinate update.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import (ParamSet, grid_centers, init_attention, init_linear, init_norm, linear,
                 mask_rows, multi_head_attention, norm, sine_embed)

COORD_EPS = 1e-3
# sigmoid of +-30 is still representably inside (0, 1) in float64
LOGIT_LIMIT = 30.0


def init_decoder(p: ParamSet, rng: np.random.Generator, channels: int, layers: int = 3) -> None:
    c = channels
    for l in range(layers):
        pre = f"decoder.{l}"
        init_attention(p, f"{pre}.self_attn", rng, c)
        init_norm(p, f"{pre}.norm1", c)
        init_linear(p, f"{pre}.fuse", rng, 2 * c, c)
        init_attention(p, f"{pre}.cross_attn", rng, c)
        init_norm(p, f"{pre}.norm2", c)
        p[f"{pre}.gcn.w_adj"] = _xavier_square(rng, c)
        p[f"{pre}.gcn.w_self"] = _xavier_square(rng, c)
        init_linear(p, f"{pre}.gcn.linear", rng, c, c)
        init_norm(p, f"{pre}.norm3", c)
        init_linear(p, f"{pre}.delta1", rng, c, c)
        init_linear(p, f"{pre}.delta2", rng, c, 2, zero=True)


def _xavier_square(rng, c):
    bound = np.sqrt(3.0 / c)
    return rng.uniform(-bound, bound, size=(c, c))


@dataclass
class DecoderState:
    features: Tensor
    coords: np.ndarray
    feature_history: list[Tensor] = field(default_factory=list)
    coord_history: list[Tensor] = field(default_factory=list)
    attention: list[np.ndarray] = field(default_factory=list)  # per layer (K, h*w)
    grid: tuple[int, int] = (0, 0)

    @property
    def layers(self) -> int:
        return len(self.coord_history)


def decoder_self_attention(f: Tensor, valid: np.ndarray, params: Mapping[str, Tensor],
                           prefix: str, heads: int = 4) -> Tensor:
    attn, _ = multi_head_attention(f, f, f, params, f"{prefix}.self_attn", heads, valid)
    return mask_rows(norm(ad.add(f, attn), params, f"{prefix}.norm1"), valid)


def _check_unit(coords: np.ndarray) -> None:
    if not (np.all(coords > 0.0) and np.all(coords < 1.0)):
        raise ValueError("keypoint coordinates must lie strictly inside (0, 1)^2")


def decoder_cross_attention(f: Tensor, coords: np.ndarray, f_q: Tensor, h: int, w: int,
                            valid: np.ndarray, params: Mapping[str, Tensor], prefix: str,
                            heads: int = 4, key_pos: np.ndarray | None = None
                            ) -> tuple[Tensor, np.ndarray]:
    """Keypoint queries attend over query patches; returns features and (K, h*w) weights."""
    coords = np.asarray(coords, dtype=np.float64)
    _check_unit(coords)
    c = f.shape[1]
    queries = linear(ad.concat_cols([f, sine_embed(coords, c)]), params, f"{prefix}.fuse")
    if key_pos is None:
        key_pos = sine_embed(grid_centers(h, w), c)
    keys = ad.add(f_q, key_pos)
    out, weights = multi_head_attention(queries, keys, f_q, params, f"{prefix}.cross_attn",
                                        heads, np.ones(h * w, dtype=bool))
    return mask_rows(norm(ad.add(f, out), params, f"{prefix}.norm2"), valid), weights


def gcn_residual(f: Tensor, adj_norm: np.ndarray, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    """``F + linear(relu(A F W_adj + F W_self))`` on row-major ``(K, C)`` features."""
    k = f.shape[0]
    if adj_norm.shape != (k, k):
        raise ad.ShapeError(f"gcn: adjacency {adj_norm.shape} does not match K={k}")
    mixed = ad.matmul(ad.matmul(adj_norm, f), params[f"{prefix}.gcn.w_adj"])
    own = ad.matmul(f, params[f"{prefix}.gcn.w_self"])
    hidden = ad.relu(ad.add(mixed, own))
    return ad.add(f, linear(hidden, params, f"{prefix}.gcn.linear"))


def gcn_ffn(f: Tensor, adj_norm: np.ndarray, valid: np.ndarray, params: Mapping[str, Tensor],
            prefix: str) -> Tensor:
    out = norm(gcn_residual(f, adj_norm, params, prefix), params, f"{prefix}.norm3")
    return mask_rows(out, valid)


def inverse_sigmoid(p: np.ndarray, eps: float = COORD_EPS) -> np.ndarray:
    p = np.clip(p, eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


def update_coords(coords: np.ndarray, f: Tensor, valid: np.ndarray,
                  params: Mapping[str, Tensor], prefix: str) -> Tensor:
    """``sigmoid(logit(clamp(P)) + MLP(F))``; invalid keypoints keep ``P`` exactly.

    The summed logit is limited to +-LOGIT_LIMIT so the result never rounds
    to 0 or 1.
    """
    delta = linear(ad.relu(linear(f, params, f"{prefix}.delta1")), params, f"{prefix}.delta2")
    logit = ad.clip(ad.add(delta, inverse_sigmoid(coords)), -LOGIT_LIMIT, LOGIT_LIMIT)
    new = ad.sigmoid(logit)
    valid = np.asarray(valid, dtype=bool)
    if valid.all():
        return new
    keep = np.repeat(valid[:, None].astype(float), 2, axis=1)
    return ad.add(ad.mul(new, keep), np.where(keep > 0, 0.0, coords))


def decoder_layer(f: Tensor, coords: np.ndarray, f_q: Tensor, h: int, w: int, adj_norm: np.ndarray,
                  valid: np.ndarray, params: Mapping[str, Tensor], prefix: str, heads: int = 4,
                  key_pos: np.ndarray | None = None) -> tuple[Tensor, Tensor, np.ndarray]:
    """One refinement layer; returns (features, new coordinates, cross-attention)."""
    f = decoder_self_attention(f, valid, params, prefix, heads)
    f, attn = decoder_cross_attention(f, coords, f_q, h, w, valid, params, prefix, heads, key_pos)
    f = gcn_ffn(f, adj_norm, valid, params, prefix)
    return f, update_coords(coords, f, valid, params, prefix), attn


def decode(f_s: Tensor, proposals: np.ndarray, f_q: Tensor, h: int, w: int, adj_norm: np.ndarray,
           valid: np.ndarray, params: Mapping[str, Tensor], layers: int = 3,
           heads: int = 4) -> DecoderState:
    """Run ``layers`` refinement layers starting from the proposals.

    Coordinates are treated as constants between layers; gradients flow
    through each layer's delta head only.
    """
    valid = np.asarray(valid, dtype=bool)
    key_pos = sine_embed(grid_centers(h, w), f_s.shape[1])
    state = DecoderState(f_s, np.array(proposals, dtype=np.float64), grid=(h, w))
    f, coords = f_s, state.coords
    for l in range(layers):
        f, new, attn = decoder_layer(f, coords, f_q, h, w, adj_norm, valid, params, f"decoder.{l}",
                                     heads, key_pos)
        coords = new.data.copy()
        state.feature_history.append(f)
        state.coord_history.append(new)
        state.attention.append(attn)
    state.features, state.coords = f, coords
    return state


def export_attention(state: DecoderState, layer: int) -> np.ndarray:
    """Stored cross-attention of one layer as ``(K, h, w)`` grids."""
    if not 0 <= layer < state.layers:
        raise IndexError(f"layer {layer} out of range for {state.layers} decoder layers")
    h, w = state.grid
    return state.attention[layer].reshape(-1, h, w)
