"""Joint support/query transformer encoder.

Support keypoint tokens and query patch tokens are stacked into one sequence,
run through post-norm self-attention blocks, and split apart again. Keypoint
tokens get no positional signal, so the encoder is equivariant to keypoint
order; patch tokens get a 2D sine encoding on their queries and keys.
"""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import (ParamSet, grid_centers, init_attention, init_linear, init_norm, linear,
                 mask_rows, multi_head_attention, norm, sine_embed)


def init_encoder(p: ParamSet, rng: np.random.Generator, channels: int, layers: int = 3,
                 expansion: int = 4) -> None:
    for b in range(layers):
        pre = f"encoder.{b}"
        init_attention(p, f"{pre}.attn", rng, channels)
        init_norm(p, f"{pre}.norm1", channels)
        init_linear(p, f"{pre}.ffn1", rng, channels, expansion * channels)
        init_linear(p, f"{pre}.ffn2", rng, expansion * channels, channels)
        init_norm(p, f"{pre}.norm2", channels)


def encoder_block(x: Tensor, pos: np.ndarray, key_mask: np.ndarray, params: Mapping[str, Tensor],
                  prefix: str, heads: int = 4) -> Tensor:
    """One post-norm block over the stacked sequence; masked rows come out zero."""
    qk = ad.add(x, pos)
    attn, _ = multi_head_attention(qk, qk, x, params, f"{prefix}.attn", heads, key_mask)
    x = norm(ad.add(x, attn), params, f"{prefix}.norm1")
    ff = linear(ad.relu(linear(x, params, f"{prefix}.ffn1")), params, f"{prefix}.ffn2")
    x = norm(ad.add(x, ff), params, f"{prefix}.norm2")
    return mask_rows(x, key_mask)


def sequence_layout(k: int, valid: np.ndarray, h: int, w: int, c: int) -> tuple[np.ndarray, np.ndarray]:
    """Positional rows and key mask for ``k`` keypoint tokens followed by ``h*w`` patches."""
    pos = np.concatenate([np.zeros((k, c)), sine_embed(grid_centers(h, w), c)])
    return pos, np.concatenate([valid, np.ones(h * w, dtype=bool)])


def encode(support: Tensor, query: Tensor, valid: np.ndarray, params: Mapping[str, Tensor],
           h: int, w: int, layers: int = 3, heads: int = 4) -> tuple[Tensor, Tensor]:
    """Refine ``(K, C)`` support and ``(h*w, C)`` query features jointly."""
    k, c = support.shape
    if query.shape != (h * w, c):
        raise ad.ShapeError(f"encode: support {support.shape} vs query {query.shape} for {h}x{w} grid")
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != (k,):
        raise ValueError(f"valid mask has shape {valid.shape}, expected ({k},)")
    pos, key_mask = sequence_layout(k, valid, h, w, c)
    x = ad.concat_rows([support, query])
    for b in range(layers):
        x = encoder_block(x, pos, key_mask, params, f"encoder.{b}", heads)
    f_s, f_q = ad.split_rows(x, [k, h * w])
    return f_s, f_q
