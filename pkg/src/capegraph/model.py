"""End-to-end pose model: backbone, encoder, proposals, graph decoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .annotations import Episode
from .autodiff import Tensor
from .backbone import (STRIDE, SupportFeatures, average_shots, extract_features, gaussian_masks,
                       init_backbone, pool_support_features)
from .decoder import DecoderState, decode, init_decoder
from .encoder import encode, init_encoder
from .graph import Skeleton, build_adjacency, normalize_adjacency
from .nn import ParamSet
from .objectives import gt_heatmaps, heatmap_loss, offset_loss, total_loss
from .proposals import init_proposal, peak_select, similarity


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 128
    channels: int = 64
    in_channels: int = 1
    encoder_layers: int = 3
    decoder_layers: int = 3
    heads: int = 4
    mask_variance: float = 1.0
    heatmap_sigma: float = 2.0
    lambda_heatmap: float = 2.0
    use_graph: bool = True

    @property
    def grid(self) -> int:
        return self.image_size // STRIDE


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamSet:
    rng = np.random.default_rng(seed)
    p = ParamSet()
    init_backbone(p, rng, cfg.in_channels, cfg.channels)
    init_encoder(p, rng, cfg.channels, cfg.encoder_layers)
    init_proposal(p, rng, cfg.channels)
    init_decoder(p, rng, cfg.channels, cfg.decoder_layers)
    return p


def masked_adjacency(skeleton: Skeleton, valid: np.ndarray) -> np.ndarray:
    """Normalized adjacency after dropping every edge that touches an invalid keypoint."""
    v = np.asarray(valid, dtype=float)
    return normalize_adjacency(build_adjacency(skeleton) * v[:, None] * v[None, :])


@dataclass
class Prediction:
    similarity: Tensor  # (K, h*w) logits
    proposals: np.ndarray  # (K, 2) normalized
    state: DecoderState
    valid: np.ndarray  # keypoints with a support feature

    @property
    def coords(self) -> np.ndarray:
        return self.state.coords

    def pixels(self, image_size: int) -> np.ndarray:
        return self.state.coords * image_size


def support_features(images, keypoints, valids, params: Mapping[str, Tensor],
                     cfg: ModelConfig) -> SupportFeatures:
    shots = []
    for img, kp, v in zip(images, keypoints, valids):
        fmap = extract_features(img, params)
        masks = gaussian_masks(kp, fmap.height, fmap.width, cfg.mask_variance, v)
        shots.append(pool_support_features(fmap, masks, v))
    return average_shots(shots)


def forward(episode: Episode, params: Mapping[str, Tensor], cfg: ModelConfig,
            skeleton: Skeleton | None = None) -> Prediction:
    """Predict query keypoints for ``episode``; ``skeleton`` overrides the episode's graph."""
    sup = support_features(episode.support_images, episode.support_keypoints,
                           episode.support_valid, params, cfg)
    valid = sup.valid
    if not valid.any():
        raise ValueError("no support keypoint is valid")
    fq = extract_features(episode.query_image, params)
    h, w = fq.height, fq.width
    f_s, f_q = encode(sup.data, fq.data, valid, params, h, w, cfg.encoder_layers, cfg.heads)
    sim = similarity(f_s, f_q, params)
    props = peak_select(sim.data, h, w)
    k = len(valid)
    if cfg.use_graph:
        adj = masked_adjacency(skeleton or episode.skeleton, valid)
    else:
        adj = np.zeros((k, k))
    state = decode(f_s, props, f_q, h, w, adj, valid, params, cfg.decoder_layers, cfg.heads)
    return Prediction(sim, props, state, valid)


def episode_loss(pred: Prediction, episode: Episode, cfg: ModelConfig):
    """Scalar training loss tensor plus its heatmap and offset parts."""
    valid = pred.valid & episode.valid
    h = w = cfg.grid
    target = gt_heatmaps(episode.query_keypoints, valid, h, w, cfg.heatmap_sigma, STRIDE)
    hm = heatmap_loss(pred.similarity, target, valid)
    gt = episode.query_keypoints / cfg.image_size
    if pred.state.coord_history:
        off = offset_loss(pred.state.coord_history, gt, valid)
    else:
        off = Tensor(0.0)
    return total_loss(hm, off, cfg.lambda_heatmap), hm, off
