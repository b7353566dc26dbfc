"""Finite-difference check of the full training loss against the tape gradient.

The tape treats proposals (an argmax) and the coordinates passed between
decoder layers as constants, so the numeric side evaluates the same
objective: those inputs stay frozen at their unperturbed values. Each
perturbed evaluation reruns only the stages downstream of the parameter,
reusing cached activations for everything upstream.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .annotations import Episode
from .autodiff import Tensor
from .backbone import STRIDE, extract_features
from .decoder import decoder_layer
from .encoder import encoder_block, sequence_layout
from .graph import Skeleton
from .model import ModelConfig, episode_loss, forward, masked_adjacency, support_features
from .nn import ParamSet, grid_centers, sine_embed
from .objectives import gt_heatmaps, heatmap_loss, offset_loss, total_loss
from .proposals import similarity


@dataclass
class ModelGradReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    per_param: dict[str, float]
    evaluations: int
    seconds: float
    tolerance: float
    one_sided: int = 0  # elements whose central stencil crossed a relu/abs/clip kink

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple]:
    """One scalar test function and input point per primitive (``(f, point)`` pairs)."""
    def r(*shape):
        return rng.standard_normal(shape)

    def fixed(seed, *shape):
        return np.random.default_rng(seed).standard_normal(shape)

    mask = np.array([True, False, True, True, False])
    return {
        "matmul": (lambda a, b: ad.total(ad.mul(ad.matmul(a, b), fixed(9, 3, 2))), [r(3, 4), r(4, 2)]),
        "matmul_t": (lambda a, b: ad.total(ad.sigmoid(ad.matmul(a, b, trans_b=True))), [r(3, 4), r(5, 4)]),
        "add": (lambda a, b: ad.total(ad.sigmoid(ad.add(a, b))), [r(2, 3), r(2, 3)]),
        "sub": (lambda a, b: ad.total(ad.sigmoid(ad.sub(a, b))), [r(2, 3), r(2, 3)]),
        "mul": (lambda a, b: ad.total(ad.mul(a, b)), [r(3, 3), r(3, 3)]),
        "scale": (lambda a: ad.total(ad.sigmoid(ad.scale(a, -1.7))), [r(4)]),
        "affine": (lambda x, w, b: ad.total(ad.sigmoid(ad.affine(x, w, b))), [r(3, 4), r(4, 5), r(5)]),
        "relu": (lambda x: ad.total(ad.mul(ad.relu(x), x)), [r(6)]),
        "sigmoid": (lambda x: ad.total(ad.mul(ad.sigmoid(x), x)), [r(6)]),
        "abs": (lambda x: ad.total(ad.mul(ad.absolute(x), x)), [r(6)]),
        "clip": (lambda x: ad.total(ad.mul(ad.clip(x, -0.5, 0.5), x)), [r(6)]),
        "softmax_masked": (lambda x: ad.total(ad.mul(ad.softmax_masked(x, mask), fixed(3, 4, 5))), [r(4, 5)]),
        "layer_norm": (lambda x, g, b: ad.total(ad.mul(ad.layer_norm(x, g, b), fixed(4, 3, 6))),
                       [r(3, 6), r(6), r(6)]),
        "concat_rows": (lambda a, b: ad.total(ad.sigmoid(ad.concat_rows([a, b]))), [r(2, 3), r(4, 3)]),
        "concat_cols": (lambda a, b: ad.total(ad.sigmoid(ad.concat_cols([a, b]))), [r(2, 3), r(2, 1)]),
        "split_rows": (lambda a: ad.total(ad.mul(*ad.split_rows(a, [2, 2]))), [r(4, 3)]),
        "slice_cols": (lambda a: ad.total(ad.sigmoid(ad.slice_cols(a, 1, 3))), [r(2, 4)]),
        "mean_rows": (lambda a: ad.total(ad.sigmoid(ad.mean_rows(a))), [r(5, 3)]),
        "reshape": (lambda a: ad.total(ad.mul(ad.reshape(a, (3, 2)), np.arange(6.0).reshape(3, 2))), [r(2, 3)]),
        "conv2d": (lambda x, w, b: ad.total(ad.mul(ad.sigmoid(ad.conv2d(x, w, b)), fixed(5, 4, 3, 3))),
                   [r(8, 6, 2), r(3, 3, 2, 3), r(3)]),
    }


class StagedLoss:
    """Training loss split at stage boundaries with cached stage inputs."""

    def __init__(self, episode: Episode, params: ParamSet, cfg: ModelConfig,
                 skeleton: Skeleton | None = None):
        self.cfg = cfg
        self.episode = episode
        base = forward(episode, params.leaves(requires_grad=False), cfg, skeleton)
        self.valid = base.valid
        self.loss_valid = base.valid & episode.valid
        self.frozen = [base.proposals] + [t.data.copy() for t in base.state.coord_history[:-1]]
        k = len(self.valid)
        self.adj = (masked_adjacency(skeleton or episode.skeleton, self.valid) if cfg.use_graph
                    else np.zeros((k, k)))
        self.h = self.w = cfg.grid
        self.target = gt_heatmaps(episode.query_keypoints, self.loss_valid, self.h, self.w,
                                  cfg.heatmap_sigma, STRIDE)
        self.gt = episode.query_keypoints / cfg.image_size
        self.key_pos = sine_embed(grid_centers(self.h, self.w), cfg.channels)
        self.stages = (["backbone"] + [f"encoder.{b}" for b in range(cfg.encoder_layers)]
                       + ["proposal"] + [f"decoder.{l}" for l in range(cfg.decoder_layers)])
        self.cache: dict[str, tuple] = {}
        self.base_loss = self.loss_from(0, params.arrays, fill=True)

    def stage_of(self, name: str) -> int:
        for i, s in enumerate(self.stages):
            if name.startswith(s + "."):
                return i
        raise KeyError(f"parameter {name!r} belongs to no stage")

    def loss_from(self, start: int, params, fill: bool = False) -> float:
        """Loss recomputed from stage ``start``; with ``fill`` every stage input is cached."""
        cfg, ep, h, w = self.cfg, self.episode, self.h, self.w
        k = len(self.valid)
        x = f_s = f_q = f = None
        hm = None
        history: list = []
        for i in range(start, len(self.stages)):
            name = self.stages[i]
            if not fill and i == start:
                x, f_s, f_q, f, hm, history = self.cache[name]
                history = list(history)
            elif fill:
                self.cache[name] = (x, f_s, f_q, f, hm, tuple(history))
            if name == "backbone":
                sup = support_features(ep.support_images, ep.support_keypoints, ep.support_valid, params, cfg)
                fq = extract_features(ep.query_image, params)
                x = ad.concat_rows([sup.data, fq.data]).data
                pos, key_mask = sequence_layout(k, self.valid, h, w, cfg.channels)
                self._pos, self._key_mask = pos, key_mask
            elif name.startswith("encoder."):
                x = encoder_block(Tensor(x), self._pos, self._key_mask, params, name, cfg.heads).data
            elif name == "proposal":
                f_s, f_q = x[:k], x[k:]
                hm = float(heatmap_loss(similarity(Tensor(f_s), Tensor(f_q), params), self.target,
                                        self.loss_valid).data)
                f = f_s
            else:
                l = int(name.split(".")[1])
                f_t, new, _ = decoder_layer(Tensor(f), self.frozen[l], Tensor(f_q), h, w, self.adj, self.valid,
                                            params, name, cfg.heads, self.key_pos)
                f = f_t.data
                history.append(new.data)
        off = float(offset_loss([Tensor(c) for c in history], self.gt, self.loss_valid).data)
        return float(total_loss(hm, off, cfg.lambda_heatmap))


def generic_point(params: ParamSet, rng: np.random.Generator, scale: float = 0.1) -> ParamSet:
    """Copy of ``params`` with random biases, norm gains and delta heads.

    Fresh initializations put zero-bias relu units on blank image regions
    exactly at the kink, where central differences and the tape disagree by
    construction.
    """
    out = params.copy()
    for name, arr in out.arrays.items():
        if name.endswith((".b", ".bias")) or ".delta2." in name:
            out[name] = arr + rng.normal(0.0, scale, arr.shape)
        elif name.endswith(".gain"):
            out[name] = arr * (1.0 + rng.normal(0.0, scale, arr.shape))
    return out


def tape_gradients(episode: Episode, params: ParamSet, cfg: ModelConfig) -> tuple[float, dict[str, np.ndarray]]:
    leaves = params.leaves()
    with ad.Tape() as tape:
        loss, _, _ = episode_loss(forward(episode, leaves, cfg), episode, cfg)
    ad.backward(tape, loss, 1.0)
    grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in leaves.items()}
    return float(loss.data), grads


def _logged(staged: StagedLoss, start: int, arrays) -> tuple[float, list[bytes]]:
    with ad.BranchLog() as log:
        value = staged.loss_from(start, arrays)
    return value, log.patterns


def _numeric_partial(staged: StagedLoss, start: int, arrays, flat: np.ndarray, i: int, step: float,
                     f0: float, base: list[bytes]) -> tuple[float, int, bool]:
    """Finite-difference partial derivative for element ``i`` of ``flat``.

    Central differences when both stencil points stay on the linear pieces
    of the unperturbed point. If one side crosses a kink, a second-order
    one-sided difference from the other side is used instead; it estimates
    the derivative of the piece containing the point, which is what the
    tape computes. Returns (estimate, evaluations, one_sided).
    """
    orig = flat[i]

    def at(delta):
        flat[i] = orig + delta
        try:
            return _logged(staged, start, arrays)
        finally:
            flat[i] = orig

    (fp, pp), (fm, pm) = at(step), at(-step)
    if pp == base and pm == base:
        return (fp - fm) / (2.0 * step), 2, False
    for sign, f1, p1 in ((1.0, fp, pp), (-1.0, fm, pm)):
        if p1 == base:
            f2, p2 = at(2.0 * sign * step)
            if p2 == base:
                return sign * (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * step), 3, True
    # kinks on both sides within one step: nothing better than the central estimate
    return (fp - fm) / (2.0 * step), 2, False


def model_grad_check(episode: Episode, params: ParamSet, cfg: ModelConfig, step: float = 1e-5,
                     tolerance: float = 1e-4, floor: float = 1e-6) -> ModelGradReport:
    """Finite differences on every parameter element versus the tape gradient.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    elements whose true gradient is at round-off level from dominating.
    Stencils that straddle a relu/abs/clip kink switch to a one-sided
    difference (see :func:`_numeric_partial`); the report counts them.
    """
    t0 = time.perf_counter()
    arrays = {n: a.copy() for n, a in params.arrays.items()}
    staged = StagedLoss(episode, params, cfg)
    loss, grads = tape_gradients(episode, params, cfg)
    if not np.isclose(loss, staged.base_loss, rtol=1e-12, atol=1e-14):
        raise AssertionError(f"staged loss {staged.base_loss!r} != model loss {loss!r}")
    per_param: dict[str, float] = {}
    worst = (0.0, "", ())
    evals = one_sided = 0
    for name, arr in arrays.items():
        start = staged.stage_of(name)
        f0, base = _logged(staged, start, arrays)
        flat = arr.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            numeric[i], n, side = _numeric_partial(staged, start, arrays, flat, i, step, f0, base)
            evals += n
            one_sided += side
        rel = ad.relative_error(grads[name].reshape(-1), numeric, floor)
        j = int(np.argmax(rel))
        per_param[name] = float(rel[j])
        if rel[j] > worst[0]:
            worst = (float(rel[j]), name, np.unravel_index(j, arr.shape))
    return ModelGradReport(worst[0], worst[1], tuple(int(v) for v in worst[2]), per_param, evals,
                           time.perf_counter() - t0, tolerance, one_sided)
