"""Episodic training, evaluation, ablations and attention export."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .annotations import Episode, InsufficientDataError, load_annotations, sample_episode
from .checkpoint import Checkpoint
from .config import RunConfig
from .decoder import export_attention
from .graph import Skeleton, random_skeleton
from .model import episode_loss, forward, init_params
from .nn import ParamSet
from .objectives import pck_counts
from .synthetic import jitter_layout, make_episode, make_split, repaint

log = logging.getLogger(__name__)

METRIC_KEYS = ("epoch", "split", "category", "pck", "heatmap_loss", "offset_loss", "total_loss")


class DivergenceError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# data sources
# --------------------------------------------------------------------------


class SyntheticSource:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.split = make_split(np.random.default_rng(cfg.seed), cfg.n_train, cfg.n_val, cfg.n_test,
                                (cfg.k_min, cfg.k_max), cfg.edge_density)

    def categories(self, split: str) -> list[str]:
        return [f"{split}{i}" for i in range(len(self.split.by_name(split)))]

    def episode(self, split: str, index: int, rng: np.random.Generator, n_shots: int) -> Episode:
        spec = self.split.by_name(split)[index]
        if split == "train":
            if self.cfg.repaint_train:
                spec = repaint(spec, rng)
            spec = jitter_layout(spec, rng, self.cfg.layout_jitter)
        return make_episode(spec, rng, n_shots, self.cfg.noise_std, self.cfg.image_size, index)


class AnnotationSource:
    def __init__(self, cfg: RunConfig, path: str | Path):
        self.cfg = cfg
        self.dataset = load_annotations(path)

    def categories(self, split: str) -> list[str]:
        return [str(c.id) for c in self.dataset.split(split)]

    def episode(self, split: str, index: int, rng: np.random.Generator, n_shots: int) -> Episode:
        cat = self.dataset.split(split)[index]
        return sample_episode(self.dataset, cat.id, n_shots, rng, self.cfg.image_size)


def make_source(cfg: RunConfig):
    return AnnotationSource(cfg, cfg.annotations) if cfg.annotations else SyntheticSource(cfg)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


class Adam:
    """Adam with bias correction; state lives in ``m``/``v`` ParamSets."""

    def __init__(self, params: ParamSet, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = ParamSet({k: np.zeros_like(v) for k, v in params.arrays.items()})
        self.v = ParamSet({k: np.zeros_like(v) for k, v in params.arrays.items()})
        self.t = 0

    def step(self, params: ParamSet, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m, v = self.m.arrays[name], self.v.arrays[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params.arrays[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> ParamSet:
        out = ParamSet()
        out["optim.t"] = np.array([float(self.t)])
        for k in self.m:
            out[f"optim.m.{k}"] = self.m[k]
            out[f"optim.v.{k}"] = self.v[k]
        return out

    def load(self, state: ParamSet) -> None:
        if "optim.t" not in state:
            return
        self.t = int(state["optim.t"][0])
        for k in self.m:
            self.m[k] = state[f"optim.m.{k}"]
            self.v[k] = state[f"optim.v.{k}"]


def learning_rate(cfg: RunConfig, epoch: int) -> float:
    return cfg.lr * cfg.decay_factor ** sum(epoch >= e for e in cfg.decay_epochs)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    records: list[dict]
    step_losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def episode_step(params: ParamSet, episode: Episode, cfg: RunConfig):
    """Forward + backward on one episode; returns (grads, losses, pck counts)."""
    mcfg = cfg.model()
    leaves = params.leaves()
    with ad.Tape() as tape:
        pred = forward(episode, leaves, mcfg)
        loss, hm, off = episode_loss(pred, episode, mcfg)
    ad.backward(tape, loss, 1.0)
    grads = {k: t.grad for k, t in leaves.items() if t.grad is not None}
    counts = pck_counts(pred.pixels(cfg.image_size), episode.query_keypoints,
                        pred.valid & episode.valid, episode.query_bbox)
    return grads, (float(loss.data), float(hm.data), float(off.data)), counts


def _record(epoch, split, category, pck, losses) -> dict:
    total, hm, off = losses
    return dict(zip(METRIC_KEYS, (epoch, split, category, pck, hm, off, total)))


def train(cfg: RunConfig, log_path: str | Path | None = None, resume: Checkpoint | None = None,
          source=None, stop_after: int | None = None) -> TrainResult:
    """Train from scratch (or continue ``resume``) and return the final checkpoint.

    ``stop_after`` ends early after that many epochs in this call, leaving a
    resumable checkpoint.
    """
    source = source or make_source(cfg)
    train_cats = source.categories("train")
    if resume is not None:
        params = resume.params.copy()
        adam = Adam(params)
        adam.load(resume.extra)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start = resume.epoch
    else:
        params = init_params(cfg.model(), cfg.seed)
        adam = Adam(params)
        rng = np.random.default_rng([cfg.seed, 1])
        start = 0

    records: list[dict] = []
    step_losses: list[float] = []
    sink = open(log_path, "a") if log_path else None
    t0 = time.time()
    steps = math.ceil(cfg.episodes_per_epoch / cfg.batch_size)
    end = cfg.epochs if stop_after is None else min(cfg.epochs, start + stop_after)
    try:
        for epoch in range(start, end):
            lr = learning_rate(cfg, epoch)
            sums = np.zeros(3)
            hits = total = seen = 0
            for step in range(steps):
                batch = min(cfg.batch_size, cfg.episodes_per_epoch - step * cfg.batch_size)
                acc: dict[str, np.ndarray] = {}
                batch_loss = 0.0
                for _ in range(batch):
                    cat = int(rng.integers(len(train_cats)))
                    ep = source.episode("train", cat, rng, cfg.n_shots)
                    grads, losses, (c, n) = episode_step(params, ep, cfg)
                    if not all(math.isfinite(x) for x in losses):
                        raise DivergenceError(f"non-finite loss {losses} at epoch {epoch}, step {step}")
                    for k, g in grads.items():
                        if k in acc:
                            acc[k] += g
                        else:
                            acc[k] = g
                    sums += losses
                    batch_loss += losses[0]
                    hits, total, seen = hits + c, total + n, seen + 1
                for g in acc.values():
                    g /= batch
                clip_gradients(acc, cfg.grad_clip)
                adam.step(params, acc, lr)
                step_losses.append(batch_loss / batch)
            epoch_records = [_record(epoch, "train", "all", hits / max(total, 1), tuple(sums / seen))]
            if cfg.val_episodes > 0:
                val = evaluate(params, cfg, source, "val", episodes=cfg.val_episodes, seed=cfg.seed + 1)
                epoch_records.append(_record(epoch, "val", "all", val.mean_pck, val.mean_losses))
            for r in epoch_records:
                records.append(r)
                if sink:
                    sink.write(json.dumps(r) + "\n")
                    sink.flush()
            log.info("epoch %d lr %.1e %s (%.0fs)", epoch, lr,
                     " ".join(f"{r['split']}_pck={r['pck']:.3f}" for r in epoch_records), time.time() - t0)
    finally:
        if sink:
            sink.close()
    ckpt = Checkpoint(cfg, params, end, rng.bit_generator.state, adam.state())
    return TrainResult(ckpt, records, step_losses, time.time() - t0)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


@dataclass
class EvalResult:
    per_category: dict[str, tuple[int, int]]
    losses: np.ndarray = field(default_factory=lambda: np.zeros(3))
    episodes: int = 0
    skipped: list[str] = field(default_factory=list)

    def pck(self, category: str) -> float:
        c, n = self.per_category[category]
        return c / n if n else float("nan")

    @property
    def mean_pck(self) -> float:
        vals = [self.pck(k) for k, (_, n) in self.per_category.items() if n]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_losses(self) -> tuple[float, float, float]:
        return tuple(float(x) for x in self.losses / max(self.episodes, 1))


EpisodeHook = Callable[[Episode, np.random.Generator], Episode]
SkeletonHook = Callable[[Episode, np.random.Generator], Skeleton]


def episode_rng(seed: int, stream: int, category: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, category, index])


def evaluate(params: ParamSet, cfg: RunConfig, source, split: str = "test", n_shots: int | None = None,
             episodes: int | None = None, seed: int | None = None, episode_hook: EpisodeHook | None = None,
             skeleton_hook: SkeletonHook | None = None) -> EvalResult:
    """PCK per category over deterministic episodes; ``params`` is never modified."""
    n_shots = n_shots or cfg.n_shots
    episodes = cfg.eval_episodes if episodes is None else episodes
    seed = cfg.seed + 2 if seed is None else seed
    mcfg = cfg.model()
    leaves = params.leaves(requires_grad=False)
    cats = source.categories(split)
    result = EvalResult({})
    per_cat = max(1, math.ceil(episodes / max(len(cats), 1)))
    for ci, name in enumerate(cats):
        c_sum = n_sum = 0
        try:
            for j in range(per_cat):
                ep = source.episode(split, ci, episode_rng(seed, 7, ci, j), n_shots)
                hook_rng = episode_rng(seed, 11, ci, j)
                if episode_hook is not None:
                    ep = episode_hook(ep, hook_rng)
                skel = skeleton_hook(ep, hook_rng) if skeleton_hook is not None else None
                pred = forward(ep, leaves, mcfg, skeleton=skel)
                loss, hm, off = episode_loss(pred, ep, mcfg)
                c, n = pck_counts(pred.pixels(cfg.image_size), ep.query_keypoints,
                                  pred.valid & ep.valid, ep.query_bbox)
                c_sum, n_sum = c_sum + c, n_sum + n
                result.losses += (float(loss.data), float(hm.data), float(off.data))
                result.episodes += 1
        except InsufficientDataError as exc:
            log.warning("skipping category %s: %s", name, exc)
            result.skipped.append(name)
            continue
        result.per_category[name] = (c_sum, n_sum)
    return result


def eval_records(result: EvalResult, split: str, epoch: int = -1) -> list[dict]:
    recs = [_record(epoch, split, name, result.pck(name), (None, None, None))
            for name in result.per_category]
    recs.append(_record(epoch, split, "mean", result.mean_pck, result.mean_losses))
    return recs


def replicate_support(episode: Episode, n: int) -> Episode:
    """Episode whose ``n`` supports are copies of the first one."""
    return Episode([episode.support_images[0]] * n, [episode.support_keypoints[0]] * n,
                   [episode.support_valid[0]] * n, episode.query_image, episode.query_keypoints,
                   episode.query_bbox, episode.skeleton, episode.valid, episode.category_id)


# --------------------------------------------------------------------------
# ablations
# --------------------------------------------------------------------------


def random_graph_hook(episode: Episode, rng: np.random.Generator) -> Skeleton:
    sk = episode.skeleton
    return random_skeleton(sk.num_keypoints, sk.num_edges, rng)


def rectangle(size: int, fraction: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Axis-aligned ``(x0, y0, x1, y1)`` covering ~``fraction`` of a square image.

    The random draws do not depend on ``fraction``, so a sweep reuses one
    rectangle shape and anchor scaled in area.
    """
    log_aspect, u, v = rng.uniform(np.log(0.5), np.log(2.0)), rng.uniform(), rng.uniform()
    if fraction <= 0:
        return 0, 0, 0, 0
    aspect = float(np.clip(np.exp(log_aspect), fraction, 1.0 / fraction))
    w = int(round(size * math.sqrt(fraction * aspect)))
    h = int(round(size * math.sqrt(fraction / aspect)))
    w, h = min(w, size), min(h, size)
    x0 = int(round(u * (size - w)))
    y0 = int(round(v * (size - h)))
    return x0, y0, x0 + w, y0 + h


def _masked(image: np.ndarray, rect) -> np.ndarray:
    x0, y0, x1, y1 = rect
    if x1 <= x0 or y1 <= y0:
        return image
    out = image.copy()
    out[y0:y1, x0:x1] = 0.0
    return out


def mask_hook(target: str, fraction: float, size: int) -> EpisodeHook:
    def hook(ep: Episode, rng: np.random.Generator) -> Episode:
        rect = rectangle(size, fraction, rng)
        if target == "query":
            return Episode(ep.support_images, ep.support_keypoints, ep.support_valid,
                           _masked(ep.query_image, rect), ep.query_keypoints, ep.query_bbox,
                           ep.skeleton, ep.valid, ep.category_id)
        return Episode([_masked(im, rect) for im in ep.support_images], ep.support_keypoints,
                       ep.support_valid, ep.query_image, ep.query_keypoints, ep.query_bbox,
                       ep.skeleton, ep.valid, ep.category_id)

    return hook


def permute_episode(ep: Episode, perm: np.ndarray) -> Episode:
    """Relabel keypoint ``i`` as ``perm[i]`` everywhere in the episode."""
    from .graph import permute_skeleton

    def p(a):
        out = np.empty_like(a)
        out[perm] = a
        return out

    return Episode(ep.support_images, [p(k) for k in ep.support_keypoints],
                   [p(v) for v in ep.support_valid], ep.query_image, p(ep.query_keypoints),
                   ep.query_bbox, permute_skeleton(ep.skeleton, perm), p(ep.valid), ep.category_id)


def permutation_deviation(params: ParamSet, cfg: RunConfig, episodes: Iterable[Episode],
                          rng: np.random.Generator) -> float:
    """Max |decode(permute(x)) - permute(decode(x))| over episodes and every layer."""
    leaves = params.leaves(requires_grad=False)
    mcfg = cfg.model()
    worst = 0.0
    for ep in episodes:
        perm = rng.permutation(ep.skeleton.num_keypoints)
        base = forward(ep, leaves, mcfg)
        moved = forward(permute_episode(ep, perm), leaves, mcfg)
        pairs = [(base.proposals, moved.proposals)]
        pairs += [(a.data, b.data) for a, b in zip(base.state.coord_history, moved.state.coord_history)]
        for a, b in pairs:
            expect = np.empty_like(a)
            expect[perm] = a
            worst = max(worst, float(np.abs(expect - b).max()))
    return worst


def ablate(params: ParamSet, cfg: RunConfig, source, mode: str, fractions=(0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6),
           split: str = "test", episodes: int | None = None) -> list[dict]:
    """Rows of ``{mode, fraction, pck, ...}`` for one ablation."""
    if mode == "random_graph":
        base = evaluate(params, cfg, source, split, episodes=episodes)
        rand = evaluate(params, cfg, source, split, episodes=episodes, skeleton_hook=random_graph_hook)
        return [{"mode": mode, "skeleton": "true", "pck": base.mean_pck},
                {"mode": mode, "skeleton": "random", "pck": rand.mean_pck,
                 "delta": rand.mean_pck - base.mean_pck}]
    if mode in ("mask_support", "mask_query"):
        target = mode.split("_")[1]
        rows = []
        for f in fractions:
            res = evaluate(params, cfg, source, split, episodes=episodes,
                           episode_hook=mask_hook(target, float(f), cfg.image_size))
            rows.append({"mode": mode, "fraction": float(f), "pck": res.mean_pck})
        return rows
    if mode == "permute_check":
        n = episodes or cfg.eval_episodes
        cats = source.categories(split)
        eps = (source.episode(split, j % len(cats), episode_rng(cfg.seed, 13, 0, j), 1) for j in range(n))
        dev = permutation_deviation(params, cfg, eps, np.random.default_rng([cfg.seed, 17]))
        return [{"mode": mode, "episodes": n, "max_deviation": dev}]
    raise ValueError(f"unknown ablation mode {mode!r}")


# --------------------------------------------------------------------------
# attention export
# --------------------------------------------------------------------------


def export_attention_files(params: ParamSet, cfg: RunConfig, episode: Episode, out_dir: str | Path) -> list[Path]:
    """Write ``layer{l}_kp{i}.csv`` grids and ``keypoints.json``; return the grid paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pred = forward(episode, params.leaves(requires_grad=False), cfg.model())
    written = []
    for layer in range(pred.state.layers):
        grids = export_attention(pred.state, layer)
        for i, g in enumerate(grids):
            path = out / f"layer{layer}_kp{i}.csv"
            np.savetxt(path, g, fmt="%.17g", delimiter=",")
            written.append(path)
    size = cfg.image_size
    (out / "keypoints.json").write_text(json.dumps({
        "predicted": (pred.coords * size).tolist(),
        "proposals": (pred.proposals * size).tolist(),
        "ground_truth": np.asarray(episode.query_keypoints).tolist(),
        "valid": np.asarray(pred.valid & episode.valid).tolist(),
        "skeleton": [list(e) for e in episode.skeleton.edges],
    }, indent=1))
    return written
