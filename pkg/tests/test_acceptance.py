"""Acceptance suite: one PASS/FAIL line per headline criterion.

The trained-model criteria share one GCN model and one no-graph control,
both trained with the default config. They are cached under
``.acceptance_cache/`` (override with CAPEGRAPH_ACCEPTANCE_CACHE) keyed by
config hash, so only the first run pays for training. Run alone with
``pytest tests/test_acceptance.py -s`` to see the lines as they happen;
the summary section at the end of any pytest run repeats them.
"""
import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from capegraph import autodiff as ad
from capegraph import checkpoint
from capegraph.annotations import parse_annotations, serialize_annotations
from capegraph.autodiff import Tensor
from capegraph.config import RunConfig
from capegraph.graph import (build_adjacency, normalize_adjacency, random_skeleton, Skeleton,
                             spectral_radius)
from capegraph.gradsuite import generic_point, model_grad_check, primitive_cases
from capegraph.model import forward, init_params
from capegraph.objectives import heatmap_loss, offset_loss, pck_counts, total_loss
from capegraph.proposals import peak_select
from capegraph.synthetic import dump_split, make_split
from capegraph.training import (SyntheticSource, ablate, episode_rng, evaluate, permutation_deviation,
                                replicate_support, train)

ROOT = Path(__file__).resolve().parent.parent
CACHE = Path(os.environ.get("CAPEGRAPH_ACCEPTANCE_CACHE", ROOT / ".acceptance_cache"))
FIXTURE = Path(__file__).parent / "fixtures" / "one_based.json"
EVAL_EPISODES = 500  # 50 per unseen test category
TRAIN_BUDGET_S = 45 * 60


def _trained(cfg: RunConfig):
    """Train ``cfg`` once and cache the checkpoint plus wall time."""
    key = hashlib.sha256(cfg.to_json().encode()).hexdigest()[:16]
    ck, meta = CACHE / f"{key}.ckpt", CACHE / f"{key}.json"
    if not ck.exists():
        CACHE.mkdir(parents=True, exist_ok=True)
        res = train(cfg)
        checkpoint.save(ck, res.checkpoint)
        meta.write_text(json.dumps({"seconds": res.seconds, "config": cfg.to_dict(), "records": res.records}))
    return checkpoint.load(ck).params, json.loads(meta.read_text())["seconds"]


@pytest.fixture(scope="module")
def gcn_model():
    cfg = RunConfig()
    params, seconds = _trained(cfg)
    return cfg, params, seconds


@pytest.fixture(scope="module")
def control_model():
    cfg = RunConfig(use_graph=False)
    params, seconds = _trained(cfg)
    return cfg, params, seconds


def _random_model(cfg: RunConfig, seed: int, delta_scale: float = 0.1):
    return generic_point(init_params(cfg.model(), seed), np.random.default_rng([seed, 99]), delta_scale)


# ---------------------------------------------------------------- 1


def test_gradient_suite(criterion):
    t0 = time.perf_counter()
    worst_prim = 0.0
    for name, (f, point) in primitive_cases(np.random.default_rng(0)).items():
        rep = ad.grad_check(f, point, step=1e-5, tolerance=1e-6)
        worst_prim = max(worst_prim, max(rep.max_rel_error))
    cfg = RunConfig(channels=16, image_size=64, k_min=4, k_max=4, encoder_layers=1, decoder_layers=2,
                    n_train=1, n_val=1, n_test=1)
    ep = SyntheticSource(cfg).episode("train", 0, np.random.default_rng(0), 1)
    assert ep.skeleton.num_keypoints == 4 and cfg.model().grid == 8
    params = _random_model(cfg, 0)
    rep = model_grad_check(ep, params, cfg.model(), step=1e-5, tolerance=1e-4)
    seconds = time.perf_counter() - t0
    n = sum(a.size for a in params.arrays.values())
    ok = worst_prim < 1e-6 and rep.ok and seconds < 120
    criterion("gradient suite", ok,
              f"primitives max rel err {worst_prim:.2e} (<1e-6); full loss over {n} params "
              f"max rel err {rep.max_rel_error:.2e} at {rep.worst_param}{list(rep.worst_index)} (<1e-4), "
              f"{rep.one_sided} kink-straddling stencils one-sided; {seconds:.0f}s (<120s)")


# ---------------------------------------------------------------- 2


def test_order_agnosticism(criterion):
    cfg = RunConfig()
    params = _random_model(cfg, 1)
    src = SyntheticSource(cfg)
    cats = src.categories("test")

    def episodes():
        for j in range(100):
            rng = episode_rng(0, 31, 0, j)
            ep = src.episode("test", j % len(cats), rng, 1)
            # knock out a few support keypoints so masking is exercised too
            drop = rng.random(ep.skeleton.num_keypoints) < 0.2
            drop[0] = False
            ep.support_valid[0] = ep.support_valid[0] & ~drop
            yield ep

    dev = permutation_deviation(params, cfg, episodes(), np.random.default_rng(5))
    criterion("order agnosticism", dev < 1e-9, f"max coordinate deviation over 100 permuted episodes {dev:.1e} (<1e-9)")


# ---------------------------------------------------------------- 3


def test_shot_consistency(criterion):
    cfg = RunConfig()
    params = _random_model(cfg, 2).leaves(requires_grad=False)
    src = SyntheticSource(cfg)
    same = 0
    for j in range(20):
        ep = src.episode("test", j % 10, episode_rng(0, 37, 0, j), 1)
        one = forward(ep, params, cfg.model())
        five = forward(replicate_support(ep, 5), params, cfg.model())
        same += (np.array_equal(one.similarity.data, five.similarity.data)
                 and all(np.array_equal(a.data, b.data)
                         for a, b in zip(one.state.coord_history, five.state.coord_history)))
    criterion("shot consistency", same == 20, f"{same}/20 episodes bit-identical (5 identical shots vs 1 shot)")


# ---------------------------------------------------------------- 4


def test_adjacency_math(criterion):
    rng = np.random.default_rng(0)
    worst, asym = 0.0, 0
    for _ in range(1000):
        k = int(rng.integers(2, 16))
        m = int(rng.integers(0, k * (k - 1) // 2 + 1))
        n = normalize_adjacency(build_adjacency(random_skeleton(k, m, rng)))
        asym += not np.array_equal(n, n.T)
        worst = max(worst, spectral_radius(n))
    path = normalize_adjacency(build_adjacency(Skeleton(3, ((0, 1), (1, 2)))))
    ok = asym == 0 and worst <= 1 + 1e-9 and abs(path[0, 1] - 0.70711) < 1e-5
    criterion("adjacency math", ok, f"1000 graphs: {asym} asymmetric, max spectral radius {worst:.12f} (<=1+1e-9); "
              f"path entry {path[0, 1]:.6f} (0.70711 +-1e-5)")


# ---------------------------------------------------------------- 5


def test_range_invariant(criterion):
    cfg = RunConfig(channels=16, image_size=64, k_min=3, k_max=10, n_train=20, n_val=1, n_test=1)
    src = SyntheticSource(cfg)
    bad = layers = 0
    params = None
    for j in range(10_000):
        if j % 500 == 0:
            # large delta heads push the logits toward saturation
            params = _random_model(cfg, 100 + j, delta_scale=[0.1, 1.0, 10.0, 100.0][(j // 500) % 4])
            leaves = params.leaves(requires_grad=False)
        rng = episode_rng(0, 41, 0, j)
        ep = src.episode("train", j % 20, rng, 1)
        pred = forward(ep, leaves, cfg.model())
        for c in pred.state.coord_history:
            layers += 1
            bad += not np.all((c.data > 0.0) & (c.data < 1.0))
    criterion("range invariant", bad == 0, f"{bad} of {layers} decoder-layer outputs left (0,1)^2 over 10000 episodes")


# ---------------------------------------------------------------- 6-8 (trained models)


def test_synthetic_generalization(criterion, gcn_model):
    cfg, params, seconds = gcn_model
    res = evaluate(params, cfg, SyntheticSource(cfg), "test", n_shots=1, episodes=EVAL_EPISODES)
    ok = res.mean_pck >= 0.85 and seconds <= TRAIN_BUDGET_S
    criterion("synthetic generalization", ok,
              f"unseen-category mean PCK@0.2 {res.mean_pck:.4f} (>=0.85); training {seconds / 60:.1f} min (<=45)")


def test_random_graph_ablation(criterion, gcn_model):
    cfg, params, _ = gcn_model
    rows = ablate(params, cfg, SyntheticSource(cfg), "random_graph", episodes=EVAL_EPISODES)
    drop = rows[0]["pck"] - rows[1]["pck"]
    criterion("random-graph ablation", drop >= 0.02,
              f"true {rows[0]['pck']:.4f} vs random {rows[1]['pck']:.4f}: drop {100 * drop:.2f} points (>=2)")


def test_masking_curves(criterion, gcn_model, control_model):
    cfg, params, _ = gcn_model
    ccfg, cparams, _ = control_model
    fr = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
    query = [r["pck"] for r in ablate(params, cfg, SyntheticSource(cfg), "mask_query", fr, episodes=EVAL_EPISODES)]
    sup_g = [r["pck"] for r in ablate(params, cfg, SyntheticSource(cfg), "mask_support", fr, episodes=EVAL_EPISODES)]
    sup_c = [r["pck"] for r in ablate(cparams, ccfg, SyntheticSource(ccfg), "mask_support", fr,
                                      episodes=EVAL_EPISODES)]
    monotone = all(b <= a + 0.01 for a, b in zip(query, query[1:]))
    beats = all(g >= c for f, g, c in zip(fr, sup_g, sup_c) if f >= 0.3)
    fmt = lambda xs: " ".join(f"{x:.3f}" for x in xs)  # noqa: E731
    criterion("masking curves", monotone and beats,
              f"query PCK [{fmt(query)}] non-increasing +-0.01: {monotone}; support f>=0.3 GCN "
              f"[{fmt(sup_g[3:])}] >= control [{fmt(sup_c[3:])}]: {beats}")


# ---------------------------------------------------------------- 9


def _brute_pck(pred, gt, valid, bbox, thr):
    limit = thr * max(bbox[2], bbox[3])
    hits = n = 0
    for (px, py), (gx, gy), v in zip(pred, gt, valid):
        if v:
            n += 1
            hits += math.sqrt((px - gx) ** 2 + (py - gy) ** 2) <= limit
    return hits, n


def _brute_peak(m, h, w):
    best, idx = -math.inf, 0
    for i, v in enumerate(m):
        if v > best:
            best, idx = v, i
    r, c = divmod(idx, w)
    return (c + 0.5) / w, (r + 0.5) / h


def test_oracle_equivalences(criterion):
    rng = np.random.default_rng(0)
    pck_bad = 0
    for case in range(10_000):
        k = int(rng.integers(1, 9))
        gt = np.round(rng.uniform(0, 128, (k, 2))) if case % 2 else rng.uniform(0, 128, (k, 2))
        pred = gt + (rng.integers(-25, 26, (k, 2)) if case % 2 else rng.normal(0, 15, (k, 2)))
        bbox = (0.0, 0.0, float(rng.integers(10, 120)), float(rng.integers(10, 120)))
        valid = rng.random(k) < 0.8
        valid[0] = True
        pck_bad += pck_counts(pred, gt, valid, bbox, 0.2) != _brute_pck(pred, gt, valid, bbox, 0.2)
    peak_bad = 0
    for _ in range(1000):
        h, w = (int(x) for x in rng.integers(1, 17, size=2))
        m = rng.integers(0, 5, size=h * w).astype(float)  # heavy ties
        peak_bad += tuple(peak_select(m[None], h, w)[0]) != _brute_peak(m, h, w)
    hm = float(heatmap_loss(Tensor(np.zeros((1, 4))), np.zeros((1, 2, 2)), np.ones(1, bool)).data)
    off = float(offset_loss([Tensor(np.array([[0.5, 0.5], [0.25, 0.75]]))], np.full((2, 2), 0.5),
                            np.ones(2, bool)).data)
    tot = total_loss(0.25, 0.25, 2.0)
    loss_err = max(abs(hm - 0.25), abs(off - 0.25), abs(tot - 0.75))
    ok = pck_bad == 0 and peak_bad == 0 and loss_err <= 1e-12
    criterion("oracle equivalences", ok, f"pck mismatches {pck_bad}/10000; peak mismatches {peak_bad}/1000; "
              f"worked-loss max error {loss_err:.1e} (<=1e-12)")


# ---------------------------------------------------------------- 10


def test_persistence(criterion, tmp_path):
    cfg = RunConfig(channels=16, image_size=64)
    ck = checkpoint.Checkpoint(cfg, _random_model(cfg, 3), epoch=4, rng_state={"seed": 1})
    checkpoint.save(tmp_path / "a.ckpt", ck)
    checkpoint.save(tmp_path / "b.ckpt", checkpoint.load(tmp_path / "a.ckpt"))
    ck_same = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def fixpoint(text):
        first = parse_annotations(text)
        again = serialize_annotations(first)
        return parse_annotations(again) == first and serialize_annotations(parse_annotations(again)) == again

    split = make_split(np.random.default_rng(0), 3, 2, 2)
    dump_split(tmp_path / "dump", split, 3, np.random.default_rng(1), size=64)
    dump_ok = fixpoint((tmp_path / "dump" / "annotations.json").read_text())
    fixture_ok = fixpoint(FIXTURE.read_text())
    criterion("persistence", ck_same and dump_ok and fixture_ok,
              f"checkpoint byte-identical {ck_same}; synthetic dump fixpoint {dump_ok}; "
              f"1-based fixture fixpoint {fixture_ok}")
