import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capegraph.annotations import load_annotations
from capegraph.synthetic import (DISK_SHADING, GenerationError, dump_split, make_category, make_episode,
                                 jitter_layout, make_split, palette_levels, render_instance, repaint,
                                 sample_transform)


def is_connected(sk):
    seen, stack = {0}, [0]
    adj = {i: set() for i in range(sk.num_keypoints)}
    for i, j in sk.edges:
        adj[i].add(j)
        adj[j].add(i)
    while stack:
        for n in adj[stack.pop()] - seen:
            seen.add(n)
            stack.append(n)
    return len(seen) == sk.num_keypoints


def test_tree_only_at_zero_density():
    spec = make_category(np.random.default_rng(0), (3, 3), 0.0)
    assert spec.num_keypoints == 3 and spec.skeleton.num_edges == 2 and is_connected(spec.skeleton)


def test_complete_graph_at_full_density():
    spec = make_category(np.random.default_rng(0), (4, 4), 1.0)
    assert spec.skeleton.num_edges == 6


def test_make_category_deterministic():
    a = make_category(np.random.default_rng(5))
    b = make_category(np.random.default_rng(5))
    assert a == b


@pytest.mark.parametrize("density", [-0.1, 1.5])
def test_density_out_of_range(density):
    with pytest.raises(ValueError):
        make_category(np.random.default_rng(0), (4, 6), density)


def test_k_range_bounds():
    with pytest.raises(ValueError):
        make_category(np.random.default_rng(0), (2, 5))
    with pytest.raises(ValueError):
        make_category(np.random.default_rng(0), (10, 69))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_category_invariants(seed):
    spec = make_category(np.random.default_rng(seed), (3, 12), 0.3)
    pts = spec.canonical_layout
    assert np.all((pts >= 0.2) & (pts <= 0.8))
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    assert d[np.triu_indices(len(pts), 1)].min() >= 0.05
    assert is_connected(spec.skeleton)
    assert len(set(spec.node_intensity.tolist())) == spec.num_keypoints


def test_identity_transform_reproduces_layout():
    spec = make_category(np.random.default_rng(1))
    r = render_instance(spec, np.random.default_rng(0), 0.0, 128, (1.0, 0.0, 0.0, 0.0))
    np.testing.assert_allclose(r.keypoints, spec.canonical_layout * 128, atol=1e-12)


def test_half_turn_is_point_reflection():
    spec = make_category(np.random.default_rng(2))
    a = render_instance(spec, np.random.default_rng(0), 0.0, 128, (1.0, 0.0, 0.0, 0.0))
    b = render_instance(spec, np.random.default_rng(0), 0.0, 128, (1.0, 180.0, 0.0, 0.0))
    np.testing.assert_allclose(b.keypoints, 128 - a.keypoints, atol=1e-9)


def _local_brightest(img, x, y, radius):
    # brute force over every pixel center within `radius` of the keypoint
    best, where = -1.0, None
    for r in range(img.shape[0]):
        for c in range(img.shape[1]):
            if np.hypot(c + 0.5 - x, r + 0.5 - y) <= radius and img[r, c] > best:
                best, where = img[r, c], (c + 0.5, r + 0.5)
    return where


def test_brightest_pixel_near_each_keypoint():
    for seed in range(4):
        spec = make_category(np.random.default_rng(seed))
        inst = render_instance(spec, np.random.default_rng(seed + 100), 0.0)
        for x, y in inst.keypoints:
            cx, cy = _local_brightest(inst.image, x, y, spec.node_radius)
            assert np.hypot(cx - x, cy - y) <= 1.0


def _template_locate(img, level, radius, step=0.25):
    # exhaustive SSD match of one node's exact disk over a quarter-pixel lattice of centers;
    # only the interior is scored so the rim discontinuity cannot dominate
    r = int(np.ceil(radius)) + 1
    offs = np.arange(-r, r + 1)
    dy, dx = np.meshgrid(offs, offs, indexing="ij")
    pad = np.pad(img, r, constant_values=-1.0)
    win = np.lib.stride_tricks.sliding_window_view(pad, (2 * r + 1, 2 * r + 1))
    best = (np.inf, None)
    for fy in np.arange(0.0, 1.0, step):
        for fx in np.arange(0.0, 1.0, step):
            # candidate center (col + fx, row + fy); window pixel centers at col + dx + 0.5
            d = np.hypot(dx + 0.5 - fx, dy + 0.5 - fy)
            foot = d <= radius - 0.5
            tmpl = level * (1.0 - DISK_SHADING * (d / radius) ** 2)
            ssd = (((win - tmpl) ** 2) * foot).sum(axis=(-1, -2))
            row, col = np.unravel_index(np.argmin(ssd), ssd.shape)
            if ssd[row, col] < best[0]:
                best = (ssd[row, col], (col + fx, row + fy))
    return best[1]


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_keypoints_recoverable_by_template_matching(seed):
    spec = make_category(np.random.default_rng(seed))
    inst = render_instance(spec, np.random.default_rng(seed + 1), 0.0)
    for (x, y), level in zip(inst.keypoints, spec.node_intensity):
        cx, cy = _template_locate(inst.image, level, spec.node_radius)
        assert np.hypot(cx - x, cy - y) <= 1.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_rendered_instance_invariants(seed):
    rng = np.random.default_rng(seed)
    spec = make_category(rng)
    inst = render_instance(spec, rng)
    s, rot, _, _ = inst.transform
    assert 0.7 <= s <= 1.3 and -30 <= rot <= 30
    assert np.all((inst.keypoints > 0) & (inst.keypoints < 128))
    bx, by, bw, bh = inst.bbox
    assert np.all(inst.keypoints[:, 0] >= bx) and np.all(inst.keypoints[:, 0] <= bx + bw)
    assert np.all(inst.keypoints[:, 1] >= by) and np.all(inst.keypoints[:, 1] <= by + bh)
    assert inst.image.min() >= 0.0 and inst.image.max() <= 1.0


def test_negative_noise_rejected():
    with pytest.raises(ValueError):
        render_instance(make_category(np.random.default_rng(0)), np.random.default_rng(0), -0.1)


def test_transform_gives_up_after_bounded_retries():
    spec = make_category(np.random.default_rng(0))
    with pytest.raises(GenerationError):
        sample_transform(spec, np.random.default_rng(0), size=8)


def test_episode_shapes():
    spec = make_category(np.random.default_rng(3))
    ep = make_episode(spec, np.random.default_rng(0), n_shots=5)
    assert ep.n_shots == 5 and ep.query_image.shape == (128, 128)
    assert ep.valid.all() and ep.query_keypoints.shape == (spec.num_keypoints, 2)


def test_split_examples():
    sp = make_split(np.random.default_rng(0), 2, 1, 1)
    specs = sp.train + sp.val + sp.test
    assert len(specs) == 4
    for i in range(4):
        for j in range(i + 1, 4):
            assert specs[i] != specs[j]
            assert not np.array_equal(specs[i].canonical_layout, specs[j].canonical_layout)
    again = make_split(np.random.default_rng(0), 2, 1, 1)
    assert again.train == sp.train and again.val == sp.val and again.test == sp.test


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.tuples(st.integers(1, 6), st.integers(1, 4), st.integers(1, 4)))
def test_split_disjoint(seed, n):
    sp = make_split(np.random.default_rng(seed), *n)
    seeds = [{s.rng_seed for s in part} for part in (sp.train, sp.val, sp.test)]
    assert not (seeds[0] & seeds[1]) and not (seeds[0] & seeds[2]) and not (seeds[1] & seeds[2])
    assert sum(len(s) for s in seeds) == sum(n)


def test_dump_round_trip(tmp_path):
    sp = make_split(np.random.default_rng(4), 2, 1, 1)
    ds = dump_split(tmp_path / "a", sp, 3, np.random.default_rng(9))
    parsed = load_annotations(tmp_path / "a" / "annotations.json")
    assert parsed == ds
    assert [c.skeleton for c in parsed.categories] == [s.skeleton for s in sp.train + sp.val + sp.test]
    assert [c.split for c in parsed.categories] == ["train", "train", "val", "test"]
    dump_split(tmp_path / "b", sp, 3, np.random.default_rng(9))
    assert (tmp_path / "a" / "annotations.json").read_text() == (tmp_path / "b" / "annotations.json").read_text()
    assert (tmp_path / "a" / "images" / "c001_000.pgm").read_bytes() == \
        (tmp_path / "b" / "images" / "c001_000.pgm").read_bytes()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_repaint_keeps_geometry_and_draws_distinct_levels(seed):
    spec = make_category(np.random.default_rng(seed))
    new = repaint(spec, np.random.default_rng(seed + 1))
    assert new.skeleton == spec.skeleton
    np.testing.assert_array_equal(new.canonical_layout, spec.canonical_layout)
    k = spec.num_keypoints
    assert len(set(new.node_intensity.tolist())) == k
    assert set(new.node_intensity.tolist()) <= set(palette_levels(k).tolist())


def test_repaint_is_deterministic_per_rng():
    spec = make_category(np.random.default_rng(3))
    a = repaint(spec, np.random.default_rng(5))
    b = repaint(spec, np.random.default_rng(5))
    assert a == b


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), sigma=st.floats(0.0, 0.2))
def test_jitter_layout_keeps_spec_invariants(seed, sigma):
    spec = make_category(np.random.default_rng(seed), (3, 10))
    new = jitter_layout(spec, np.random.default_rng(seed + 1), sigma)
    pts = new.canonical_layout
    assert new.skeleton == spec.skeleton
    np.testing.assert_array_equal(new.node_intensity, spec.node_intensity)
    assert pts.min() >= 0.2 and pts.max() <= 0.8
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)[np.triu_indices(len(pts), 1)]
    assert d.min() >= 0.05


def test_jitter_layout_zero_sigma_is_identity():
    spec = make_category(np.random.default_rng(4))
    assert jitter_layout(spec, np.random.default_rng(0), 0.0) is spec
