"""Procedural keypoint categories rendered as stick figures.

A category is a random connected skeleton with a canonical layout in the unit
square. Instances are drawn under random similarity transforms: edges as
strokes of a shared intensity, keypoints as disks whose intensity is distinct
per node (the only identity cue) and which peak at the keypoint itself.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .annotations import CategoryRecord, Dataset, Episode, InstanceRecord, serialize_annotations
from .graph import Skeleton

IMAGE_SIZE = 128
STROKE_WIDTH = 2.0
NODE_RADIUS = 3.0
NOISE_STD = 0.05
EDGE_INTENSITY = 0.25
PALETTE_RANGE = (0.35, 1.0)
MIN_PALETTE = 8
# radial falloff inside a disk; small enough that neighbouring palette levels never overlap
DISK_SHADING = 0.1
MAX_ATTEMPTS = 100
MIN_SPEC_DISTANCE = 0.05


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticCategorySpec:
    skeleton: Skeleton
    canonical_layout: np.ndarray  # (K, 2), unit square
    node_intensity: np.ndarray  # (K,)
    stroke_width: float = STROKE_WIDTH
    node_radius: float = NODE_RADIUS
    rng_seed: int = 0
    edge_intensity: float = EDGE_INTENSITY

    @property
    def num_keypoints(self) -> int:
        return self.skeleton.num_keypoints

    def __eq__(self, other):
        if not isinstance(other, SyntheticCategorySpec):
            return NotImplemented
        return (self.skeleton == other.skeleton and self.rng_seed == other.rng_seed
                and np.array_equal(self.canonical_layout, other.canonical_layout)
                and np.array_equal(self.node_intensity, other.node_intensity))

    __hash__ = None


@dataclass
class RenderedInstance:
    image: np.ndarray
    keypoints: np.ndarray
    bbox: tuple[float, float, float, float]
    transform: tuple[float, float, float, float]  # scale, rotation (deg), tx, ty


def _spanning_tree(k: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    order = rng.permutation(k)
    return [(int(order[i]), int(order[rng.integers(0, i)])) for i in range(1, k)]


def make_category(rng: np.random.Generator, k_range=(4, 8), edge_density: float = 0.15,
                  min_distance: float = 0.1) -> SyntheticCategorySpec:
    """Random connected category; everything derives from one seed drawn from ``rng``."""
    k_min, k_max = k_range
    if not 3 <= k_min <= k_max <= 68:
        raise ValueError(f"K range must satisfy 3 <= K_min <= K_max <= 68, got {k_range}")
    if not 0.0 <= edge_density <= 1.0:
        raise ValueError(f"edge_density must lie in [0, 1], got {edge_density}")
    if min_distance < MIN_SPEC_DISTANCE:
        raise ValueError(f"min_distance below {MIN_SPEC_DISTANCE} gives degenerate layouts")
    seed = int(rng.integers(0, 2**63 - 1))
    return category_from_seed(seed, (k_min, k_max), edge_density, min_distance)


def category_from_seed(seed: int, k_range=(4, 8), edge_density: float = 0.15,
                       min_distance: float = 0.1) -> SyntheticCategorySpec:
    g = np.random.default_rng(seed)
    k = int(g.integers(k_range[0], k_range[1] + 1))
    tree = {tuple(sorted(e)) for e in _spanning_tree(k, g)}
    rest = [(i, j) for i in range(k) for j in range(i + 1, k) if (i, j) not in tree]
    n_extra = int(round(edge_density * len(rest)))
    extra = [rest[int(i)] for i in g.choice(len(rest), size=n_extra, replace=False)] if n_extra else []
    skeleton = Skeleton(k, tuple(tree) + tuple(extra))

    for _ in range(10_000):
        pts = g.uniform(0.2, 0.8, size=(k, 2))
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        if k == 1 or d[np.triu_indices(k, 1)].min() >= min_distance:
            break
    else:
        raise GenerationError(f"could not place {k} points {min_distance} apart")
    intensity = g.choice(palette_levels(k), size=k, replace=False)
    return SyntheticCategorySpec(skeleton, pts, intensity, rng_seed=seed)


def palette_levels(k: int) -> np.ndarray:
    return np.linspace(*PALETTE_RANGE, max(MIN_PALETTE, k))


def repaint(spec: SyntheticCategorySpec, rng: np.random.Generator) -> SyntheticCategorySpec:
    """Same skeleton and layout with node intensities redrawn from the palette.

    Used on training episodes so a node's identity has to be read off the
    support image instead of being memorized per category.
    """
    k = spec.num_keypoints
    return replace(spec, node_intensity=rng.choice(palette_levels(k), size=k, replace=False))


def jitter_layout(spec: SyntheticCategorySpec, rng: np.random.Generator, sigma: float,
                  min_distance: float = MIN_SPEC_DISTANCE) -> SyntheticCategorySpec:
    """Spec with Gaussian noise on the canonical layout, kept in [0.2, 0.8]^2.

    Falls back to the unchanged spec when the perturbed points would come
    closer than ``min_distance``.
    """
    if sigma <= 0:
        return spec
    pts = np.clip(spec.canonical_layout + rng.normal(0.0, sigma, spec.canonical_layout.shape), 0.2, 0.8)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    k = len(pts)
    if k > 1 and d[np.triu_indices(k, 1)].min() < min_distance:
        return spec
    return replace(spec, canonical_layout=pts)


def _transform_points(pts: np.ndarray, size: int, scale: float, rot_deg: float,
                      tx: float, ty: float) -> np.ndarray:
    c = size / 2.0
    th = np.deg2rad(rot_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    return (pts * size - c) @ rot.T * scale + c + np.array([tx, ty])


def sample_transform(spec: SyntheticCategorySpec, rng: np.random.Generator,
                     size: int = IMAGE_SIZE) -> tuple[float, float, float, float]:
    margin = spec.node_radius + 1.0
    for _ in range(MAX_ATTEMPTS):
        s = float(rng.uniform(0.7, 1.3))
        r = float(rng.uniform(-30.0, 30.0))
        p = _transform_points(spec.canonical_layout, size, s, r, 0.0, 0.0)
        lo = margin - p.min(axis=0)
        hi = size - margin - p.max(axis=0)
        if np.all(lo <= hi):
            t = rng.uniform(lo, hi)
            return s, r, float(t[0]), float(t[1])
    raise GenerationError(f"no in-frame transform after {MAX_ATTEMPTS} attempts")


def _segment_distance(px, py, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = np.zeros_like(px) if denom == 0 else np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0, 1)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def draw(spec: SyntheticCategorySpec, keypoints: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Noiseless rendering of ``spec`` with keypoints at the given pixel positions."""
    img = np.zeros((size, size))
    half = spec.stroke_width / 2.0
    for i, j in spec.skeleton.edges:
        a, b = keypoints[i], keypoints[j]
        x0 = max(int(np.floor(min(a[0], b[0]) - half - 1)), 0)
        x1 = min(int(np.ceil(max(a[0], b[0]) + half + 1)), size)
        y0 = max(int(np.floor(min(a[1], b[1]) - half - 1)), 0)
        y1 = min(int(np.ceil(max(a[1], b[1]) + half + 1)), size)
        if x0 >= x1 or y0 >= y1:
            continue
        py, px = np.mgrid[y0:y1, x0:x1] + 0.5
        cover = np.clip(half + 0.5 - _segment_distance(px, py, a, b), 0.0, 1.0)
        win = img[y0:y1, x0:x1]
        np.maximum(win, cover * spec.edge_intensity, out=win)
    r = spec.node_radius
    for k, (x, y) in enumerate(keypoints):
        x0, x1 = max(int(np.floor(x - r - 1)), 0), min(int(np.ceil(x + r + 1)), size)
        y0, y1 = max(int(np.floor(y - r - 1)), 0), min(int(np.ceil(y + r + 1)), size)
        py, px = np.mgrid[y0:y1, x0:x1] + 0.5
        d = np.hypot(px - x, py - y)
        inside = d <= r
        win = img[y0:y1, x0:x1]
        win[inside] = spec.node_intensity[k] * (1.0 - DISK_SHADING * (d[inside] / r) ** 2)
    return img


def content_bbox(img: np.ndarray) -> tuple[float, float, float, float]:
    rows = np.nonzero(img.any(axis=1))[0]
    cols = np.nonzero(img.any(axis=0))[0]
    return float(cols[0]), float(rows[0]), float(cols[-1] + 1 - cols[0]), float(rows[-1] + 1 - rows[0])


def render_instance(spec: SyntheticCategorySpec, rng: np.random.Generator,
                    noise_std: float = NOISE_STD, size: int = IMAGE_SIZE,
                    transform: tuple[float, float, float, float] | None = None) -> RenderedInstance:
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    if transform is None:
        transform = sample_transform(spec, rng, size)
    kps = _transform_points(spec.canonical_layout, size, *transform)
    clean = draw(spec, kps, size)
    bbox = content_bbox(clean)
    img = clean
    if noise_std > 0:
        img = np.clip(clean + rng.normal(0.0, noise_std, clean.shape), 0.0, 1.0)
    return RenderedInstance(img, kps, bbox, tuple(float(v) for v in transform))


def make_episode(spec: SyntheticCategorySpec, rng: np.random.Generator, n_shots: int = 1,
                 noise_std: float = NOISE_STD, size: int = IMAGE_SIZE,
                 category_id: int = -1) -> Episode:
    insts = [render_instance(spec, rng, noise_std, size) for _ in range(n_shots + 1)]
    *sup, q = insts
    k = spec.num_keypoints
    return Episode(
        support_images=[s.image for s in sup],
        support_keypoints=[s.keypoints for s in sup],
        support_valid=[np.ones(k, dtype=bool) for _ in sup],
        query_image=q.image,
        query_keypoints=q.keypoints,
        query_bbox=q.bbox,
        skeleton=spec.skeleton,
        valid=np.ones(k, dtype=bool),
        category_id=category_id,
    )


@dataclass
class SyntheticSplit:
    train: list[SyntheticCategorySpec]
    val: list[SyntheticCategorySpec]
    test: list[SyntheticCategorySpec]

    def by_name(self, name: str) -> list[SyntheticCategorySpec]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def make_split(rng: np.random.Generator, n_train: int, n_val: int, n_test: int,
               k_range=(4, 8), edge_density: float = 0.15) -> SyntheticSplit:
    """Disjoint train/val/test categories built from distinct seeds."""
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("every split needs at least one category")
    n = n_train + n_val + n_test
    seeds: list[int] = []
    while len(seeds) < n:
        s = int(rng.integers(0, 2**63 - 1))
        if s not in seeds:
            seeds.append(s)
    specs = [category_from_seed(s, k_range, edge_density) for s in seeds]
    return SyntheticSplit(specs[:n_train], specs[n_train:n_train + n_val], specs[n_train + n_val:])


def write_pgm(path: Path, image: np.ndarray) -> None:
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def dump_split(out_dir: str | Path, split: SyntheticSplit, instances_per_category: int,
               rng: np.random.Generator, noise_std: float = NOISE_STD,
               size: int = IMAGE_SIZE) -> Dataset:
    """Render every category to ``out_dir/images`` and write ``out_dir/annotations.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    cats, insts = [], []
    cid = 0
    for split_name in ("train", "val", "test"):
        for spec in split.by_name(split_name):
            cid += 1
            k = spec.num_keypoints
            cats.append(CategoryRecord(cid, f"synthetic_{spec.rng_seed:x}", k, spec.skeleton,
                                       tuple(f"kp{i}" for i in range(k)), split_name))
            for n in range(instances_per_category):
                r = render_instance(spec, rng, noise_std, size)
                rel = f"images/c{cid:03d}_{n:03d}.pgm"
                write_pgm(out / rel, r.image)
                kps = tuple((float(x), float(y), 2) for x, y in r.keypoints)
                insts.append(InstanceRecord(rel, r.bbox, kps, cid, size, size))
    ds = Dataset(tuple(cats), tuple(insts), out)
    (out / "annotations.json").write_text(serialize_annotations(ds))
    (out / "categories.json").write_text(json.dumps(
        [{"id": c.id, "seed": s.rng_seed} for c, s in
         zip(cats, split.train + split.val + split.test)], indent=1))
    return ds
