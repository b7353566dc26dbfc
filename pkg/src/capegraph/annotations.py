"""COCO-like keypoint annotation files: parsing, skeleton index unification, episodes.

Document layout::

    {
      "categories": [{"id": 1, "name": "chair", "keypoints": ["a", "b", "c"],
                      "skeleton": [[1, 2], [2, 3]], "split": "train"}],
      "annotations": [{"image_path": "img/0001.pgm", "category_id": 1,
                       "bbox": [x, y, w, h], "keypoints": [x1, y1, v1, ...],
                       "width": 128, "height": 128}]
    }

``split`` (default ``"train"``), ``width`` and ``height`` are optional.
Skeletons may be 0- or 1-based on input and are always 0-based after parsing.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import Skeleton

SPLITS = ("train", "val", "test")


class AnnotationError(ValueError):
    """Malformed or inconsistent annotation document."""


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class CategoryRecord:
    id: int
    name: str
    num_keypoints: int
    skeleton: Skeleton
    keypoint_names: tuple[str, ...]
    split: str = "train"


@dataclass(frozen=True)
class InstanceRecord:
    image_ref: str
    bbox: tuple[float, float, float, float]
    keypoints: tuple[tuple[float, float, int], ...]
    category_id: int
    width: int | None = None
    height: int | None = None

    def keypoint_array(self) -> np.ndarray:
        return np.array([(x, y) for x, y, _ in self.keypoints], dtype=np.float64).reshape(-1, 2)

    def visibility(self) -> np.ndarray:
        return np.array([v for _, _, v in self.keypoints], dtype=int)


@dataclass(frozen=True)
class Dataset:
    categories: tuple[CategoryRecord, ...]
    instances: tuple[InstanceRecord, ...]
    root: Path | None = field(default=None, compare=False)

    def category(self, category_id: int) -> CategoryRecord:
        for c in self.categories:
            if c.id == category_id:
                return c
        raise KeyError(f"unknown category id {category_id}")

    def instances_of(self, category_id: int) -> list[InstanceRecord]:
        return [a for a in self.instances if a.category_id == category_id]

    def split(self, name: str) -> list[CategoryRecord]:
        return [c for c in self.categories if c.split == name]


@dataclass
class Episode:
    """One few-shot task from a single category; coordinates in model pixels."""

    support_images: list[np.ndarray]
    support_keypoints: list[np.ndarray]
    support_valid: list[np.ndarray]
    query_image: np.ndarray
    query_keypoints: np.ndarray
    query_bbox: tuple[float, float, float, float]
    skeleton: Skeleton
    valid: np.ndarray
    category_id: int = -1

    def __post_init__(self):
        if not self.support_images:
            raise ValueError("an episode needs at least one support")
        k = self.skeleton.num_keypoints
        shapes = {kp.shape for kp in self.support_keypoints} | {self.query_keypoints.shape}
        if shapes != {(k, 2)} or self.valid.shape != (k,):
            raise ValueError(f"episode keypoint arrays do not match K={k}")

    @property
    def n_shots(self) -> int:
        return len(self.support_images)


def unify_index_base(raw: Sequence[Sequence[int]], k: int) -> Skeleton:
    """Map a 0- or 1-based skeleton edge list to a 0-based :class:`Skeleton`.

    1-based is detected by min >= 1 and max == K; 0-based by min == 0 and
    max <= K - 1. Anything else is rejected rather than guessed.
    """
    pairs = [tuple(int(v) for v in p) for p in raw]
    if any(len(p) != 2 for p in pairs):
        raise AnnotationError(f"skeleton entries must be pairs: {raw}")
    if not pairs:
        return Skeleton(k, ())
    flat = [v for p in pairs for v in p]
    lo, hi = min(flat), max(flat)
    if lo < 0:
        raise AnnotationError(f"negative skeleton index {lo}")
    if hi > k or (lo == 0 and hi == k):
        raise AnnotationError(f"irreconcilable skeleton index base for K={k}: min={lo}, max={hi}")
    offset = 1 if (lo >= 1 and hi == k) else 0
    return Skeleton(k, tuple((i - offset, j - offset) for i, j in pairs))


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise AnnotationError(f"{where}: missing key {key!r}")
    return obj[key]


def _parse_category(raw: dict, where: str) -> CategoryRecord:
    names = _require(raw, "keypoints", where)
    if not isinstance(names, list) or not names:
        raise AnnotationError(f"{where}.keypoints: expected a non-empty list of names")
    k = len(names)
    try:
        skel = unify_index_base(_require(raw, "skeleton", where), k)
    except (AnnotationError, ValueError) as exc:
        raise AnnotationError(f"category {raw.get('name', raw.get('id'))!r} ({where}): {exc}") from None
    split = raw.get("split", "train")
    if split not in SPLITS:
        raise AnnotationError(f"{where}.split: {split!r} not in {SPLITS}")
    return CategoryRecord(int(_require(raw, "id", where)), str(raw.get("name", "")), k, skel,
                          tuple(str(n) for n in names), split)


def _parse_instance(raw: dict, where: str, cats: dict[int, CategoryRecord]) -> InstanceRecord:
    cid = int(_require(raw, "category_id", where))
    if cid not in cats:
        raise AnnotationError(f"{where}.category_id: unknown category {cid}")
    k = cats[cid].num_keypoints
    flat = _require(raw, "keypoints", where)
    if len(flat) != 3 * k:
        raise AnnotationError(f"{where}.keypoints: expected {3 * k} numbers, got {len(flat)}")
    kps = tuple((float(flat[3 * i]), float(flat[3 * i + 1]), int(flat[3 * i + 2])) for i in range(k))
    if any(v not in (0, 1, 2) for _, _, v in kps):
        raise AnnotationError(f"{where}.keypoints: visibility must be 0, 1 or 2")
    bbox = tuple(float(v) for v in _require(raw, "bbox", where))
    if len(bbox) != 4 or bbox[2] <= 0 or bbox[3] <= 0:
        raise AnnotationError(f"{where}.bbox: expected [x, y, w, h] with positive extents")
    width, height = raw.get("width"), raw.get("height")
    if width is not None and height is not None:
        for x, y, v in kps:
            if v > 0 and not (0 <= x <= width and 0 <= y <= height):
                raise AnnotationError(f"{where}.keypoints: visible point ({x}, {y}) outside "
                                      f"{width}x{height} image")
    return InstanceRecord(str(_require(raw, "image_path", where)), bbox, kps, cid,
                          None if width is None else int(width),
                          None if height is None else int(height))


def parse_annotations(doc: str | dict, root: Path | None = None) -> Dataset:
    """Parse an annotation document given as JSON text or an already-decoded dict."""
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise AnnotationError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise AnnotationError("top level must be an object")
    cats = {}
    for i, raw in enumerate(_require(doc, "categories", "document")):
        c = _parse_category(raw, f"categories[{i}]")
        if c.id in cats:
            raise AnnotationError(f"categories[{i}]: duplicate id {c.id}")
        cats[c.id] = c
    instances = tuple(_parse_instance(raw, f"annotations[{i}]", cats)
                      for i, raw in enumerate(_require(doc, "annotations", "document")))
    return Dataset(tuple(cats.values()), instances, root)


def load_annotations(path: str | Path) -> Dataset:
    path = Path(path)
    return parse_annotations(path.read_text(), root=path.parent)


def to_document(dataset: Dataset) -> dict:
    cats = [{"id": c.id, "name": c.name, "keypoints": list(c.keypoint_names),
             "skeleton": [list(e) for e in c.skeleton.edges], "split": c.split}
            for c in dataset.categories]
    anns = []
    for a in dataset.instances:
        rec = {"image_path": a.image_ref, "category_id": a.category_id, "bbox": list(a.bbox),
               "keypoints": [v for x, y, vis in a.keypoints for v in (x, y, vis)]}
        if a.width is not None:
            rec["width"], rec["height"] = a.width, a.height
        anns.append(rec)
    return {"categories": cats, "annotations": anns}


def serialize_annotations(dataset: Dataset) -> str:
    return json.dumps(to_document(dataset), indent=1)


def load_image(path: str | Path, size: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Grayscale image in [0, 1] resized bilinearly to ``size`` x ``size``.

    Returns the image and the original ``(width, height)``.
    """
    from PIL import Image

    with Image.open(path) as im:
        original = im.size
        im = im.convert("L")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr, original


def _resolve(dataset: Dataset, ref: str) -> Path:
    p = Path(ref)
    return p if p.is_absolute() or dataset.root is None else dataset.root / p


def instance_view(dataset: Dataset, inst: InstanceRecord, size: int):
    """Load an instance at model resolution: (image, keypoints px, visibility, bbox)."""
    image, (w, h) = load_image(_resolve(dataset, inst.image_ref), size)
    sx, sy = size / w, size / h
    kps = inst.keypoint_array() * np.array([sx, sy])
    bx, by, bw, bh = inst.bbox
    return image, kps, inst.visibility(), (bx * sx, by * sy, bw * sx, bh * sy)


def sample_episode(dataset: Dataset, category_id: int, n_shots: int,
                   rng: np.random.Generator, image_size: int = 128) -> Episode:
    """Draw ``n_shots`` supports and one query without replacement."""
    pool = dataset.instances_of(category_id)
    if len(pool) < n_shots + 1:
        raise InsufficientDataError(
            f"category {category_id} has {len(pool)} instances, need {n_shots + 1}")
    picks = rng.choice(len(pool), size=n_shots + 1, replace=False)
    views = [instance_view(dataset, pool[int(i)], image_size) for i in picks]
    *supports, query = views
    return Episode(
        support_images=[v[0] for v in supports],
        support_keypoints=[v[1] for v in supports],
        support_valid=[v[2] > 0 for v in supports],
        query_image=query[0],
        query_keypoints=query[1],
        query_bbox=query[3],
        skeleton=dataset.category(category_id).skeleton,
        valid=query[2] > 0,
        category_id=category_id,
    )
