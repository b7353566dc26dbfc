"""Keypoint skeletons and their symmetrically normalized adjacency."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class SkeletonError(ValueError):
    pass


def _canonical(edges) -> tuple[tuple[int, int], ...]:
    return tuple(sorted((min(int(i), int(j)), max(int(i), int(j))) for i, j in edges))


@dataclass(frozen=True)
class Skeleton:
    """K keypoints plus undirected edges stored as sorted ``(i, j)`` pairs with i < j."""

    num_keypoints: int
    edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        k = int(self.num_keypoints)
        if k <= 0:
            raise SkeletonError(f"num_keypoints must be positive, got {k}")
        bad = [e for e in self.edges if len(e) != 2 or e[0] == e[1]
               or not (0 <= e[0] < k and 0 <= e[1] < k)]
        if bad:
            raise SkeletonError(f"invalid edges for K={k}: {bad}")
        edges = _canonical(self.edges)
        dupes = sorted({e for e in edges if edges.count(e) > 1})
        if dupes:
            raise SkeletonError(f"duplicate edges: {dupes}")
        object.__setattr__(self, "num_keypoints", k)
        object.__setattr__(self, "edges", edges)

    @property
    def num_edges(self) -> int:
        return len(self.edges)


def build_adjacency(skeleton: Skeleton) -> np.ndarray:
    k = skeleton.num_keypoints
    a = np.zeros((k, k))
    for i, j in skeleton.edges:
        a[i, j] = a[j, i] = 1.0
    return a


def skeleton_from_adjacency(a: np.ndarray) -> Skeleton:
    i, j = np.nonzero(np.triu(a, k=1))
    return Skeleton(a.shape[0], tuple(zip(i.tolist(), j.tolist())))


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """D^-1/2 A D^-1/2 with rows and columns of isolated nodes left at zero.

    No self-loops are added; the decoder carries its own self term.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if not np.isin(a, (0.0, 1.0)).all():
        raise ValueError("adjacency must be binary")
    if not np.array_equal(a, a.T):
        raise ValueError("adjacency must be symmetric")
    if np.any(np.diag(a)):
        raise ValueError("adjacency must have a zero diagonal")
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


def permutation_matrix(perm: Sequence[int]) -> np.ndarray:
    """P with P[i, perm[i]] = 1, so that P.T @ A @ P relabels node i as perm[i]."""
    perm = _check_perm(perm, len(perm))
    p = np.zeros((len(perm), len(perm)))
    p[np.arange(len(perm)), perm] = 1.0
    return p


def _check_perm(perm, k: int) -> np.ndarray:
    perm = np.asarray(perm, dtype=int)
    if perm.shape != (k,) or not np.array_equal(np.sort(perm), np.arange(k)):
        raise ValueError(f"not a permutation of range({k}): {perm.tolist()}")
    return perm


def permute_skeleton(skeleton: Skeleton, perm: Sequence[int]) -> Skeleton:
    """Relabel keypoint ``i`` as ``perm[i]``."""
    perm = _check_perm(perm, skeleton.num_keypoints)
    return Skeleton(skeleton.num_keypoints,
                    tuple((int(perm[i]), int(perm[j])) for i, j in skeleton.edges))


def random_skeleton(k: int, num_edges: int, rng: np.random.Generator) -> Skeleton:
    """Uniformly random simple graph on ``k`` nodes with exactly ``num_edges`` edges."""
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    if not 0 <= num_edges <= len(pairs):
        raise ValueError(f"num_edges={num_edges} outside [0, {len(pairs)}] for K={k}")
    chosen = rng.choice(len(pairs), size=num_edges, replace=False) if num_edges else []
    return Skeleton(k, tuple(pairs[int(c)] for c in chosen))


def spectral_radius(m: np.ndarray, iters: int = 500, seed: int = 0) -> float:
    """Largest |eigenvalue| of a symmetric matrix by power iteration on m @ m."""
    if not np.any(m):
        return 0.0
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(m.shape[0])
    v /= np.linalg.norm(v)
    m2 = m @ m
    lam = 0.0
    for _ in range(iters):
        w = m2 @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new = float(v @ m2 @ v)
        if abs(new - lam) < 1e-15:
            lam = new
            break
        lam = new
    return float(np.sqrt(max(lam, 0.0)))
