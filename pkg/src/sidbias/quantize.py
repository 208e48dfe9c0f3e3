"""Item representations and residual K-means quantization.

Representations are kept as a dense ``(num_items, d)`` float64 array whose row
``i`` is the vector of item ``i``.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._accel import njit

log = logging.getLogger(__name__)

DEFAULT_DIM = 32
DEFAULT_CENTROIDS = 256
DEFAULT_ITERS = 25


class DimensionError(ValueError):
    pass


class MissingItemError(KeyError):
    pass


class DegenerateCovarianceError(ValueError):
    pass


@dataclass
class Codebook:
    level: int
    centroids: np.ndarray  # (N, d)

    @property
    def size(self) -> int:
        return self.centroids.shape[0]


@dataclass
class ResidualCode:
    codes: list[int]
    final_residual: np.ndarray


# --------------------------------------------------------------------------
# kernels

@njit
def assign_nearest(X, C):
    """Index of the nearest centroid per row (squared Euclidean, lowest index on ties)."""
    n, d = X.shape
    k = C.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    for i in range(n):
        best = np.inf
        arg = 0
        for j in range(k):
            s = 0.0
            for t in range(d):
                diff = X[i, t] - C[j, t]
                s += diff * diff
            if s < best:
                best = s
                arg = j
        idx[i] = arg
        dist[i] = best
    return idx, dist


@njit
def accumulate_centroids(X, idx, k):
    n, d = X.shape
    sums = np.zeros((k, d))
    counts = np.zeros(k, dtype=np.int64)
    for i in range(n):
        c = idx[i]
        counts[c] += 1
        for t in range(d):
            sums[c, t] += X[i, t]
    return sums, counts


# --------------------------------------------------------------------------
# representations

def synthesize_reps(ds, split, d: int = DEFAULT_DIM, num_clusters: int | None = None,
                    noise: float = 0.35, seed: int = 0) -> np.ndarray:
    """Clustered item vectors with cosine neighbourhoods between tail and head items.

    Head items are a unit-norm cluster centre plus an isotropic Gaussian
    perturbation of expected norm ``noise``; every tail item is the vector of
    a random head item (from the same latent cluster when the corpus has one)
    plus a perturbation of the same scale.
    """
    if d < 2:
        raise ValueError("d must be >= 2")
    rng = np.random.default_rng(seed)
    k = ds.num_items if hasattr(ds, "num_items") else len(ds.items)
    item_cluster = getattr(ds, "item_cluster", None)
    if num_clusters is None:
        num_clusters = int(item_cluster.max()) + 1 if item_cluster is not None else 20
    if num_clusters < 2:
        raise ValueError("num_clusters must be >= 2")
    if item_cluster is None:
        item_cluster = rng.integers(0, num_clusters, size=k)
    centres = rng.standard_normal((num_clusters, d))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    sigma = noise / np.sqrt(d)

    reps = np.zeros((k, d))
    heads = split.head_sorted
    for h in heads:
        reps[h] = centres[item_cluster[h] % num_clusters] + sigma * rng.standard_normal(d)
    heads_arr = np.asarray(heads)
    head_cluster = np.asarray(item_cluster)[heads_arr]
    for t in split.tail_sorted:
        pool = heads_arr[head_cluster == item_cluster[t]]
        if len(pool) == 0:
            pool = heads_arr
        anchor = int(pool[rng.integers(0, len(pool))])
        reps[t] = reps[anchor] + sigma * rng.standard_normal(d)
    return reps


def save_reps(reps: np.ndarray, path, item_labels=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, vec in enumerate(reps):
            label = item_labels[i] if item_labels is not None else i
            fh.write(json.dumps({"item": label, "vec": [float(x) for x in vec]}) + "\n")


def load_reps(path, items, d: int) -> tuple[np.ndarray, int]:
    """Read ``{"item", "vec"}`` rows for ``items`` (labels, in index order).

    Returns the ``(len(items), d)`` array and the number of rows ignored
    because their item is not in ``items``.
    """
    index = {label: k for k, label in enumerate(items)}
    reps = np.full((len(items), d), np.nan)
    seen = np.zeros(len(items), dtype=bool)
    extra = 0
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        label = rec["item"]
        if label not in index and str(label) in {str(x) for x in index}:
            label = next(x for x in index if str(x) == str(label))
        if label not in index:
            extra += 1
            continue
        vec = np.asarray(rec["vec"], dtype=np.float64)
        if vec.shape != (d,):
            raise DimensionError(f"item {rec['item']!r}: vector has dimension {vec.size}, expected {d}")
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"item {rec['item']!r}: non-finite vector")
        reps[index[label]] = vec
        seen[index[label]] = True
    if not seen.all():
        missing = [items[k] for k in np.flatnonzero(~seen)[:5]]
        raise MissingItemError(f"no representation for items {missing}")
    if extra:
        log.warning("load_reps: ignored %d rows for items outside the dataset", extra)
    return reps, extra


@dataclass
class PCA:
    mean: np.ndarray
    components: np.ndarray  # (target_d, d)
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T


def fit_pca(X: np.ndarray, target_d: int) -> PCA:
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if target_d > d:
        raise ValueError(f"target_d={target_d} exceeds input dimension {d}")
    if n < target_d + 1:
        raise ValueError(f"need at least {target_d + 1} items, got {n}")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    tol = s.max(initial=0.0) * max(n, d) * np.finfo(float).eps
    rank = int((s > tol).sum())
    if rank < target_d:
        raise DegenerateCovarianceError(
            f"covariance rank {rank} < target_d={target_d}; choose target_d <= {rank}")
    comps = vt[:target_d].copy()
    # sign convention: largest-magnitude loading of each axis is positive
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(target_d), pivot])
    comps *= signs[:, None]
    var = s ** 2 / (n - 1)
    return PCA(mean, comps, var[:target_d], var[:target_d] / var.sum())


def reduce_dim(reps: np.ndarray, target_d: int) -> np.ndarray:
    """Project onto the leading ``target_d`` principal axes (fit on all items)."""
    return fit_pca(reps, target_d).transform(reps)


def most_similar_tail(reps: np.ndarray, split) -> dict[int, int]:
    """For every head item, the tail item with the highest cosine similarity."""
    heads = np.asarray(split.head_sorted)
    tails = np.asarray(split.tail_sorted)
    unit = reps / np.linalg.norm(reps, axis=1, keepdims=True)
    sims = unit[heads] @ unit[tails].T
    return {int(h): int(tails[j]) for h, j in zip(heads, np.argmax(sims, axis=1))}


# --------------------------------------------------------------------------
# residual K-means

def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centres = np.empty((k, X.shape[1]))
    centres[0] = X[rng.integers(n)]
    d2 = ((X - centres[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            pick = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            pick = min(pick, n - 1)
        centres[j] = X[pick]
        d2 = np.minimum(d2, ((X - centres[j]) ** 2).sum(axis=1))
    return centres


def kmeans(X: np.ndarray, k: int, iters: int = DEFAULT_ITERS, seed: int = 0) -> np.ndarray:
    """Lloyd's algorithm from a k-means++ start; empty clusters take the farthest point."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centres = _kmeans_pp(X, k, rng)
    prev = None
    for _ in range(iters):
        idx, dist = assign_nearest(X, centres)
        sums, counts = accumulate_centroids(X, idx, k)
        empty = np.flatnonzero(counts == 0)
        for j in empty:
            far = int(np.argmax(dist))
            idx[far] = j
            dist[far] = 0.0
            sums, counts = accumulate_centroids(X, idx, k)
        centres = sums / np.maximum(counts, 1)[:, None]
        if prev is not None and np.array_equal(prev, idx):
            break
        prev = idx
    return centres


def train_codebooks(reps: np.ndarray, levels: int, N: int = DEFAULT_CENTROIDS,
                    iters: int = DEFAULT_ITERS, seed: int = 0) -> list[Codebook]:
    """Fit ``levels`` K-means codebooks, each on the residuals left by the previous ones."""
    X = np.ascontiguousarray(reps, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("need at least one vector")
    if N < 1:
        raise ValueError("N must be >= 1")
    residual = X.copy()
    books = []
    for level in range(levels):
        k = N
        if X.shape[0] < N:
            warnings.warn(f"level {level}: {X.shape[0]} vectors < N={N}; clamping N", stacklevel=2)
            k = X.shape[0]
        centres = kmeans(residual, k, iters=iters, seed=seed * 1009 + level)
        books.append(Codebook(level, centres))
        idx, _ = assign_nearest(residual, centres)
        residual = residual - centres[idx]
    return books


def encode_batch(X: np.ndarray, codebooks: list[Codebook], start_residual: np.ndarray | None = None):
    """Greedy residual encoding of every row; returns ``(codes, final_residuals)``."""
    r = np.array(X if start_residual is None else start_residual, dtype=np.float64, ndmin=2)
    codes = np.empty((r.shape[0], len(codebooks)), dtype=np.int64)
    for lvl, book in enumerate(codebooks):
        idx, _ = assign_nearest(r, book.centroids)
        codes[:, lvl] = idx
        r = r - book.centroids[idx]
    return codes, r


def encode_residual(x, codebooks: list[Codebook], start_residual=None) -> ResidualCode:
    """Per-level nearest centroid on the running residual.

    ``start_residual`` replaces the initial residual ``x`` (tail suffixes are
    encoded from what is left after subtracting the inherited head prefix).
    """
    x = np.asarray(x, dtype=np.float64)
    start = x if start_residual is None else np.asarray(start_residual, dtype=np.float64)
    codes, r = encode_batch(start[None, :], codebooks)
    return ResidualCode([int(c) for c in codes[0]], r[0])


def reconstruct(codes, codebooks: list[Codebook]) -> np.ndarray:
    return sum(book.centroids[c] for c, book in zip(codes, codebooks))


def save_codebooks(codebooks: list[Codebook], path, seed: int, name: str = "") -> None:
    d = int(codebooks[0].centroids.shape[1]) if codebooks else 0
    doc = {
        "name": name,
        "d": d,
        "N": [b.size for b in codebooks],
        "L": len(codebooks),
        "seed": seed,
        "levels": [{"centroids": b.centroids.tolist()} for b in codebooks],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_codebooks(path) -> list[Codebook]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return [Codebook(i, np.asarray(lv["centroids"], dtype=np.float64)) for i, lv in enumerate(doc["levels"])]
