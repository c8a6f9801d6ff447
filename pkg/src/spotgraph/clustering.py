"""Spot clustering in grid space and in embedding space, plus centroid-spot selection.

Lloyd's k-means with k-means++ seeding. The PRNG is keyed by the seed together
with a hash of the lexicographically sorted points, and all reductions run in
sorted order, so permuting the spot order permutes the assignments identically
(bit-for-bit on distinct inputs).
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np

from spotgraph.ingest import STSample, EmbeddingMatrix

log = logging.getLogger(__name__)


@dataclass
class KMeansResult:
    assignments: np.ndarray   # (n,) cluster ids in [0, c)
    means: np.ndarray         # (c, p)
    inertia_history: list[float]
    n_iter: int
    converged: bool


@dataclass
class ClusterModel:
    """Hard partition of a sample's spots plus one representative spot per cluster."""

    kind: str                     # "spatial" | "feature"
    assignments: np.ndarray       # (n,) cluster ids in [0, c)
    centroid_spot: np.ndarray     # (c,) spot indices, centroid_spot[k] in cluster k
    c: int
    target_cluster_size: int

    def __post_init__(self):
        if self.kind not in ("spatial", "feature"):
            raise ValueError(f"unknown cluster kind {self.kind!r}")
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        self.centroid_spot = np.asarray(self.centroid_spot, dtype=np.int64)
        n = self.assignments.shape[0]
        if self.c < 1 or self.centroid_spot.shape != (self.c,):
            raise ValueError(f"need one centroid spot per cluster ({self.c})")
        counts = np.bincount(self.assignments, minlength=self.c)
        if self.assignments.min(initial=0) < 0 or self.assignments.max(initial=0) >= self.c:
            raise ValueError("assignments out of range")
        if np.any(counts == 0):
            raise ValueError(f"empty cluster ids: {np.flatnonzero(counts == 0).tolist()}")
        for k in range(self.c):
            s = self.centroid_spot[k]
            if not 0 <= s < n or self.assignments[s] != k:
                raise ValueError(f"centroid spot {s} is not a member of cluster {k}")

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == k)


def _data_keyed_rng(seed: int, sorted_points: np.ndarray) -> np.random.Generator:
    digest = hashlib.sha256(sorted_points.tobytes()).digest()
    data_key = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, data_key])))


def _sq_dists(points: np.ndarray, means: np.ndarray) -> np.ndarray:
    d = points[:, None, :] - means[None, :, :]
    return np.einsum("ncp,ncp->nc", d, d)


def _plusplus_init(points: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    """Classic k-means++ seeding: D^2 sampling without greedy local trials."""
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, c):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining points coincide with chosen centers
            remaining = [i for i in range(n) if i not in set(chosen)]
            idx = remaining[0] if remaining else chosen[-1]
        chosen.append(idx)
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return points[np.array(chosen, dtype=np.int64)].copy()


def kmeans(points: np.ndarray, c: int, seed: int, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding, deterministic under spot permutation.

    An empty cluster encountered during iteration has its mean reinitialized to
    the point farthest from its currently assigned mean (the point moves with it).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= c <= n:
        raise ValueError(f"need n >= c >= 1, got n={n}, c={c}")

    order = np.lexsort(points.T[::-1])      # rows sorted lexicographically
    p = points[order]
    rng = _data_keyed_rng(seed, p)

    means = _plusplus_init(p, c, rng)
    assign = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(p, means)
        new_assign = d2.argmin(axis=1)      # ties resolve to the lowest cluster id

        counts = np.bincount(new_assign, minlength=c)
        for k in np.flatnonzero(counts == 0):
            movable = counts[new_assign] > 1
            if not movable.any():
                continue
            own = d2[np.arange(n), new_assign]
            own = np.where(movable, own, -np.inf)
            far = int(own.argmax())
            counts[new_assign[far]] -= 1
            new_assign[far] = k
            means[k] = p[far]
            counts[k] += 1

        for k in range(c):
            members = np.flatnonzero(new_assign == k)
            if members.size:
                means[k] = p[members].sum(axis=0) / members.size

        diff = p - means[new_assign]
        history.append(float(np.einsum("np,np->", diff, diff)))
        if np.array_equal(new_assign, assign):
            converged = True
            assign = new_assign
            break
        assign = new_assign

    out = np.empty(n, dtype=np.int64)
    out[order] = assign
    return KMeansResult(assignments=out, means=means, inertia_history=history,
                        n_iter=it, converged=converged)


def select_centroid_spot(cluster_members, embeddings: EmbeddingMatrix) -> int:
    """Member closest (Euclidean) to the mean embedding of the members.

    Ties break toward the lowest spot index. Used for spatial and feature
    clusters alike.
    """
    members = np.sort(np.asarray(cluster_members, dtype=np.int64))
    if members.size == 0:
        raise ValueError("empty cluster member list")
    vecs = embeddings.data[members]
    mean = vecs.sum(axis=0) / members.size
    d2 = ((vecs - mean) ** 2).sum(axis=1)
    return int(members[int(d2.argmin())])


def _backfill_empty(assignments: np.ndarray, c: int, points: np.ndarray) -> bool:
    """Force every cluster id in [0, c) to be non-empty (degenerate inputs only).

    Moves, for each empty cluster id in ascending order, the member of the
    largest donor cluster that lies farthest from the donor mean.
    """
    touched = False
    counts = np.bincount(assignments, minlength=c)
    for k in np.flatnonzero(counts == 0):
        donor = int(np.argmax(counts))
        members = np.flatnonzero(assignments == donor)
        mean = points[members].sum(axis=0) / members.size
        far = members[int(((points[members] - mean) ** 2).sum(axis=1).argmax())]
        assignments[far] = k
        counts[donor] -= 1
        counts[k] += 1
        touched = True
    return touched


def _cluster(points: np.ndarray, kind: str, embeddings: EmbeddingMatrix,
             target_cluster_size: int, seed: int) -> ClusterModel:
    n = points.shape[0]
    if target_cluster_size < 1:
        raise ValueError("target_cluster_size must be >= 1")
    c = max(1, math.ceil(n / target_cluster_size))
    result = kmeans(points, c, seed=seed)
    assignments = result.assignments.copy()
    if _backfill_empty(assignments, c, points):
        log.warning("%s clustering degenerate: empty clusters backfilled deterministically", kind)
    centroid_spot = np.array(
        [select_centroid_spot(np.flatnonzero(assignments == k), embeddings) for k in range(c)],
        dtype=np.int64,
    )
    return ClusterModel(kind=kind, assignments=assignments, centroid_spot=centroid_spot,
                        c=c, target_cluster_size=target_cluster_size)


def cluster_spatial(sample: STSample, embeddings: EmbeddingMatrix,
                    target_cluster_size: int = 100, seed: int = 3927) -> ClusterModel:
    """Cluster spots on their (grid_row, grid_col) coordinates.

    c = ceil(n / target_cluster_size). Embeddings are needed because the
    representative spot of every cluster is chosen in embedding space.
    """
    return _cluster(sample.grid_coords(), "spatial", embeddings, target_cluster_size, seed)


def cluster_feature(embeddings: EmbeddingMatrix, target_cluster_size: int = 100,
                    seed: int = 3927) -> ClusterModel:
    """Cluster spots on their patch embeddings; c = ceil(n / target_cluster_size)."""
    return _cluster(embeddings.data, "feature", embeddings, target_cluster_size, seed)
