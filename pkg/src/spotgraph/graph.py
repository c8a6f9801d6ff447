"""Hierarchical graph assembly over tissue spots.

Three edge families: internal edges (cluster member -> centroid spot, one per
clustering), shortcut edges (complete graph over the deduplicated centroid
set), and one-hop edges (8-connectivity on the grid). Internal plus shortcut
edges connect any two nodes within three hops; that property is validated on
every assembled graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from spotgraph.ingest import STSample, eight_neighbors
from spotgraph.clustering import ClusterModel

INTERNAL_SPATIAL = "internal_spatial"
INTERNAL_FEATURE = "internal_feature"
SHORTCUT = "shortcut"
ONE_HOP = "one_hop"
EDGE_KINDS = (INTERNAL_SPATIAL, INTERNAL_FEATURE, SHORTCUT, ONE_HOP)


class GraphInvariantError(ValueError):
    """Raised when an assembled graph violates one of its structural invariants."""


@dataclass
class HierGraph:
    """Undirected typed edge list over ``n_nodes`` spots.

    Each logical edge is stored once as (src < dst, kind). The same node pair
    may appear under several kinds; for message passing the pairs are
    collapsed into one adjacency entry (see :meth:`adjacency_pairs`).
    """

    n_nodes: int
    src: np.ndarray        # (E,)
    dst: np.ndarray        # (E,)
    kind: np.ndarray       # (E,) uint8 index into EDGE_KINDS

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        self.kind = np.asarray(self.kind, dtype=np.uint8)
        if not (self.src.shape == self.dst.shape == self.kind.shape):
            raise GraphInvariantError("edge arrays must have equal length")
        if self.src.size:
            if self.src.min() < 0 or self.dst.max() >= self.n_nodes:
                raise GraphInvariantError("edge endpoint out of range")
            if np.any(self.src == self.dst):
                raise GraphInvariantError("self-loops are not stored")
            if np.any(self.src > self.dst):
                raise GraphInvariantError("edges must be stored with src < dst")
            triples = set(zip(self.src.tolist(), self.dst.tolist(), self.kind.tolist()))
            if len(triples) != self.src.size:
                raise GraphInvariantError("duplicate (src, dst, kind) triple")

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    def edges_of_kind(self, kind: str) -> np.ndarray:
        code = EDGE_KINDS.index(kind)
        mask = self.kind == code
        return np.stack([self.src[mask], self.dst[mask]], axis=1)

    def adjacency_pairs(self, kinds: tuple[str, ...] = EDGE_KINDS) -> np.ndarray:
        """Unique undirected (u, v) pairs over the selected kinds, sorted.

        Cross-kind duplicates collapse to a single entry so message passing
        never double-counts a neighbor.
        """
        codes = [EDGE_KINDS.index(k) for k in kinds]
        mask = np.isin(self.kind, codes)
        if not mask.any():
            return np.empty((0, 2), dtype=np.int64)
        pairs = np.stack([self.src[mask], self.dst[mask]], axis=1)
        return np.unique(pairs, axis=0)


def _canonical(pairs) -> np.ndarray:
    """Dedup and canonicalize an iterable of (u, v) pairs as sorted (min, max) rows."""
    arr = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
    if arr.size == 0:
        return arr
    lo = np.minimum(arr[:, 0], arr[:, 1])
    hi = np.maximum(arr[:, 0], arr[:, 1])
    return np.unique(np.stack([lo, hi], axis=1), axis=0)


def build_internal_edges(cm: ClusterModel) -> np.ndarray:
    """(member, centroid_spot) for every non-centroid member; n - c edges."""
    edges = []
    for k in range(cm.c):
        centroid = int(cm.centroid_spot[k])
        for member in cm.members(k):
            if member != centroid:
                edges.append((int(member), centroid))
    return _canonical(edges)


def build_shortcut_edges(spatial: ClusterModel, feature: ClusterModel) -> np.ndarray:
    """Complete graph over the deduplicated union of both centroid-spot lists."""
    hubs = sorted(set(spatial.centroid_spot.tolist()) | set(feature.centroid_spot.tolist()))
    return _canonical(combinations(hubs, 2))


def build_one_hop_edges(sample: STSample) -> np.ndarray:
    """Undirected 8-connectivity grid adjacency, each edge stored once."""
    edges = []
    for i in range(sample.n_spots):
        for j in eight_neighbors(sample, i):
            if j > i:
                edges.append((i, j))
    return _canonical(edges)


def _hop3_reachability(n: int, pairs: np.ndarray) -> bool:
    """True iff every node reaches every node within 3 hops over ``pairs``."""
    reach = np.eye(n, dtype=np.float32)
    for u, v in pairs:
        reach[u, v] = 1.0
        reach[v, u] = 1.0
    two = (reach @ reach) > 0
    three = (two.astype(np.float32) @ reach) > 0
    return bool(three.all())


def validate_hier_invariants(g: HierGraph, spatial: ClusterModel, feature: ClusterModel) -> None:
    """Check every structural invariant of an assembled hierarchical graph."""
    n = g.n_nodes

    for cm, kind in ((spatial, INTERNAL_SPATIAL), (feature, INTERNAL_FEATURE)):
        pairs = g.edges_of_kind(kind)
        if pairs.shape[0] != n - cm.c:
            raise GraphInvariantError(
                f"{kind} edge count {pairs.shape[0]} != n - c = {n - cm.c}")
        degree = np.zeros(n, dtype=np.int64)
        for u, v in pairs:
            degree[u] += 1
            degree[v] += 1
        hubs = set(cm.centroid_spot.tolist())
        for v in range(n):
            if v in hubs:
                continue
            if degree[v] != 1:
                raise GraphInvariantError(
                    f"non-centroid node {v} has {degree[v]} {kind} edges, expected exactly 1")

    hubs = sorted(set(spatial.centroid_spot.tolist()) | set(feature.centroid_spot.tolist()))
    expected = len(hubs) * (len(hubs) - 1) // 2
    got = g.edges_of_kind(SHORTCUT).shape[0]
    if got != expected:
        raise GraphInvariantError(
            f"shortcut edge count {got} != complete graph over {len(hubs)} centroids ({expected})")

    backbone = g.adjacency_pairs((INTERNAL_SPATIAL, INTERNAL_FEATURE, SHORTCUT))
    if not _hop3_reachability(n, backbone):
        raise GraphInvariantError(
            "hop distance over internal+shortcut edges exceeds 3 for some node pair")


def assemble(sample: STSample, spatial_cm: ClusterModel, feature_cm: ClusterModel) -> HierGraph:
    """Union of internal, shortcut, and one-hop edges, validated before returning."""
    n = sample.n_spots
    for cm in (spatial_cm, feature_cm):
        if cm.assignments.shape[0] != n:
            raise GraphInvariantError(
                f"{cm.kind} clustering covers {cm.assignments.shape[0]} spots, sample has {n}")
    families = [
        (build_internal_edges(spatial_cm), INTERNAL_SPATIAL),
        (build_internal_edges(feature_cm), INTERNAL_FEATURE),
        (build_shortcut_edges(spatial_cm, feature_cm), SHORTCUT),
        (build_one_hop_edges(sample), ONE_HOP),
    ]
    src, dst, kind = [], [], []
    for pairs, name in families:
        code = EDGE_KINDS.index(name)
        for u, v in pairs:
            src.append(u)
            dst.append(v)
            kind.append(code)
    g = HierGraph(n_nodes=n, src=np.array(src, dtype=np.int64),
                  dst=np.array(dst, dtype=np.int64), kind=np.array(kind, dtype=np.uint8))
    validate_hier_invariants(g, spatial_cm, feature_cm)
    return g


def one_hop_graph(sample: STSample) -> HierGraph:
    """Graph with only the 8-connectivity one-hop edges (ablation variant)."""
    pairs = build_one_hop_edges(sample)
    code = EDGE_KINDS.index(ONE_HOP)
    return HierGraph(n_nodes=sample.n_spots, src=pairs[:, 0], dst=pairs[:, 1],
                     kind=np.full(pairs.shape[0], code, dtype=np.uint8))


def save_edges(g: HierGraph, spot_ids, path) -> None:
    """Edge-list TSV (src, dst, kind) with spot ids, for inspection."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("src\tdst\tkind\n")
        for u, v, k in zip(g.src, g.dst, g.kind):
            fh.write(f"{spot_ids[u]}\t{spot_ids[v]}\t{EDGE_KINDS[k]}\n")
