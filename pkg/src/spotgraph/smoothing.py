"""Expression smoothing: logCPM normalization, 8-neighbor averaging, and
two-factor smoothing that mixes a spatial term (inverse Manhattan distance)
with a transcriptome-pattern term (Pearson distance on PCA scores).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from spotgraph.ingest import STSample, eight_neighbors

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpcsParams:
    """Parameters of the two-factor smoother.

    tau_s:   spatial neighborhood radius in Manhattan grid units
    tau_p:   number of pattern neighbors
    alpha:   overall smoothing strength (0 keeps the input)
    beta:    spatial-vs-pattern mix (1 = all spatial)
    pca_dim: dimensionality of the PCA space used for pattern distances
    """

    tau_s: int = 2
    tau_p: int = 16
    alpha: float = 0.6
    beta: float = 0.4
    pca_dim: int = 10

    def __post_init__(self):
        if self.tau_s < 0 or self.tau_p < 0:
            raise ValueError("tau_s and tau_p must be non-negative")
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in [0, 1]")
        if self.pca_dim < 1:
            raise ValueError("pca_dim must be >= 1")

    def as_dict(self) -> dict:
        return {"tau_s": self.tau_s, "tau_p": self.tau_p, "alpha": self.alpha,
                "beta": self.beta, "pca_dim": self.pca_dim}


def logcpm(expr: np.ndarray) -> np.ndarray:
    """ln(1 + 1e6 * x / rowsum) per entry; all-zero rows map to all zeros."""
    expr = np.asarray(expr, dtype=np.float64)
    rowsum = expr.sum(axis=1)
    scale = np.zeros_like(rowsum)
    nz = rowsum > 0
    scale[nz] = 1e6 / rowsum[nz]
    return np.log1p(expr * scale[:, None])


def smooth_8n(sample: STSample) -> np.ndarray:
    """Replace each spot's expression by the mean over itself and its existing
    8 grid neighbors (border spots average over fewer)."""
    expr = sample.expr_raw
    out = np.empty_like(expr)
    for i in range(sample.n_spots):
        members = eight_neighbors(sample, i) + [i]
        members.sort()
        out[i] = expr[members].sum(axis=0) / len(members)
    return out


def pca_project(expr: np.ndarray, k: int) -> np.ndarray:
    """Scores on the top-k principal components of the column-centered matrix.

    Components are ordered by non-increasing explained variance. Signs follow
    a fixed convention (largest-magnitude loading positive) so results do not
    depend on spot order or LAPACK sign choices.
    """
    expr = np.asarray(expr, dtype=np.float64)
    n, m = expr.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 rows")
    if not 1 <= k <= min(n, m):
        raise ValueError(f"k={k} out of range for a {n}x{m} matrix")
    centered = expr - expr.mean(axis=0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    # sign convention per component: entry of largest |loading| is positive
    for comp in range(vt.shape[0]):
        j = int(np.argmax(np.abs(vt[comp])))
        if vt[comp, j] < 0:
            vt[comp] = -vt[comp]
            u[:, comp] = -u[:, comp]
    return u[:, :k] * s[:k]


def pattern_distance(scores: np.ndarray, i: int, j: int) -> float:
    """Pearson correlation distance 1 - r between two score rows, in [0, 2].

    A zero-variance row has no defined correlation; the distance is pinned to
    the maximum (2.0) and a warning is logged.
    """
    a = np.asarray(scores[i], dtype=np.float64)
    b = np.asarray(scores[j], dtype=np.float64)
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        log.warning("pattern_distance: zero-variance score row (%d, %d); using max distance 2.0", i, j)
        return 2.0
    r = float((da * db).sum() / denom)
    return 1.0 - max(-1.0, min(1.0, r))


def _pattern_distance_matrix(scores: np.ndarray) -> np.ndarray:
    """Full n x n matrix of 1 - Pearson(scores_i, scores_j); zero-variance rows
    get distance 2.0 against everything."""
    z = scores - scores.mean(axis=1, keepdims=True)
    norm = np.sqrt((z * z).sum(axis=1))
    flat = norm == 0.0
    if np.any(flat):
        log.warning("pattern smoothing: %d zero-variance score rows pinned to max distance", int(flat.sum()))
    safe = np.where(flat, 1.0, norm)
    z = z / safe[:, None]
    corr = np.clip(z @ z.T, -1.0, 1.0)
    corr[flat, :] = -1.0
    corr[:, flat] = -1.0
    return 1.0 - corr


def _spatial_neighborhoods(sample: STSample, tau_s: int) -> list[np.ndarray]:
    """Per spot, ascending indices of spots within Manhattan distance [1, tau_s]."""
    offsets = [(dr, dc)
               for dr in range(-tau_s, tau_s + 1)
               for dc in range(-tau_s, tau_s + 1)
               if 0 < abs(dr) + abs(dc) <= tau_s]
    hoods = []
    for s in sample.spots:
        idx = [sample._coord_index.get((s.grid_row + dr, s.grid_col + dc)) for dr, dc in offsets]
        hoods.append(np.array(sorted(i for i in idx if i is not None), dtype=np.int64))
    return hoods


def spcs_smooth(sample: STSample, params: SpcsParams) -> np.ndarray:
    """Two-factor smoothing of the logCPM-normalized expression matrix.

    For each spot s with normalized row y_s:

        out_s = (1 - alpha) * y_s + alpha * (beta * spatial_s + (1 - beta) * pattern_s)

    where spatial_s averages spots within Manhattan distance tau_s with
    weights 1/d, and pattern_s averages the tau_p nearest spots by Pearson
    distance on pca_dim PCA scores with weights exp(-distance). An empty
    contribution set falls back to y_s, so the output row is always a convex
    combination of input rows.
    """
    y = logcpm(sample.expr_raw)
    n, m = y.shape
    if params.alpha == 0.0 or n < 2:
        return y.copy()

    coords = sample.grid_coords()
    hoods = _spatial_neighborhoods(sample, params.tau_s)

    k = min(params.pca_dim, n, m)
    if k < params.pca_dim:
        log.info("spcs: pca_dim clipped from %d to %d for a %dx%d matrix", params.pca_dim, k, n, m)
    scores = pca_project(y, k)
    pat = _pattern_distance_matrix(scores)

    out = np.empty_like(y)
    alpha, beta = params.alpha, params.beta
    for s in range(n):
        nbrs = hoods[s]
        if nbrs.size > 0:
            d = np.abs(coords[nbrs] - coords[s]).sum(axis=1)
            w = 1.0 / d
            spatial = (w[:, None] * y[nbrs]).sum(axis=0) / w.sum()
        else:
            spatial = y[s]

        if params.tau_p > 0:
            dist = pat[s].copy()
            dist[s] = np.inf  # a spot never smooths toward itself
            take = min(params.tau_p, n - 1)
            # ascending distance, ties broken by ascending spot index
            order = np.lexsort((np.arange(n), dist))[:take]
            order.sort()
            w = np.exp(-dist[order])
            pattern = (w[:, None] * y[order]).sum(axis=0) / w.sum()
        else:
            pattern = y[s]

        out[s] = (1.0 - alpha) * y[s] + alpha * (beta * spatial + (1.0 - beta) * pattern)
    return out
