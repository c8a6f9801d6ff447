"""Synthetic slides with planted morphological regions.

The grid is partitioned into spatially coherent regions; region 0 is always
split into two islands at opposite corners so that some same-region spot
pairs sit far beyond any local neighborhood. Each region carries an
orthogonal prototype embedding and elevated expression on its own signature
genes; Gaussian noise and random dropout zeros emulate assay artifacts.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from spotgraph.ingest import STSample, SpotRecord, EmbeddingMatrix

BASE_EXPRESSION = 1.0
SIGNATURE_EXPRESSION = 50.0
PROTOTYPE_SCALE = 4.0
EMBEDDING_NOISE_FACTOR = 4.0
PIXELS_PER_SPOT = 200.0


class InfeasibleSpecError(ValueError):
    """The requested synthetic layout cannot be constructed."""


@dataclass(frozen=True)
class SynthSpec:
    grid_rows: int
    grid_cols: int
    n_regions: int
    genes_per_region: int = 5
    embedding_dim: int = 256
    noise_sigma: float = 0.0
    dropout_rate: float = 0.0
    seed: int = 3927
    layout: str = "full"       # "full": every cell a spot; "patches": sparse
    #                            2x2 tissue islets separated by one-cell gaps

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ValueError("grid dimensions must be >= 1")
        if self.n_regions < 1:
            raise ValueError("n_regions must be >= 1")
        if self.genes_per_region < 1:
            raise ValueError("genes_per_region must be >= 1")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.layout not in ("full", "patches"):
            raise ValueError(f"unknown layout {self.layout!r}")


def _island_blocks(rows: int, cols: int) -> tuple[list, list]:
    """Two same-region blocks at opposite corners, never 8-adjacent.

    The blocks are separated when at least one axis leaves a one-cell gap
    between them (8-adjacency needs contact on both axes).
    """
    side = max(1, min(rows, cols) // 4)
    while side > 1 and 2 * side + 1 > max(rows, cols):
        side -= 1
    if side > min(rows, cols) or 2 * side + 1 > max(rows, cols):
        raise InfeasibleSpecError(
            f"grid {rows}x{cols} too small to split a region into two islands")
    a = [(r, c) for r in range(min(side, rows)) for c in range(min(side, cols))]
    b = [(r, c) for r in range(rows - min(side, rows), rows)
         for c in range(cols - min(side, cols), cols)]
    return a, b


def _flood_fill(rows, cols, taken: dict, seeds: list, rng) -> None:
    """Grow regions from seed cells with interleaved BFS until the grid is covered."""
    frontiers = [deque([cell]) for cell in seeds]
    for region, cell in enumerate(seeds):
        taken[cell] = region + 1  # regions 1..R-1; region 0 is pre-placed
    active = True
    while active:
        active = False
        for region, frontier in enumerate(frontiers):
            if not frontier:
                continue
            active = True
            r, c = frontier.popleft()
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nxt = (r + dr, c + dc)
                if 0 <= nxt[0] < rows and 0 <= nxt[1] < cols and nxt not in taken:
                    taken[nxt] = region + 1
                    frontier.append(nxt)


def generate(spec: SynthSpec) -> tuple[STSample, EmbeddingMatrix, np.ndarray]:
    """Build (sample, embeddings, region_labels) deterministically from the seed."""
    rows, cols, regions = spec.grid_rows, spec.grid_cols, spec.n_regions
    n = rows * cols
    if regions > n:
        raise InfeasibleSpecError(f"{regions} regions but only {n} spots")
    if regions < 2:
        raise InfeasibleSpecError(
            "need at least 2 regions: region 0 is split into islands and the "
            "separating territory must belong to other regions")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 0x5e17])))

    block_a, block_b = _island_blocks(rows, cols)
    taken = {cell: 0 for cell in block_a + block_b}
    free = [(r, c) for r in range(rows) for c in range(cols) if (r, c) not in taken]
    if len(free) < regions - 1:
        raise InfeasibleSpecError(f"not enough free cells for {regions - 1} more regions")
    seed_idx = rng.choice(len(free), size=regions - 1, replace=False)
    _flood_fill(rows, cols, taken, [free[i] for i in sorted(seed_idx)], rng)
    if len(taken) != n:
        raise InfeasibleSpecError("flood fill left unassigned cells (internal error)")

    if spec.layout == "patches":
        cells = [(r, c) for r in range(rows) for c in range(cols)
                 if r % 3 < 2 and c % 3 < 2]
    else:
        cells = [(r, c) for r in range(rows) for c in range(cols)]
    present = {region for cell in cells for region in (taken[cell],)}
    if len(present) != regions:
        raise InfeasibleSpecError("sparse layout dropped an entire region; "
                                  "use a larger grid or fewer regions")

    labels = np.empty(len(cells), dtype=np.int64)
    spots = []
    for i, (r, c) in enumerate(cells):
        labels[i] = taken[(r, c)]
        spots.append(SpotRecord(spot_id=f"s{i:04d}", grid_row=r, grid_col=c,
                                pixel_x=c * PIXELS_PER_SPOT, pixel_y=r * PIXELS_PER_SPOT))

    # orthonormal prototypes, one per region, shared across samples: the same
    # morphology must map to the same embedding on every slide, as it would
    # with a single patch encoder
    if spec.embedding_dim < regions:
        raise InfeasibleSpecError(
            f"embedding_dim {spec.embedding_dim} < {regions} regions (prototypes must be orthogonal)")
    proto_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([0x9e07, spec.embedding_dim, regions])))
    raw = proto_rng.standard_normal((spec.embedding_dim, regions))
    q, _ = np.linalg.qr(raw)
    prototypes = PROTOTYPE_SCALE * q.T                       # (regions, d)
    emb = prototypes[labels]
    if spec.noise_sigma > 0:
        emb = emb + rng.normal(0.0, spec.noise_sigma * EMBEDDING_NOISE_FACTOR,
                               size=emb.shape)

    m = regions * spec.genes_per_region
    genes = tuple(f"gene_{j:03d}" for j in range(m))
    expr = np.full((len(cells), m), BASE_EXPRESSION)
    for region in range(regions):
        lo = region * spec.genes_per_region
        hi = lo + spec.genes_per_region
        expr[labels == region, lo:hi] = SIGNATURE_EXPRESSION
    if spec.noise_sigma > 0:
        expr = expr + rng.normal(0.0, spec.noise_sigma, size=expr.shape)
    if spec.dropout_rate > 0:
        expr = np.where(rng.random(expr.shape) < spec.dropout_rate, 0.0, expr)
    expr = np.maximum(expr, 0.0)

    sample = STSample(sample_id=f"synth{spec.seed}", spots=tuple(spots), genes=genes,
                      expr_raw=expr)
    embeddings = EmbeddingMatrix(sample_id=sample.sample_id, dim=spec.embedding_dim,
                                 data=emb)
    return sample, embeddings, labels
