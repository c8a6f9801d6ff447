"""Loading, validation, and persistence of spot tables, expression and embedding matrices.

File formats are plain TSV with one header row:

* spots file:      ``spot_id  grid_row  grid_col  pixel_x  pixel_y``
* expression file: ``spot_id`` followed by one column per gene
* embedding file:  ``spot_id`` followed by one numeric column per dimension

Rows are always aligned by ``spot_id``, never by file order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SPOT_COLUMNS = ("spot_id", "grid_row", "grid_col", "pixel_x", "pixel_y")


class IngestError(ValueError):
    """Raised when an input file violates the data contract."""


@dataclass(frozen=True)
class SpotRecord:
    """One tissue spot: grid position plus pixel position of the patch centroid."""

    spot_id: str
    grid_row: int
    grid_col: int
    pixel_x: float
    pixel_y: float


@dataclass
class STSample:
    """One slide: spots, gene names, raw and (optionally) smoothed expression.

    ``expr_raw`` has one row per spot (in ``spots`` order) and one column per
    gene; all entries are finite and non-negative. Arrays are frozen after
    validation and safe to share read-only.
    """

    sample_id: str
    spots: tuple[SpotRecord, ...]
    genes: tuple[str, ...]
    expr_raw: np.ndarray
    expr_smoothed: np.ndarray | None = None
    grid_kind: str = "square"
    _coord_index: dict[tuple[int, int], int] = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        self.spots = tuple(self.spots)
        self.genes = tuple(str(g) for g in self.genes)
        self.expr_raw = _freeze(np.asarray(self.expr_raw, dtype=np.float64))
        if self.expr_smoothed is not None:
            self.expr_smoothed = _freeze(np.asarray(self.expr_smoothed, dtype=np.float64))
        self._validate()
        self._coord_index = {(s.grid_row, s.grid_col): i for i, s in enumerate(self.spots)}

    def _validate(self):
        n, m = len(self.spots), len(self.genes)
        if self.expr_raw.shape != (n, m):
            raise IngestError(
                f"sample {self.sample_id!r}: expression matrix shape {self.expr_raw.shape} "
                f"does not match {n} spots x {m} genes"
            )
        seen_ids: set[str] = set()
        seen_coords: set[tuple[int, int]] = set()
        for s in self.spots:
            if s.spot_id in seen_ids:
                raise IngestError(f"sample {self.sample_id!r}: duplicate spot_id {s.spot_id!r}")
            seen_ids.add(s.spot_id)
            if s.grid_row < 0 or s.grid_col < 0:
                raise IngestError(
                    f"sample {self.sample_id!r}: spot {s.spot_id!r} has negative grid coordinate "
                    f"({s.grid_row}, {s.grid_col})"
                )
            coord = (s.grid_row, s.grid_col)
            if coord in seen_coords:
                raise IngestError(
                    f"sample {self.sample_id!r}: duplicate grid coordinate {coord} at spot {s.spot_id!r}"
                )
            seen_coords.add(coord)
        _check_matrix(self.expr_raw, [s.spot_id for s in self.spots], self.genes,
                      what=f"sample {self.sample_id!r} expression", nonnegative=True)

    @property
    def n_spots(self) -> int:
        return len(self.spots)

    @property
    def n_genes(self) -> int:
        return len(self.genes)

    @property
    def spot_ids(self) -> list[str]:
        return [s.spot_id for s in self.spots]

    def grid_coords(self) -> np.ndarray:
        """(n, 2) float array of (grid_row, grid_col)."""
        return np.array([(s.grid_row, s.grid_col) for s in self.spots], dtype=np.float64)

    def with_smoothed(self, smoothed: np.ndarray) -> "STSample":
        return STSample(self.sample_id, self.spots, self.genes, self.expr_raw,
                        expr_smoothed=smoothed, grid_kind=self.grid_kind)


@dataclass
class EmbeddingMatrix:
    """Per-spot patch embeddings, row-aligned with the owning sample's spots."""

    sample_id: str
    dim: int
    data: np.ndarray

    def __post_init__(self):
        self.data = _freeze(np.asarray(self.data, dtype=np.float64))
        if self.data.ndim != 2 or self.data.shape[1] != self.dim:
            raise IngestError(
                f"embeddings for {self.sample_id!r}: expected n x {self.dim}, got {self.data.shape}"
            )
        if self.dim <= 0:
            raise IngestError(f"embeddings for {self.sample_id!r}: dimension must be positive")
        if not np.all(np.isfinite(self.data)):
            bad = np.argwhere(~np.isfinite(self.data))[0]
            raise IngestError(
                f"embeddings for {self.sample_id!r}: non-finite value at row {bad[0]}, column {bad[1]}"
            )


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _check_matrix(mat, row_names, col_names, what, nonnegative=False):
    if not np.all(np.isfinite(mat)):
        i, j = np.argwhere(~np.isfinite(mat))[0]
        raise IngestError(
            f"{what}: non-finite value at spot {row_names[i]!r}, column {col_names[j]!r}"
        )
    if nonnegative and np.any(mat < 0):
        i, j = np.argwhere(mat < 0)[0]
        raise IngestError(
            f"{what}: negative value {mat[i, j]!r} at spot {row_names[i]!r}, column {col_names[j]!r}"
        )


def _read_tsv(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.exists():
        raise IngestError(f"file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip() != ""]
    if not lines:
        raise IngestError(f"{path}: empty file")
    header = lines[0].split("\t")
    rows = [ln.split("\t") for ln in lines[1:]]
    width = len(header)
    for k, row in enumerate(rows):
        if len(row) != width:
            raise IngestError(f"{path}: row {k + 2} has {len(row)} fields, header has {width}")
    return header, rows


def _parse_float(text, path, row, col):
    try:
        v = float(text)
    except ValueError:
        raise IngestError(f"{path}: cannot parse {text!r} at spot {row!r}, column {col!r}") from None
    if not math.isfinite(v):
        raise IngestError(f"{path}: non-finite value {text!r} at spot {row!r}, column {col!r}")
    return v


def _parse_int(text, path, row, col):
    try:
        return int(text)
    except ValueError:
        raise IngestError(f"{path}: cannot parse {text!r} as integer at spot {row!r}, column {col!r}") from None


def load_sample(spots_path, expr_path, sample_id: str | None = None) -> STSample:
    """Load and validate one sample from its spot table and expression matrix.

    Expression rows are matched to spots by ``spot_id``; the two files may
    list spots in different orders. Raises :class:`IngestError` with a located
    message on row-count mismatch, duplicate coordinates, or bad values.
    """
    spots_path, expr_path = Path(spots_path), Path(expr_path)
    if sample_id is None:
        sample_id = spots_path.resolve().parent.name or spots_path.stem

    header, rows = _read_tsv(spots_path)
    col = {name: k for k, name in enumerate(header)}
    missing = [c for c in SPOT_COLUMNS if c not in col]
    if missing:
        raise IngestError(f"{spots_path}: missing columns {missing}")
    spots = []
    for r in rows:
        sid = r[col["spot_id"]]
        spots.append(SpotRecord(
            spot_id=sid,
            grid_row=_parse_int(r[col["grid_row"]], spots_path, sid, "grid_row"),
            grid_col=_parse_int(r[col["grid_col"]], spots_path, sid, "grid_col"),
            pixel_x=_parse_float(r[col["pixel_x"]], spots_path, sid, "pixel_x"),
            pixel_y=_parse_float(r[col["pixel_y"]], spots_path, sid, "pixel_y"),
        ))

    eheader, erows = _read_tsv(expr_path)
    if eheader[0] != "spot_id":
        raise IngestError(f"{expr_path}: first column must be 'spot_id', got {eheader[0]!r}")
    genes = tuple(eheader[1:])
    if len(erows) != len(spots):
        raise IngestError(
            f"{expr_path}: row-count mismatch ({len(erows)} expression rows for {len(spots)} spots)"
        )
    by_id = {}
    for r in erows:
        sid = r[0]
        if sid in by_id:
            raise IngestError(f"{expr_path}: duplicate spot_id {sid!r}")
        by_id[sid] = r
    expr = np.empty((len(spots), len(genes)), dtype=np.float64)
    for i, s in enumerate(spots):
        row = by_id.get(s.spot_id)
        if row is None:
            raise IngestError(f"{expr_path}: missing expression row for spot {s.spot_id!r}")
        for j, g in enumerate(genes):
            expr[i, j] = _parse_float(row[1 + j], expr_path, s.spot_id, g)

    return STSample(sample_id=sample_id, spots=tuple(spots), genes=genes, expr_raw=expr)


def load_embeddings(path, sample: STSample) -> EmbeddingMatrix:
    """Load the per-spot embedding matrix, reordered to the sample's spot order."""
    path = Path(path)
    header, rows = _read_tsv(path)
    if header[0] != "spot_id":
        raise IngestError(f"{path}: first column must be 'spot_id', got {header[0]!r}")
    dim = len(header) - 1
    if dim <= 0:
        raise IngestError(f"{path}: no embedding columns")
    by_id = {}
    for r in rows:
        sid = r[0]
        if sid in by_id:
            raise IngestError(f"{path}: duplicate spot_id {sid!r}")
        by_id[sid] = r
    known = set(sample.spot_ids)
    extra = [sid for sid in by_id if sid not in known]
    if extra:
        raise IngestError(f"{path}: embeddings for unknown spot_ids {sorted(extra)}")
    absent = [sid for sid in sample.spot_ids if sid not in by_id]
    if absent:
        raise IngestError(f"{path}: missing embeddings for spot_ids {absent}")
    data = np.empty((sample.n_spots, dim), dtype=np.float64)
    for i, sid in enumerate(sample.spot_ids):
        row = by_id[sid]
        for j in range(dim):
            data[i, j] = _parse_float(row[1 + j], path, sid, header[1 + j])
    return EmbeddingMatrix(sample_id=sample.sample_id, dim=dim, data=data)


def eight_neighbors(sample: STSample, spot_index: int) -> list[int]:
    """Indices of existing spots in the 8-neighborhood of ``spot_index``.

    Border spots and spots next to tissue holes return fewer than 8; the
    relation is symmetric. Indices are returned in ascending order.
    """
    if not 0 <= spot_index < sample.n_spots:
        raise IndexError(f"spot index {spot_index} out of range for {sample.n_spots} spots")
    s = sample.spots[spot_index]
    out = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            j = sample._coord_index.get((s.grid_row + dr, s.grid_col + dc))
            if j is not None:
                out.append(j)
    return sorted(out)


# -- persistence --------------------------------------------------------------

def _fmt(v) -> str:
    # repr of a Python float is the shortest string that round-trips exactly
    return repr(float(v))


def save_spots(sample: STSample, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(SPOT_COLUMNS) + "\n")
        for s in sample.spots:
            fh.write(f"{s.spot_id}\t{s.grid_row}\t{s.grid_col}\t{_fmt(s.pixel_x)}\t{_fmt(s.pixel_y)}\n")


def save_matrix(path, spot_ids: Sequence[str], col_names: Sequence[str], mat: np.ndarray) -> None:
    """Write a spot-aligned matrix in the standard TSV layout (bit round-trip safe)."""
    mat = np.asarray(mat)
    if mat.shape != (len(spot_ids), len(col_names)):
        raise IngestError(f"cannot save matrix of shape {mat.shape} for "
                          f"{len(spot_ids)} spots x {len(col_names)} columns")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("spot_id\t" + "\t".join(col_names) + "\n")
        for i, sid in enumerate(spot_ids):
            fh.write(sid + "\t" + "\t".join(_fmt(v) for v in mat[i]) + "\n")


def save_expression(sample: STSample, path, smoothed: bool = False) -> None:
    mat = sample.expr_smoothed if smoothed else sample.expr_raw
    if mat is None:
        raise IngestError(f"sample {sample.sample_id!r} has no smoothed expression to save")
    save_matrix(path, sample.spot_ids, sample.genes, mat)


def save_embeddings(emb: EmbeddingMatrix, spot_ids: Sequence[str], path) -> None:
    cols = [f"e{j}" for j in range(emb.dim)]
    save_matrix(path, spot_ids, cols, emb.data)
