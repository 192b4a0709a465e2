"""Spatial weight structures shared by the autocorrelation statistics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .grid_io import RegionSet

__all__ = [
    "WeightMatrix",
    "contiguity_weights",
    "inverse_distance_weights",
    "distance_decay",
    "row_standardize",
    "write_weights_csv",
    "read_weights_csv",
]

_EDGE_OFFSETS = ((0, 1), (1, 0))
_CORNER_OFFSETS = ((1, 1), (1, -1))


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Sparse non-negative weights ``w_ij`` with an empty diagonal."""

    matrix: sp.csr_matrix
    standardization: str = "none"

    def __post_init__(self):
        m = sp.csr_matrix(self.matrix, dtype=np.float64)
        if m.shape[0] != m.shape[1]:
            raise ValueError("weight matrix must be square")
        m.eliminate_zeros()
        m.sort_indices()
        if np.any(m.data < 0):
            raise ValueError("weights must be non-negative")
        if m.diagonal().any():
            raise ValueError("weights must have an empty diagonal")
        if self.standardization not in ("none", "row"):
            raise ValueError(f"unknown standardization {self.standardization!r}")
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def s0(self) -> float:
        return float(self.matrix.sum())

    @property
    def neighbor_counts(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def neighbors(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        return self.matrix.indices[lo:hi], self.matrix.data[lo:hi]

    def entries(self) -> Iterator[tuple[int, int, float]]:
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        for k in order:
            yield int(coo.row[k]), int(coo.col[k]), float(coo.data[k])

    def is_symmetric(self) -> bool:
        diff = self.matrix - self.matrix.T
        return diff.nnz == 0 or not np.any(diff.data)

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()


def _from_pairs(n: int, rows, cols, vals) -> sp.csr_matrix:
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def contiguity_weights(regions: RegionSet, rule: str = "edge_or_corner") -> WeightMatrix:
    """Binary contiguity: rook (``edge``) or queen (``edge_or_corner``) adjacency of cells."""
    if rule not in ("edge", "edge_or_corner"):
        raise ValueError(f"unknown contiguity rule {rule!r}")
    n = len(regions)
    if n == 0:
        return WeightMatrix(sp.csr_matrix((0, 0)))
    max_r = max(r for reg in regions for r, _ in reg.cells)
    max_c = max(c for reg in regions for _, c in reg.cells)
    labels = regions.label_raster((max_r + 1, max_c + 1))
    offsets = _EDGE_OFFSETS + (_CORNER_OFFSETS if rule == "edge_or_corner" else ())

    rows, cols = [], []
    H, W = labels.shape
    for dr, dc in offsets:
        if dc >= 0:
            a = labels[0:H - dr, 0:W - dc]
            b = labels[dr:H, dc:W]
        else:
            a = labels[0:H - dr, -dc:W]
            b = labels[dr:H, 0:W + dc]
        keep = (a >= 0) & (b >= 0) & (a != b)
        rows.append(a[keep])
        cols.append(b[keep])
    i = np.concatenate(rows)
    j = np.concatenate(cols)
    pairs = np.unique(np.stack([np.concatenate([i, j]), np.concatenate([j, i])], axis=1), axis=0)
    m = _from_pairs(n, pairs[:, 0], pairs[:, 1], np.ones(len(pairs)))
    return WeightMatrix(m)


def _check_distinct(points: np.ndarray) -> None:
    tree = cKDTree(points)
    dup = tree.query_pairs(0.0)
    if dup:
        i, j = min(dup)
        raise ValueError(f"zero distance between centroids {i} and {j}")


def inverse_distance_weights(centroids: Sequence[Sequence[float]], gamma: float = 1.0,
                             cutoff: float | None = None) -> WeightMatrix:
    """``w_ij = d(i, j) ** -gamma`` for pairs within ``cutoff`` (all pairs when None)."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    pts = np.asarray(centroids, dtype=np.float64)
    n = len(pts)
    if n == 0:
        return WeightMatrix(sp.csr_matrix((0, 0)))
    _check_distinct(pts)
    if cutoff is None:
        d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        return WeightMatrix(sp.csr_matrix(d ** -gamma))
    tree = cKDTree(pts)
    dist = tree.sparse_distance_matrix(tree, cutoff, output_type="coo_matrix")
    keep = dist.row != dist.col
    return WeightMatrix(_from_pairs(n, dist.row[keep], dist.col[keep], dist.data[keep] ** -gamma))


def distance_decay(W: WeightMatrix, centroids: Sequence[Sequence[float]], gamma: float) -> WeightMatrix:
    """Replace each existing link weight by ``d(i, j) ** -gamma``; the pattern is kept."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    pts = np.asarray(centroids, dtype=np.float64)
    coo = W.matrix.tocoo()
    d = np.sqrt(((pts[coo.row] - pts[coo.col]) ** 2).sum(-1))
    if np.any(d == 0):
        k = int(np.argmin(d))
        raise ValueError(f"zero distance between centroids {coo.row[k]} and {coo.col[k]}")
    return WeightMatrix(_from_pairs(W.n, coo.row, coo.col, d ** -gamma), W.standardization)


def row_standardize(W: WeightMatrix) -> WeightMatrix:
    if W.standardization == "row":
        return W
    sums = W.row_sums()
    scale = np.divide(1.0, sums, out=np.zeros_like(sums), where=sums > 0)
    return WeightMatrix(sp.diags(scale) @ W.matrix, "row")


def write_weights_csv(W: WeightMatrix, path) -> None:
    lines = [f"# n={W.n} standardization={W.standardization}"]
    lines += [f"{i},{j},{w!r}" for i, j, w in W.entries()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_weights_csv(path) -> WeightMatrix:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#"):
        raise ValueError("weights CSV lacks its header line")
    meta = dict(tok.split("=", 1) for tok in text[0][1:].split())
    n = int(meta["n"])
    rows, cols, vals = [], [], []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        try:
            i, j, w = line.split(",")
            rows.append(int(i))
            cols.append(int(j))
            vals.append(float(w))
        except ValueError:
            raise ValueError(f"line {lineno}: expected 'i,j,w'") from None
    return WeightMatrix(_from_pairs(n, rows, cols, vals), meta.get("standardization", "none"))
