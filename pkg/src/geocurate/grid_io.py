"""Raster and region ingestion.

Rasters travel as ESRI ASCII grids. Row 0 of ``RasterGrid.values`` is the
northern-most row, as in the file body; ``origin_x``/``origin_y`` locate the
lower-left corner of the grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "GridFormatError",
    "RegionError",
    "GridKind",
    "RasterGrid",
    "Region",
    "RegionSet",
    "Unit",
    "UnitGrid",
    "read_ascii_grid",
    "write_ascii_grid",
    "region_aggregate",
    "partition_units",
    "load_regions",
    "regions_from_label_raster",
]

Cell = tuple[int, int]

_REQUIRED_KEYS = ("ncols", "nrows", "cellsize")
_HEADER_KEYS = {
    "ncols", "nrows", "xllcorner", "yllcorner", "xllcenter", "yllcenter",
    "cellsize", "nodata_value",
}


class GridFormatError(ValueError):
    """Malformed ASCII grid; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class RegionError(ValueError):
    pass


class GridKind(str, Enum):
    CONTINUOUS = "continuous"
    CATEGORICAL = "categorical"


@dataclass(frozen=True, eq=False)
class RasterGrid:
    values: np.ndarray
    cell_size: float
    origin_x: float = 0.0
    origin_y: float = 0.0
    nodata: float = -9999.0
    kind: GridKind = GridKind.CONTINUOUS

    def __post_init__(self):
        kind = GridKind(self.kind)
        object.__setattr__(self, "kind", kind)
        values = np.array(self.values, copy=True)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise GridFormatError("values must be a non-empty 2-D array")
        if not self.cell_size > 0:
            raise GridFormatError("cell_size must be positive")
        if kind is GridKind.CATEGORICAL:
            if values.dtype.kind == "f":
                valid = values[values != self.nodata]
                if not np.all(np.isfinite(valid)) or np.any(valid != np.round(valid)):
                    raise GridFormatError("categorical grid holds non-integer codes")
            values = values.astype(np.int64)
            valid = values[values != self.nodata]
            if np.any(valid < 0):
                raise GridFormatError("categorical grid holds negative class codes")
        else:
            values = values.astype(np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def valid_mask(self) -> np.ndarray:
        mask = self.values != self.nodata
        if self.kind is GridKind.CONTINUOUS:
            mask &= np.isfinite(self.values)
        return mask

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        x = self.origin_x + (col + 0.5) * self.cell_size
        y = self.origin_y + (self.rows - row - 0.5) * self.cell_size
        return x, y

    def cell_at(self, x: float, y: float) -> Cell | None:
        col = math.floor((x - self.origin_x) / self.cell_size)
        row = self.rows - 1 - math.floor((y - self.origin_y) / self.cell_size)
        if 0 <= row < self.rows and 0 <= col < self.cols:
            return row, col
        return None

    def same_geometry(self, other: "RasterGrid") -> bool:
        return (
            self.shape == other.shape
            and self.cell_size == other.cell_size
            and self.origin_x == other.origin_x
            and self.origin_y == other.origin_y
        )


def _parse_number(token: str, line: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise GridFormatError(f"non-numeric token {token!r}", line) from None


def _sidecar_kind(path: Path) -> GridKind | None:
    sidecar = path.with_suffix(".kind")
    if sidecar.exists():
        return GridKind(sidecar.read_text().strip().lower())
    return None


def read_ascii_grid(path, kind: GridKind | str | None = None) -> RasterGrid:
    """Parse an ESRI ASCII grid.

    ``kind`` comes from the caller; when omitted, a ``<stem>.kind`` sidecar
    holding ``continuous`` or ``categorical`` is honoured, else continuous.
    """
    path = Path(path)
    if kind is None:
        kind = _sidecar_kind(path) or GridKind.CONTINUOUS
    kind = GridKind(kind)

    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()

    header: dict[str, float] = {}
    lineno = 0
    while lineno < len(lines):
        parts = lines[lineno].split()
        if not parts:
            lineno += 1
            continue
        key = parts[0].lower()
        if key not in _HEADER_KEYS:
            break
        if len(parts) != 2:
            raise GridFormatError(f"malformed header entry {lines[lineno]!r}", lineno + 1)
        if key in header:
            raise GridFormatError(f"duplicate header key {parts[0]!r}", lineno + 1)
        header[key] = _parse_number(parts[1], lineno + 1)
        lineno += 1

    for key in _REQUIRED_KEYS:
        if key not in header:
            raise GridFormatError(f"malformed header: missing {key}", lineno + 1)
    ncols, nrows = header["ncols"], header["nrows"]
    if ncols != int(ncols) or nrows != int(nrows) or ncols < 1 or nrows < 1:
        raise GridFormatError("malformed header: ncols/nrows must be positive integers")
    ncols, nrows = int(ncols), int(nrows)
    cell_size = header["cellsize"]
    if not cell_size > 0:
        raise GridFormatError("cell_size must be positive")

    if "xllcorner" in header:
        origin_x = header["xllcorner"]
    elif "xllcenter" in header:
        origin_x = header["xllcenter"] - cell_size / 2
    else:
        raise GridFormatError("malformed header: missing xllcorner", lineno + 1)
    if "yllcorner" in header:
        origin_y = header["yllcorner"]
    elif "yllcenter" in header:
        origin_y = header["yllcenter"] - cell_size / 2
    else:
        raise GridFormatError("malformed header: missing yllcorner", lineno + 1)
    nodata = header.get("nodata_value", -9999.0)

    expected = nrows * ncols
    values: list[float] = []
    last_line = lineno
    for idx in range(lineno, len(lines)):
        tokens = lines[idx].split()
        if not tokens:
            continue
        last_line = idx + 1
        for tok in tokens:
            values.append(_parse_number(tok, idx + 1))
        if len(values) > expected:
            raise GridFormatError(
                f"value-count mismatch: more than {expected} values", idx + 1
            )
    if len(values) != expected:
        raise GridFormatError(
            f"value-count mismatch: expected {expected} values, found {len(values)}",
            last_line,
        )

    arr = np.asarray(values, dtype=np.float64).reshape(nrows, ncols)
    return RasterGrid(arr, cell_size, origin_x, origin_y, nodata, kind)


def _format_value(v, integral: bool) -> str:
    if integral:
        return str(int(v))
    return repr(float(v))


def write_ascii_grid(grid: RasterGrid, path, write_kind_sidecar: bool = False) -> None:
    path = Path(path)
    integral = grid.kind is GridKind.CATEGORICAL
    nodata = grid.nodata
    nodata_txt = _format_value(nodata, integral and float(nodata).is_integer())
    out = [
        f"ncols {grid.cols}",
        f"nrows {grid.rows}",
        f"xllcorner {float(grid.origin_x)!r}",
        f"yllcorner {float(grid.origin_y)!r}",
        f"cellsize {float(grid.cell_size)!r}",
        f"NODATA_value {nodata_txt}",
    ]
    for row in grid.values:
        out.append(" ".join(_format_value(v, integral) for v in row))
    path.write_text("\n".join(out) + "\n", encoding="ascii")
    if write_kind_sidecar:
        path.with_suffix(".kind").write_text(grid.kind.value + "\n")


@dataclass(frozen=True)
class Region:
    region_id: str
    cells: frozenset

    def sorted_cells(self) -> list[Cell]:
        return sorted(self.cells)


@dataclass(frozen=True)
class RegionSet:
    regions: tuple[Region, ...]
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        seen_ids = set()
        owner: dict[Cell, str] = {}
        for region in self.regions:
            if region.region_id in seen_ids:
                raise RegionError(f"duplicate region id {region.region_id!r}")
            seen_ids.add(region.region_id)
            if not region.cells:
                raise RegionError(f"region {region.region_id!r} has no cells")
            for cell in region.cells:
                if cell in owner:
                    raise RegionError(
                        f"cell {cell} belongs to both {owner[cell]!r} and {region.region_id!r}"
                    )
                owner[cell] = region.region_id

    def __len__(self):
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    @property
    def ids(self) -> list[str]:
        return [r.region_id for r in self.regions]

    def index_of(self, region_id: str) -> int:
        for i, r in enumerate(self.regions):
            if r.region_id == region_id:
                return i
        raise KeyError(region_id)

    def subset(self, region_ids: Iterable[str]) -> "RegionSet":
        wanted = set(region_ids)
        return RegionSet(
            tuple(r for r in self.regions if r.region_id in wanted), self.provenance
        )

    def validate_against(self, grid: RasterGrid) -> None:
        rows, cols = grid.shape
        for region in self.regions:
            for r, c in region.cells:
                if not (0 <= r < rows and 0 <= c < cols):
                    raise RegionError(
                        f"region {region.region_id!r}: cell {(r, c)} outside {rows}x{cols} grid"
                    )

    def label_raster(self, shape: tuple[int, int]) -> np.ndarray:
        """Region index per cell, -1 where no region."""
        labels = np.full(shape, -1, dtype=np.int64)
        for i, region in enumerate(self.regions):
            idx = np.array(list(region.cells), dtype=np.int64)
            labels[idx[:, 0], idx[:, 1]] = i
        return labels

    def centroids(self, grid: RasterGrid | None = None) -> np.ndarray:
        """Mean of cell centres; map units with a grid, else (col, row) index space."""
        out = np.empty((len(self.regions), 2))
        for i, region in enumerate(self.regions):
            idx = np.array(list(region.cells), dtype=np.float64)
            rows, cols = idx[:, 0], idx[:, 1]
            if grid is None:
                out[i] = cols.mean() + 0.5, rows.mean() + 0.5
            else:
                out[i, 0] = grid.origin_x + (cols.mean() + 0.5) * grid.cell_size
                out[i, 1] = grid.origin_y + (grid.rows - rows.mean() - 0.5) * grid.cell_size
        return out

    def to_json(self) -> dict:
        regions = []
        for region in self.regions:
            runs = []
            for r, c in region.sorted_cells():
                if runs and runs[-1][0] == r and runs[-1][1] + runs[-1][2] == c:
                    runs[-1][2] += 1
                else:
                    runs.append([r, c, 1])
            regions.append({"id": region.region_id, "runs": runs})
        return {"provenance": self.provenance, "regions": regions}


@dataclass(frozen=True)
class Unit:
    a: int
    b: int
    cells: tuple[Cell, ...]


@dataclass(frozen=True)
class UnitGrid:
    region_id: str | None
    layout: tuple[int, int]
    units: tuple[Unit, ...] = field(default_factory=tuple)

    def unit(self, a: int, b: int) -> Unit:
        for u in self.units:
            if (u.a, u.b) == (a, b):
                return u
        raise KeyError((a, b))


def region_aggregate(grid: RasterGrid, regions: RegionSet, aggregator: str = "mean") -> np.ndarray:
    if grid.kind is not GridKind.CONTINUOUS:
        raise ValueError("region_aggregate needs a continuous grid")
    if aggregator not in ("mean", "sum"):
        raise ValueError(f"unknown aggregator {aggregator!r}")
    regions.validate_against(grid)
    valid = grid.valid_mask
    out = np.empty(len(regions))
    for i, region in enumerate(regions):
        idx = np.array(region.sorted_cells(), dtype=np.int64)
        keep = valid[idx[:, 0], idx[:, 1]]
        vals = grid.values[idx[keep, 0], idx[keep, 1]]
        if vals.size == 0:
            raise RegionError(f"empty aggregate: region {region.region_id!r} is entirely nodata")
        out[i] = vals.mean() if aggregator == "mean" else vals.sum()
    return out


def partition_units(cells: Iterable[Cell], R: int, L: int, region_id: str | None = None) -> UnitGrid:
    """Split the bounding box of ``cells`` into R x L blocks by ceiling division.

    Trailing blocks are smaller; blocks holding no region cell are omitted.
    """
    if R < 1 or L < 1:
        raise ValueError("R and L must be at least 1")
    cells = sorted(set(cells))
    if not cells:
        raise RegionError("cannot partition an empty region")
    rows = [r for r, _ in cells]
    cols = [c for _, c in cells]
    r0, c0 = min(rows), min(cols)
    height = max(rows) - r0 + 1
    width = max(cols) - c0 + 1
    bh = -(-height // R)
    bw = -(-width // L)
    buckets: dict[tuple[int, int], list[Cell]] = {}
    for r, c in cells:
        buckets.setdefault(((r - r0) // bh, (c - c0) // bw), []).append((r, c))
    units = tuple(Unit(a, b, tuple(buckets[(a, b)])) for a, b in sorted(buckets))
    return UnitGrid(region_id, (R, L), units)


def _cells_from_record(rec: dict) -> set[Cell]:
    cells: set[Cell] = set()
    for run in rec.get("runs", []):
        if len(run) != 3 or run[2] < 1:
            raise RegionError(f"region {rec.get('id')!r}: runs are [row, col, length]")
        r, c, n = (int(v) for v in run)
        cells.update((r, c + k) for k in range(n))
    for cell in rec.get("cells", []):
        cells.add((int(cell[0]), int(cell[1])))
    return cells


def _rasterize_features(features: Sequence[dict], grid: RasterGrid) -> list[Region]:
    from shapely import contains_xy
    from shapely.geometry import shape

    rows, cols = grid.shape
    xs = grid.origin_x + (np.arange(cols) + 0.5) * grid.cell_size
    ys = grid.origin_y + (rows - np.arange(rows) - 0.5) * grid.cell_size
    gx, gy = np.meshgrid(xs, ys)
    taken = np.zeros(grid.shape, dtype=bool)
    regions = []
    for k, feat in enumerate(features):
        props = feat.get("properties") or {}
        rid = str(props.get("region_id", feat.get("id", k)))
        geom = shape(feat["geometry"])
        inside = contains_xy(geom, gx, gy) & ~taken
        taken |= inside
        rr, cc = np.nonzero(inside)
        regions.append(Region(rid, frozenset(zip(rr.tolist(), cc.tolist()))))
    return regions


def load_regions(path, grid: RasterGrid | None = None) -> RegionSet:
    """Load regions from cell-run JSON or a GeoJSON FeatureCollection.

    Polygons are rasterized by cell centre; a cell claimed by an earlier
    feature is not reassigned.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    if isinstance(doc, dict) and doc.get("type") == "FeatureCollection":
        if grid is None:
            raise RegionError("GeoJSON regions need a reference grid for rasterization")
        regions = _rasterize_features(doc.get("features", []), grid)
        rs = RegionSet(tuple(regions), provenance=f"rasterized from {path.name}")
    else:
        records = doc["regions"] if isinstance(doc, dict) else doc
        provenance = doc.get("provenance", "") if isinstance(doc, dict) else ""
        rs = RegionSet(
            tuple(Region(str(rec["id"]), frozenset(_cells_from_record(rec))) for rec in records),
            provenance=provenance,
        )
    if grid is not None:
        rs.validate_against(grid)
    return rs


def regions_from_label_raster(labels: np.ndarray, ids: Sequence[str] | None = None, provenance: str = "") -> RegionSet:
    """Regions from an integer label raster; negative labels are unassigned."""
    labels = np.asarray(labels)
    codes = sorted(int(v) for v in np.unique(labels) if v >= 0)
    if ids is not None and len(ids) != len(codes):
        raise RegionError("ids length must match the number of labels")
    regions = []
    for k, code in enumerate(codes):
        rr, cc = np.nonzero(labels == code)
        rid = ids[k] if ids is not None else str(code)
        regions.append(Region(rid, frozenset(zip(rr.tolist(), cc.tolist()))))
    return RegionSet(tuple(regions), provenance)
