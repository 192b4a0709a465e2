"""Landscape shape index driven sample allocation and placement.

LSI over a pixel window is ``(1/4) * sum_p b_p / sqrt(q)`` where ``b_p`` counts
the 4-neighbours of ``p`` that sit inside the window and differ in class.
Neighbours outside the window (or nodata) contribute nothing.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .grid_io import GridKind, RasterGrid, Region, RegionSet, Unit, UnitGrid, partition_units

__all__ = [
    "LsiValue",
    "Window",
    "window_from_cells",
    "lsi",
    "rlsi",
    "clsi",
    "ulsi",
    "region_shares",
    "largest_remainder",
    "allocate_regions",
    "allocate_classes",
    "SamplePoint",
    "AllocationPlan",
    "InsufficientUnitsError",
    "InfeasibleAllocationError",
    "segment_lengths",
    "place_points",
    "run_sampling",
    "points_to_geojson",
    "dumps_geojson",
]

ALL_CLASSES = "all"


@dataclass(frozen=True)
class LsiValue:
    value: float
    q: int


@dataclass(frozen=True, eq=False)
class Window:
    codes: np.ndarray
    mask: np.ndarray
    origin: tuple[int, int] = (0, 0)


def window_from_cells(grid: RasterGrid, cells: Iterable[tuple[int, int]]) -> Window:
    """Bounding-box window over ``cells``; only those cells (minus nodata) are counted."""
    if grid.kind is not GridKind.CATEGORICAL:
        raise ValueError("LSI needs a categorical grid")
    idx = np.array(sorted(set(cells)), dtype=np.int64).reshape(-1, 2)
    if idx.size == 0:
        raise ValueError("window is empty")
    r0, c0 = idx.min(axis=0)
    r1, c1 = idx.max(axis=0)
    codes = np.asarray(grid.values[r0:r1 + 1, c0:c1 + 1])
    mask = np.zeros(codes.shape, dtype=bool)
    mask[idx[:, 0] - r0, idx[:, 1] - c0] = True
    mask &= grid.valid_mask[r0:r1 + 1, c0:c1 + 1]
    return Window(codes, mask, (int(r0), int(c0)))


def _as_window(window, mask=None) -> Window:
    if isinstance(window, Window):
        return window
    codes = np.asarray(window)
    if codes.ndim != 2:
        raise ValueError("window must be 2-D")
    mask = np.ones(codes.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return Window(codes, mask)


def _differing_neighbor_total(codes: np.ndarray, focal: np.ndarray, counted: np.ndarray,
                              differs) -> int:
    total = 0
    H, W = codes.shape
    # (focal slice, neighbour slice) for up, down, left, right
    shifts = (
        ((slice(1, H), slice(None)), (slice(0, H - 1), slice(None))),
        ((slice(0, H - 1), slice(None)), (slice(1, H), slice(None))),
        ((slice(None), slice(1, W)), (slice(None), slice(0, W - 1))),
        ((slice(None), slice(0, W - 1)), (slice(None), slice(1, W))),
    )
    for fs, ns in shifts:
        hit = focal[fs] & counted[ns] & differs(codes[fs], codes[ns])
        total += int(np.count_nonzero(hit))
    return total


def lsi(window, target=ALL_CLASSES, mask=None) -> LsiValue:
    """LSI of a window, over all counted pixels or over the pixels of one class.

    ``target`` is ``"all"`` or a class code. In class mode ``q`` is the class
    pixel count and ``b_p`` counts in-window neighbours of another class;
    a class absent from the window yields ``LsiValue(0.0, 0)``.
    """
    win = _as_window(window, mask)
    if not win.mask.any():
        raise ValueError("window is empty")
    codes, counted = win.codes, win.mask
    if isinstance(target, str) and target == ALL_CLASSES:
        focal = counted
        total = _differing_neighbor_total(codes, focal, counted, np.not_equal)
    else:
        k = int(target)
        focal = counted & (codes == k)
        total = _differing_neighbor_total(codes, focal, counted, lambda a, b: b != k)
    q = int(np.count_nonzero(focal))
    if q == 0:
        return LsiValue(0.0, 0)
    return LsiValue(0.25 * total / math.sqrt(q), q)


def rlsi(grid: RasterGrid, region: Region) -> LsiValue:
    return lsi(window_from_cells(grid, region.cells))


def clsi(grid: RasterGrid, region: Region, k: int) -> LsiValue:
    return lsi(window_from_cells(grid, region.cells), k)


def ulsi(grid: RasterGrid, unit: Unit, k: int) -> LsiValue:
    return lsi(window_from_cells(grid, unit.cells), k)


# ---------------------------------------------------------------------------
# allocation


def _id_key(key):
    if isinstance(key, tuple):
        return tuple(_id_key(k) for k in key)
    if isinstance(key, (int, np.integer)):
        return (0, int(key), "")
    s = str(key)
    return (0, int(s), "") if s.lstrip("-").isdigit() else (1, 0, s)


def region_shares(weights: Mapping[Hashable, float], areas: Mapping[Hashable, float] | None,
                  total: int) -> dict:
    """Real-valued shares ``w_i * A_i / sum_j(w_j * A_j) * total`` before rounding."""
    prod = {k: float(w) * (1.0 if areas is None else float(areas[k])) for k, w in weights.items()}
    denom = sum(prod.values())
    if denom == 0:
        return {k: 0.0 for k in prod}
    return {k: v / denom * total for k, v in prod.items()}


def largest_remainder(weights: Mapping[Hashable, float], total: int) -> tuple[dict, list[dict]]:
    """Apportion ``total`` proportionally to ``weights``.

    Floors first; leftover units go to the largest fractional remainders,
    ties to the ascending key. Arithmetic is exact (``Fraction``).
    """
    if total < 0:
        raise ValueError("total must be non-negative")
    exact = {}
    for k, w in weights.items():
        w = float(w)
        if w < 0 or not math.isfinite(w):
            raise ValueError(f"invalid weight {w} for {k!r}")
        exact[k] = Fraction(w)
    denom = sum(exact.values(), Fraction(0))
    if denom == 0:
        if total > 0:
            raise ValueError("all shares are zero")
        return {k: 0 for k in exact}, []
    shares = {k: v * total / denom for k, v in exact.items()}
    counts = {k: math.floor(s) for k, s in shares.items()}
    leftover = total - sum(counts.values())
    order = sorted(exact, key=lambda k: (-(shares[k] - counts[k]), _id_key(k)))
    bonus = set(order[:leftover])
    trace = []
    for k in sorted(exact, key=_id_key):
        if k in bonus:
            counts[k] += 1
        trace.append({
            "key": list(k) if isinstance(k, tuple) else k,
            "share": float(shares[k]),
            "floor": math.floor(shares[k]),
            "remainder": float(shares[k] - math.floor(shares[k])),
            "bonus": k in bonus,
        })
    return counts, trace


def allocate_regions(rlsi_values: Mapping[Hashable, float], areas: Mapping[Hashable, float],
                     N: int, trace: list | None = None) -> dict:
    if N < 0:
        raise ValueError("N must be non-negative")
    weights = {k: float(v) * float(areas[k]) for k, v in rlsi_values.items()}
    try:
        counts, tr = largest_remainder(weights, N)
    except ValueError as exc:
        raise ValueError(f"cannot allocate regions: {exc}") from None
    if trace is not None:
        trace.extend(tr)
    return counts


def allocate_classes(clsi_values: Mapping[tuple, float], proportions: Mapping[tuple, float],
                     per_region: Mapping[Hashable, int], trace: list | None = None,
                     tolerance: float = 1e-9) -> dict:
    """Split each region's count over its classes by ``cLSI * proportion``."""
    by_region: dict = {}
    for (rid, k), v in clsi_values.items():
        w = float(proportions[(rid, k)])
        if w < 0:
            raise ValueError(f"negative class proportion for {(rid, k)!r}")
        by_region.setdefault(rid, {})[k] = float(v) * w
    for rid in by_region:
        total_w = sum(float(proportions[(rid, k)]) for k in by_region[rid])
        if total_w > 1 + tolerance:
            raise ValueError(f"class proportions of region {rid!r} sum to {total_w}")
    out = {}
    for rid in sorted(per_region, key=_id_key):
        n_i = per_region[rid]
        classes = by_region.get(rid, {})
        if n_i > 0 and not any(classes.values()):
            raise ValueError(f"all class shares are zero in region {rid!r}")
        counts, tr = largest_remainder(classes, n_i) if classes else ({}, [])
        for k in sorted(counts, key=_id_key):
            out[(rid, k)] = counts[k]
        if trace is not None:
            trace.extend({"region": rid, **t} for t in tr)
    return out


# ---------------------------------------------------------------------------
# placement


class InsufficientUnitsError(ValueError):
    def __init__(self, requested: int, feasible: int, where=None):
        self.requested = requested
        self.feasible = feasible
        self.where = where
        loc = f" for {where}" if where is not None else ""
        super().__init__(
            f"insufficient heterogeneous units{loc}: requested {requested}, feasible maximum {feasible}"
        )


class InfeasibleAllocationError(ValueError):
    def __init__(self, offenders: list[dict]):
        self.offenders = offenders
        desc = ", ".join(
            f"({o['region_id']}, {o['class']}): {o['requested']}>{o['feasible']}" for o in offenders
        )
        super().__init__(f"insufficient heterogeneous units: {desc}")


@dataclass(frozen=True)
class SamplePoint:
    region_id: str
    class_code: int
    unit: tuple[int, int]
    cell: tuple[int, int]
    seed_path: str


def segment_lengths(total: int, parts: int) -> list[int]:
    """Near-equal contiguous segment lengths, longer ones first."""
    base, extra = divmod(total, parts)
    return [base + 1] * extra + [base] * (parts - extra)


def _stream(seed: int, key: Sequence[int]) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


def place_points(grid: RasterGrid, units: UnitGrid, class_code: int, count: int, seed: int,
                 stream_key: Sequence[int] = (0,), ulsi_values: Mapping[tuple[int, int], float] | None = None
                 ) -> list[SamplePoint]:
    """Place ``count`` points of class ``class_code`` across the units of one region.

    Units with zero uLSI are dropped; the rest, ranked by uLSI descending
    (ties by unit row, then column), are cut into ``count`` contiguous
    segments. One unit is drawn per segment and one class cell inside it.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if ulsi_values is None:
        ulsi_values = {(u.a, u.b): ulsi(grid, u, class_code).value for u in units.units}
    ranked = sorted(
        (u for u in units.units if ulsi_values[(u.a, u.b)] > 0),
        key=lambda u: (-ulsi_values[(u.a, u.b)], u.a, u.b),
    )
    if count > len(ranked):
        raise InsufficientUnitsError(count, len(ranked), (units.region_id, class_code))
    if count == 0:
        return []
    rng = _stream(seed, stream_key)
    seed_path = "/".join(str(s) for s in (seed, *stream_key))
    values = grid.values
    points = []
    start = 0
    for length in segment_lengths(len(ranked), count):
        unit = ranked[start + int(rng.integers(length))]
        start += length
        cells = [c for c in unit.cells if values[c] == class_code]
        cell = cells[int(rng.integers(len(cells)))]
        points.append(SamplePoint(str(units.region_id), int(class_code), (unit.a, unit.b), cell, seed_path))
    return points


@dataclass
class AllocationPlan:
    total: int
    per_region: dict
    per_class: dict
    rounding_trace: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "per_region": {str(k): v for k, v in self.per_region.items()},
            "per_class": [
                {"region_id": str(r), "class": int(k), "count": v}
                for (r, k), v in self.per_class.items()
            ],
            "rounding_trace": self.rounding_trace,
        }


@dataclass(frozen=True)
class _RegionStats:
    rlsi: float
    area: float
    clsi: dict
    proportion: dict


def _region_stats(grid: RasterGrid, region: Region) -> _RegionStats:
    win = window_from_cells(grid, region.cells)
    counted = int(win.mask.sum())
    if counted == 0:
        return _RegionStats(0.0, 0.0, {}, {})
    classes = sorted(int(c) for c in np.unique(win.codes[win.mask]))
    return _RegionStats(
        lsi(win).value,
        counted * grid.cell_size ** 2,
        {k: lsi(win, k).value for k in classes},
        {k: int(np.count_nonzero(win.mask & (win.codes == k))) / counted for k in classes},
    )


def run_sampling(grid: RasterGrid, regions: RegionSet, total: int, R: int, L: int, seed: int,
                 clamp: bool = False, workers: int = 1) -> tuple[AllocationPlan, list[SamplePoint]]:
    """Region -> class -> unit allocation and placement for ``regions`` on a land-cover grid."""
    if grid.kind is not GridKind.CATEGORICAL:
        raise ValueError("sampling needs a categorical land-cover grid")
    regions.validate_against(grid)
    ids = regions.ids
    stats = {r.region_id: _region_stats(grid, r) for r in regions}

    region_trace: list = []
    class_trace: list = []
    per_region = allocate_regions(
        {rid: stats[rid].rlsi for rid in ids}, {rid: stats[rid].area for rid in ids}, total, region_trace
    )
    per_class = allocate_classes(
        {(rid, k): v for rid in ids for k, v in stats[rid].clsi.items()},
        {(rid, k): v for rid in ids for k, v in stats[rid].proportion.items()},
        per_region, class_trace,
    )

    tasks = []
    offenders = []
    warnings_ = []
    unit_grids = {}
    for idx, region in enumerate(regions):
        rid = region.region_id
        wanted = [(k, n) for (r, k), n in per_class.items() if r == rid and n > 0]
        if not wanted:
            continue
        ug = partition_units(region.cells, R, L, rid)
        unit_grids[rid] = ug
        for k, n in wanted:
            uvals = {(u.a, u.b): ulsi(grid, u, k).value for u in ug.units}
            feasible = sum(1 for v in uvals.values() if v > 0)
            if n > feasible:
                record = {"region_id": rid, "class": k, "requested": n, "feasible": feasible}
                if not clamp:
                    offenders.append(record)
                    continue
                warnings_.append({**record, "message": "clamped to feasible maximum"})
                n = feasible
            tasks.append((idx, rid, k, n, uvals))
    if offenders:
        raise InfeasibleAllocationError(offenders)

    def place(task):
        idx, rid, k, n, uvals = task
        return place_points(grid, unit_grids[rid], k, n, seed, (idx, k), uvals)

    if workers == 1:
        batches = [place(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(place, tasks))
    points = [p for batch in batches for p in batch]

    plan = AllocationPlan(
        total, per_region, per_class,
        {"regions": region_trace, "classes": class_trace, "warnings": warnings_,
         "placed": {f"{rid}/{k}": n for _, rid, k, n, _ in tasks}},
    )
    return plan, points


def points_to_geojson(points: Sequence[SamplePoint], grid: RasterGrid) -> dict:
    features = []
    for p in points:
        x, y = grid.cell_center(*p.cell)
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [x, y]},
            "properties": {
                "region_id": p.region_id,
                "class": p.class_code,
                "unit": list(p.unit),
                "cell": list(p.cell),
                "seed_path": p.seed_path,
            },
        })
    return {"type": "FeatureCollection", "features": features}


def dumps_geojson(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"
