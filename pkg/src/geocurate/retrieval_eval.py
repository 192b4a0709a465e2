"""Multi-label retrieval metrics: ACG@n, NDCG@n, MAP@n and WMAP@n.

Gain for a retrieved item is C(q, i), the number of labels it shares with the
query. An item is relevant when C(q, i) >= 1. DCG uses the natural log and is
normalised by the best DCG@n achievable over the whole gallery. Lists shorter
than n behave as if padded with zero-gain items.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

__all__ = [
    "GroundTruth",
    "RankedRun",
    "MetricsReport",
    "shared_labels",
    "gains",
    "acg_at_n",
    "dcg_at_n",
    "ndcg_at_n",
    "average_precision",
    "weighted_average_precision",
    "map_at_n",
    "wmap_at_n",
    "evaluate",
    "read_run",
    "write_run",
    "load_truth",
    "format_table",
    "DEFAULT_CUTOFFS",
    "METRICS",
]

DEFAULT_CUTOFFS = (5, 10, 20, 50, 100)
METRICS = ("ACG", "NDCG", "MAP", "WMAP")


@dataclass(frozen=True)
class GroundTruth:
    """Gallery labels per item; ``queries`` overrides labels for query ids when given."""

    items: Mapping[str, frozenset]
    level: int = 3
    queries: Mapping[str, frozenset] | None = None

    def __post_init__(self):
        for item, labels in self.items.items():
            if not labels:
                raise ValueError(f"item {item!r} has no labels")

    def query_labels(self, qid: str) -> frozenset:
        if self.queries is not None and qid in self.queries:
            return self.queries[qid]
        return self.items[qid]


@dataclass(frozen=True)
class RankedRun:
    """Retrieved item ids per query, best first."""

    queries: Mapping[str, Sequence[str]]
    direction: str = "image_to_text"

    def __post_init__(self):
        for qid, items in self.queries.items():
            if len(set(items)) != len(items):
                raise ValueError(f"query {qid!r} retrieves an item twice")

    @classmethod
    def from_scores(cls, scored: Mapping[str, Iterable[tuple[str, float]]], direction: str = "image_to_text"):
        """Order by score descending, ties by item id ascending."""
        return cls(
            {q: [item for item, _ in sorted(pairs, key=lambda p: (-p[1], p[0]))] for q, pairs in scored.items()},
            direction,
        )


def _check_n(n: int) -> None:
    if n < 1:
        raise ValueError("cutoff n must be at least 1")


def shared_labels(q: Iterable, i: Iterable) -> int:
    return len(set(q) & set(i))


def gains(query_labels, ranked: Sequence[str], truth: GroundTruth) -> list[int]:
    return [shared_labels(query_labels, truth.items[item]) for item in ranked]


def acg_at_n(c: Sequence[int], n: int) -> float:
    _check_n(n)
    return sum(c[:n]) / n


def dcg_at_n(c: Sequence[int], n: int) -> float:
    _check_n(n)
    return sum((2 ** g - 1) / math.log(1 + i) for i, g in enumerate(c[:n], start=1))


def ndcg_at_n(c: Sequence[int], ideal: Sequence[int], n: int) -> tuple[float, bool]:
    """NDCG against the gallery gain multiset ``ideal``; returns (value, zero_ideal_flag)."""
    z = dcg_at_n(sorted(ideal, reverse=True), n)
    if z == 0:
        return 0.0, True
    return dcg_at_n(c, n) / z, False


# AP and WAP are summed as exact rationals and rounded once, so the result
# does not depend on summation order.


def average_precision(c: Sequence[int], n: int) -> float:
    _check_n(n)
    hits = 0
    total = Fraction(0)
    for i, g in enumerate(c[:n], start=1):
        if g >= 1:
            hits += 1
            total += Fraction(hits, i)
    return float(total / hits) if hits else 0.0


def weighted_average_precision(c: Sequence[int], n: int) -> float:
    _check_n(n)
    hits = 0
    running = 0
    total = Fraction(0)
    for i, g in enumerate(c[:n], start=1):
        running += g
        if g >= 1:
            hits += 1
            total += Fraction(running, i)
    return float(total / hits) if hits else 0.0


def _query_gains(run: RankedRun, truth: GroundTruth, qid: str) -> list[int]:
    return gains(truth.query_labels(qid), run.queries[qid], truth)


def map_at_n(run: RankedRun, truth: GroundTruth, n: int) -> float:
    if not run.queries:
        return 0.0
    return sum(average_precision(_query_gains(run, truth, q), n) for q in run.queries) / len(run.queries)


def wmap_at_n(run: RankedRun, truth: GroundTruth, n: int) -> float:
    if not run.queries:
        return 0.0
    return sum(weighted_average_precision(_query_gains(run, truth, q), n) for q in run.queries) / len(run.queries)


@dataclass
class MetricsReport:
    cutoffs: tuple[int, ...]
    level: int
    direction: str
    means: dict = field(default_factory=dict)
    per_query: dict = field(default_factory=dict)
    zero_ideal: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def get(self, metric: str, n: int) -> float:
        return self.means[metric][n]

    def to_json(self) -> dict:
        return {
            "cutoffs": list(self.cutoffs),
            "level": self.level,
            "direction": self.direction,
            "means": {m: {str(n): v for n, v in vals.items()} for m, vals in self.means.items()},
            "per_query": {
                q: {m: {str(n): v for n, v in vals.items()} for m, vals in d.items()}
                for q, d in self.per_query.items()
            },
            "zero_ideal": self.zero_ideal,
            "warnings": self.warnings,
        }


def evaluate(run: RankedRun, truth: GroundTruth, cutoffs: Sequence[int] = DEFAULT_CUTOFFS) -> MetricsReport:
    cutoffs = tuple(int(n) for n in cutoffs)
    for n in cutoffs:
        _check_n(n)
    unknown = sorted({i for items in run.queries.values() for i in items if i not in truth.items})
    if unknown:
        raise KeyError(f"run references unknown items: {unknown[:10]}")
    report = MetricsReport(cutoffs, truth.level, run.direction)
    gallery = list(truth.items.values())
    for qid in sorted(run.queries):
        qlabels = truth.query_labels(qid)
        c = gains(qlabels, run.queries[qid], truth)
        if not c:
            report.warnings.append(f"query {qid!r} has an empty ranked list")
        ideal = [shared_labels(qlabels, labels) for labels in gallery]
        scores: dict = {m: {} for m in METRICS}
        flagged = False
        for n in cutoffs:
            scores["ACG"][n] = acg_at_n(c, n)
            scores["NDCG"][n], zero = ndcg_at_n(c, ideal, n)
            flagged |= zero
            scores["MAP"][n] = average_precision(c, n)
            scores["WMAP"][n] = weighted_average_precision(c, n)
        if flagged:
            report.zero_ideal.append(qid)
        report.per_query[qid] = scores
    nq = len(report.per_query)
    report.means = {
        m: {n: (sum(report.per_query[q][m][n] for q in report.per_query) / nq if nq else 0.0) for n in cutoffs}
        for m in METRICS
    }
    return report


def format_table(report: MetricsReport) -> str:
    header = ["metric"] + [f"@{n}" for n in report.cutoffs]
    rows = [[m] + [f"{report.means[m][n]:.4f}" for n in report.cutoffs] for m in METRICS]
    widths = [max(len(r[k]) for r in [header] + rows) for k in range(len(header))]
    fmt = lambda r: "  ".join(cell.rjust(w) if k else cell.ljust(w) for k, (cell, w) in enumerate(zip(r, widths)))
    lines = [f"level {report.level}  {report.direction}  queries {len(report.per_query)}", fmt(header)]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# file formats


def read_run(path, direction: str = "image_to_text") -> RankedRun:
    """Whitespace-separated ``query_id item_id rank score`` lines.

    Items are ordered by score descending, ties by item id; the rank column
    is validated as an integer but not used for ordering.
    """
    scored: dict[str, list[tuple[str, float]]] = defaultdict(list)
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: expected 'query_id item_id rank score'")
        qid, item, rank, score = parts
        try:
            int(rank)
            scored[qid].append((item, float(score)))
        except ValueError:
            raise ValueError(f"line {lineno}: rank must be an integer and score a number") from None
    return RankedRun.from_scores(scored, direction)


def write_run(path, scored: Mapping[str, Sequence[tuple[str, float]]]) -> None:
    lines = []
    for qid in sorted(scored):
        ordered = sorted(scored[qid], key=lambda p: (-p[1], p[0]))
        lines += [f"{qid} {item} {rank} {score!r}" for rank, (item, score) in enumerate(ordered, start=1)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_truth(path, tree=None, level: int = 3) -> tuple[GroundTruth, list[str]]:
    """JSON ``item_id -> [label names]``, resolved against ``tree`` and lifted to ``level``.

    Without a tree, names are used as-is. Returns the truth and any
    unresolved label names.
    """
    from .taxonomy import ancestor_closure

    doc = json.loads(Path(path).read_text())
    items = {}
    unresolved = []
    for item, names in doc.items():
        if tree is None:
            items[str(item)] = frozenset(names)
            continue
        ids = []
        for name in names:
            nid = tree.find(name)
            if nid is None:
                unresolved.append(name)
            else:
                ids.append(nid)
        items[str(item)] = frozenset(ancestor_closure(tree, ids, level))
    empty = sorted(k for k, v in items.items() if not v)
    if empty:
        raise ValueError(f"items without labels at level {level}: {empty[:10]}")
    return GroundTruth(items, level), sorted(set(unresolved))
