"""Extensible hierarchical label taxonomy.

Three levels (a fourth where needed): level-1 roots, each node one level below
its parent. Names and synonyms are unique across the tree after normalization.
"""

from __future__ import annotations

import copy
import csv
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .matchers import (
    Candidate,
    LabelQuery,
    SemanticMatcher,
    SynonymDictionary,
    edit_distance,
    normalize,
)

__all__ = [
    "TaxonomyError",
    "LabelExistsError",
    "LabelNode",
    "LabelTree",
    "Placement",
    "MergeReport",
    "MappingResult",
    "include_novel_label",
    "consolidate_duplicates",
    "map_labels",
    "ancestor_closure",
    "read_image_labels_csv",
    "UNCLASSIFIED",
    "MAX_LEVEL",
]

MAX_LEVEL = 4
UNCLASSIFIED = "unclassified"


class TaxonomyError(ValueError):
    pass


class LabelExistsError(TaxonomyError):
    def __init__(self, name: str, existing: str):
        self.existing = existing
        super().__init__(f"label {name!r} already present (as {existing!r})")


@dataclass
class LabelNode:
    id: str
    name: str
    level: int
    parent: str | None = None
    description: str = ""
    synonyms: set[str] = field(default_factory=set)
    frequency: int = 0

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "level": self.level,
            "parent": self.parent,
            "description": self.description,
            "synonyms": sorted(self.synonyms),
            "frequency": self.frequency,
        }


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", normalize(name)).strip("_") or "label"


class LabelTree:
    def __init__(self, nodes: Iterable[LabelNode] = (), version: int = 0):
        self.nodes: dict[str, LabelNode] = {}
        self.version = version
        for node in nodes:
            self.nodes[node.id] = node
        self.validate()

    # -- queries ------------------------------------------------------------

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, node_id):
        return node_id in self.nodes

    def __getitem__(self, node_id) -> LabelNode:
        return self.nodes[node_id]

    @property
    def roots(self) -> list[str]:
        return sorted(n.id for n in self.nodes.values() if n.parent is None)

    def children(self, node_id: str) -> list[str]:
        return sorted(n.id for n in self.nodes.values() if n.parent == node_id)

    def ancestors(self, node_id: str) -> list[str]:
        out = []
        cur = self.nodes[node_id].parent
        while cur is not None:
            out.append(cur)
            cur = self.nodes[cur].parent
        return out

    def descendants(self, node_id: str) -> list[str]:
        kids: dict[str, list[str]] = {}
        for n in self.nodes.values():
            if n.parent is not None:
                kids.setdefault(n.parent, []).append(n.id)
        out, stack = [], list(kids.get(node_id, ()))
        while stack:
            nid = stack.pop()
            out.append(nid)
            stack.extend(kids.get(nid, ()))
        return sorted(out)

    def level_sets(self) -> dict[int, set[str]]:
        out: dict[int, set[str]] = {}
        for n in self.nodes.values():
            out.setdefault(n.level, set()).add(n.id)
        return out

    def find(self, name: str) -> str | None:
        key = normalize(name)
        for n in self.nodes.values():
            if n.name == key or key in n.synonyms:
                return n.id
        return None

    def by_name(self, name: str) -> LabelNode:
        nid = self.find(name)
        if nid is None:
            raise KeyError(name)
        return self.nodes[nid]

    def candidate(self, node_id: str) -> Candidate:
        n = self.nodes[node_id]
        below = []
        for d in self.descendants(node_id):
            below.append(self.nodes[d].name)
            below.extend(sorted(self.nodes[d].synonyms))
        return Candidate(n.id, n.name, n.description, tuple(sorted(n.synonyms)), tuple(below))

    # -- validation ---------------------------------------------------------

    def problems(self) -> list[str]:
        issues = []
        seen: dict[str, str] = {}
        for n in self.nodes.values():
            if not 1 <= n.level <= MAX_LEVEL:
                issues.append(f"{n.id}: level {n.level} outside 1..{MAX_LEVEL}")
            if n.frequency < 0:
                issues.append(f"{n.id}: negative frequency")
            if n.name != normalize(n.name) or not n.name:
                issues.append(f"{n.id}: name {n.name!r} not normalized")
            if n.parent is None:
                if n.level != 1:
                    issues.append(f"{n.id}: root at level {n.level}")
            elif n.parent not in self.nodes:
                issues.append(f"{n.id}: unknown parent {n.parent!r}")
            elif self.nodes[n.parent].level + 1 != n.level:
                issues.append(f"{n.id}: level {n.level} under level {self.nodes[n.parent].level}")
            for term in (n.name, *n.synonyms):
                if term != normalize(term):
                    issues.append(f"{n.id}: synonym {term!r} not normalized")
                if term in seen and seen[term] != n.id:
                    issues.append(f"{n.id}: term {term!r} also used by {seen[term]}")
                seen[term] = n.id
            if n.name in n.synonyms:
                issues.append(f"{n.id}: name repeated among its synonyms")
        for n in self.nodes.values():
            cur, steps = n, 0
            while cur.parent is not None and cur.parent in self.nodes and steps <= MAX_LEVEL:
                cur = self.nodes[cur.parent]
                steps += 1
            if steps > MAX_LEVEL:
                issues.append(f"{n.id}: parent chain does not reach a root")
        return issues

    def validate(self) -> None:
        issues = self.problems()
        if issues:
            raise TaxonomyError("; ".join(issues[:10]))

    # -- mutation -----------------------------------------------------------

    def _new_id(self, name: str) -> str:
        base = _slug(name)
        nid, k = base, 2
        while nid in self.nodes:
            nid = f"{base}_{k}"
            k += 1
        return nid

    def add_node(self, name: str, parent: str | None = None, description: str = "",
                 synonyms: Iterable[str] = (), frequency: int = 0, node_id: str | None = None) -> str:
        """Insert a node directly (no semantic placement)."""
        name = normalize(name)
        syns = {normalize(s) for s in synonyms} - {name}
        for term in (name, *syns):
            existing = self.find(term)
            if existing is not None:
                raise LabelExistsError(term, self.nodes[existing].name)
        if parent is None:
            level = 1
        else:
            if parent not in self.nodes:
                raise TaxonomyError(f"unknown parent {parent!r}")
            level = self.nodes[parent].level + 1
            if level > MAX_LEVEL:
                raise TaxonomyError(f"cannot add below level {MAX_LEVEL}")
        nid = node_id or self._new_id(name)
        if nid in self.nodes:
            raise TaxonomyError(f"duplicate node id {nid!r}")
        self.nodes[nid] = LabelNode(nid, name, level, parent, description, syns, frequency)
        self.version += 1
        return nid

    def copy(self) -> "LabelTree":
        return LabelTree(copy.deepcopy(list(self.nodes.values())), self.version)

    # -- persistence --------------------------------------------------------

    def to_json(self) -> dict:
        ordered = sorted(self.nodes.values(), key=lambda n: (n.level, n.id))
        return {"version": self.version, "nodes": [n.to_json() for n in ordered]}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, doc: Mapping) -> "LabelTree":
        nodes = [
            LabelNode(
                str(d["id"]), normalize(d["name"]), int(d["level"]), d.get("parent"),
                d.get("description", ""), {normalize(s) for s in d.get("synonyms", [])},
                int(d.get("frequency", 0)),
            )
            for d in doc["nodes"]
        ]
        return cls(nodes, int(doc.get("version", 0)))

    @classmethod
    def load(cls, path) -> "LabelTree":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def default(cls) -> "LabelTree":
        """The bundled OGC-style seed taxonomy (7 / 21 / partial level 3)."""
        text = resources.files("geocurate").joinpath("data/default_taxonomy.json").read_text()
        return cls.from_json(json.loads(text))


# ---------------------------------------------------------------------------
# novel label inclusion


@dataclass(frozen=True)
class Placement:
    parent_id: str
    node_id: str
    level: int
    path: tuple[str, ...]
    scores: tuple[float, ...]


def include_novel_label(tree: LabelTree, name: str, description: str, matcher: SemanticMatcher,
                        category: str = "", descend_threshold: float = 0.6,
                        floor_threshold: float = 0.3) -> Placement:
    """Place a label absent from the tree by top-down semantic search.

    The level-1 best match is refined while one of the current node's
    children relates to the label (score at least ``descend_threshold``
    without being a duplicate). The label becomes a child of the deepest
    match. With no level-1 match reaching ``floor_threshold`` it goes under
    the reserved ``unclassified`` root. All matcher calls happen before the
    tree is touched.
    """
    existing = tree.find(name)
    if existing is not None:
        raise LabelExistsError(name, tree[existing].name)
    query = LabelQuery(normalize(name), description, category)

    roots = [r for r in tree.roots if r != UNCLASSIFIED]
    best, score = matcher.best_match(query, [tree.candidate(r) for r in roots])
    path: list[str] = []
    scores: list[float] = []
    if best is None or score < floor_threshold:
        parent = None
    else:
        parent = best
        path.append(best)
        scores.append(score)
        while True:
            kids = tree.children(parent)
            if not kids:
                break
            child, s = matcher.best_match(query, [tree.candidate(k) for k in kids])
            if child is None or s < descend_threshold:
                break
            if matcher.is_duplicate(query, tree.candidate(child)):
                raise LabelExistsError(name, tree[child].name)
            parent = child
            path.append(child)
            scores.append(s)
        if tree[parent].level >= MAX_LEVEL:
            parent = tree[parent].parent

    if parent is None:
        if UNCLASSIFIED not in tree:
            tree.add_node(UNCLASSIFIED, None, "labels without a semantic match", node_id=UNCLASSIFIED)
        parent = UNCLASSIFIED
    nid = tree.add_node(name, parent, description)
    return Placement(parent, nid, tree[nid].level, tuple(path), tuple(scores))


# ---------------------------------------------------------------------------
# duplicate consolidation


@dataclass
class MergeReport:
    merges: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def __bool__(self):
        return bool(self.merges)

    def to_json(self) -> dict:
        return {"merges": self.merges, "skipped": self.skipped}


@lru_cache(maxsize=1 << 16)
def _spelling_variant(a: str, b: str) -> bool:
    return a != b and abs(len(a) - len(b)) <= 1 and edit_distance(a, b) <= 1


def _survivor(a: LabelNode, b: LabelNode) -> tuple[LabelNode, LabelNode]:
    if a.frequency != b.frequency:
        return (a, b) if a.frequency > b.frequency else (b, a)
    return (a, b) if a.name < b.name else (b, a)


def _absorb(tree: LabelTree, survivor: LabelNode, absorbed: LabelNode) -> None:
    for cid in tree.children(absorbed.id):
        tree.nodes[cid].parent = survivor.id
    survivor.synonyms |= {absorbed.name} | absorbed.synonyms
    survivor.frequency += absorbed.frequency
    del tree.nodes[absorbed.id]
    tree.version += 1


def _merge_pass(tree: LabelTree, report: MergeReport, reason_of) -> None:
    skipped_keys = {(s["a"], s["b"]) for s in report.skipped}
    while True:
        ordered = sorted(
            (n for n in tree.nodes.values() if n.id != UNCLASSIFIED), key=lambda n: (n.level, n.name)
        )
        found = None
        for i, a in enumerate(ordered):
            for b in ordered[i + 1:]:
                if (a.id, b.id) in skipped_keys:
                    continue
                reason = reason_of(a, b)
                if reason is None:
                    continue
                if a.level != b.level:
                    skipped_keys.add((a.id, b.id))
                    report.skipped.append({
                        "a": a.id, "b": b.id, "reason": reason,
                        "why": f"levels differ ({a.level} vs {b.level})",
                    })
                    continue
                found = (a, b, reason)
                break
            if found:
                break
        if found is None:
            return
        a, b, reason = found
        survivor, absorbed = _survivor(a, b)
        names = sorted({absorbed.name} | absorbed.synonyms)
        _absorb(tree, survivor, absorbed)
        report.merges.append({"survivor": survivor.id, "absorbed": names, "reason": reason})


def consolidate_duplicates(tree: LabelTree, matcher: SemanticMatcher,
                           dictionary: SynonymDictionary | None = None) -> MergeReport:
    """Merge duplicate labels in two passes and report what happened.

    Pass one merges dictionary synonyms and spelling variants (edit distance
    at most 1, transpositions included); pass two merges nodes the matcher
    calls functional duplicates. The survivor is the more frequent node (ties:
    lexicographically smaller name) and inherits children, frequency and the
    absorbed names as synonyms. Pairs on different levels are only reported.
    """
    dictionary = dictionary if dictionary is not None else SynonymDictionary.default()
    report = MergeReport()

    # verdicts depend only on the terms / candidate views, so they are memoized
    # across the rescans that follow each merge
    lexical_seen: dict = {}
    functional_seen: dict = {}

    def lexical(a: LabelNode, b: LabelNode):
        terms_a = frozenset({a.name} | a.synonyms)
        terms_b = frozenset({b.name} | b.synonyms)
        key = (terms_a, terms_b)
        if key not in lexical_seen:
            if any(dictionary.same_group(x, y) for x in terms_a for y in terms_b):
                lexical_seen[key] = "synonym"
            elif any(_spelling_variant(x, y) for x in terms_a for y in terms_b):
                lexical_seen[key] = "spelling"
            else:
                lexical_seen[key] = None
        return lexical_seen[key]

    views: dict = {}
    views_version = [tree.version]

    def view(nid: str) -> Candidate:
        if views_version[0] != tree.version:
            views.clear()
            views_version[0] = tree.version
        if nid not in views:
            views[nid] = tree.candidate(nid)
        return views[nid]

    def functional(a: LabelNode, b: LabelNode):
        key = (view(a.id), view(b.id))
        if key not in functional_seen:
            functional_seen[key] = "function" if matcher.is_duplicate(*key) else None
        return functional_seen[key]

    _merge_pass(tree, report, lexical)
    _merge_pass(tree, report, functional)
    tree.validate()
    return report


# ---------------------------------------------------------------------------
# label mapping


@dataclass
class MappingResult:
    subtree: LabelTree
    rejects: dict[str, int]


def map_labels(tree: LabelTree, image_label_counts: Mapping[str, int]) -> MappingResult:
    """Set frequencies from per-label image counts and cut the used sub-tree.

    The sub-tree keeps every node with a positive frequency plus its
    ancestors. Unknown names land in ``rejects``.
    """
    for n in tree.nodes.values():
        n.frequency = 0
    rejects: dict[str, int] = {}
    for name, count in image_label_counts.items():
        if count < 0:
            raise ValueError(f"negative count for {name!r}")
        nid = tree.find(name)
        if nid is None:
            rejects[name] = rejects.get(name, 0) + int(count)
        else:
            tree.nodes[nid].frequency += int(count)
    tree.version += 1

    keep: set[str] = set()
    for n in tree.nodes.values():
        if n.frequency > 0:
            keep.add(n.id)
            keep.update(tree.ancestors(n.id))
    sub = LabelTree([copy.deepcopy(tree.nodes[k]) for k in sorted(keep)], tree.version)
    return MappingResult(sub, rejects)


def ancestor_closure(tree: LabelTree, labels: Iterable[str], level: int) -> set[str]:
    """Lift labels to their ancestor at ``level``; labels above ``level`` are dropped."""
    out = set()
    for nid in labels:
        node = tree[nid]
        if node.level < level:
            continue
        while node.level > level:
            node = tree[node.parent]
        out.add(node.id)
    return out


def read_image_labels_csv(path) -> Counter:
    """Count distinct images per label from ``image_id,label_name`` rows."""
    seen = set()
    counts: Counter = Counter()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and [c.strip().lower() for c in row[:2]] == ["image_id", "label_name"]:
                continue
            if len(row) < 2:
                raise ValueError(f"line {lineno}: expected image_id,label_name")
            key = (row[0].strip(), normalize(row[1]))
            if key not in seen:
                seen.add(key)
                counts[key[1]] += 1
    return counts
