"""Semantic matchers used to place and merge labels.

``DictionaryMatcher`` is deterministic and offline. ``RemoteMatcher`` talks to
an HTTP JSON service and records every exchange; ``ReplayMatcher`` serves a
recorded transcript back without a network.
"""

from __future__ import annotations

import json
import re
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

__all__ = [
    "LabelQuery",
    "Candidate",
    "SemanticMatcher",
    "SynonymDictionary",
    "DictionaryMatcher",
    "RemoteMatcher",
    "ReplayMatcher",
    "MatcherUnavailableError",
    "normalize",
    "tokens",
    "edit_distance",
]

_STOPWORDS = frozenset(
    "a an and are as at be by for from in into is it of on or that the their this to "
    "typically usually used with would where which tagged part".split()
)


@lru_cache(maxsize=1 << 14)
def normalize(name: str) -> str:
    return " ".join(name.strip().lower().split())


def _stem(tok: str) -> str:
    if len(tok) > 4 and tok.endswith("ies"):
        return tok[:-3] + "y"
    if tok.endswith("sses"):
        return tok[:-2]
    if len(tok) > 3 and tok.endswith("s") and not tok.endswith("ss"):
        return tok[:-1]
    return tok


def tokens(text: str | None) -> set[str]:
    if not text:
        return set()
    return {_stem(t) for t in re.findall(r"[a-z0-9]+", text.lower()) if t not in _STOPWORDS}


def edit_distance(a: str, b: str) -> int:
    """Optimal string alignment distance (adjacent transpositions cost 1)."""
    la, lb = len(a), len(b)
    d = [[0] * (lb + 1) for _ in range(la + 1)]
    for i in range(la + 1):
        d[i][0] = i
    for j in range(lb + 1):
        d[0][j] = j
    for i in range(1, la + 1):
        for j in range(1, lb + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + cost)
            if i > 1 and j > 1 and a[i - 1] == b[j - 2] and a[i - 2] == b[j - 1]:
                d[i][j] = min(d[i][j], d[i - 2][j - 2] + 1)
    return d[la][lb]


@dataclass(frozen=True)
class LabelQuery:
    name: str
    description: str = ""
    category: str = ""


@dataclass(frozen=True)
class Candidate:
    """A tree node as seen by a matcher; ``descendants`` holds names and synonyms below it."""

    id: str
    name: str
    description: str = ""
    synonyms: tuple[str, ...] = ()
    descendants: tuple[str, ...] = ()


class MatcherUnavailableError(RuntimeError):
    pass


class SemanticMatcher(Protocol):
    def best_match(self, query: LabelQuery, candidates: Sequence[Candidate]) -> tuple[str | None, float]:
        ...

    def is_duplicate(self, a: LabelQuery | Candidate, b: Candidate) -> bool:
        ...


class SynonymDictionary:
    def __init__(self, groups: Sequence[Sequence[str]] = ()):
        self._group_of: dict[str, int] = {}
        self.groups: list[frozenset[str]] = []
        for group in groups:
            self.add_group(group)

    def add_group(self, names: Sequence[str]) -> None:
        names = frozenset(normalize(n) for n in names)
        merged = set(names)
        for n in names:
            if n in self._group_of:
                merged |= self.groups[self._group_of[n]]
        idx = len(self.groups)
        self.groups.append(frozenset(merged))
        for n in merged:
            self._group_of[n] = idx

    def same_group(self, a: str, b: str) -> bool:
        a, b = normalize(a), normalize(b)
        ga, gb = self._group_of.get(a), self._group_of.get(b)
        return ga is not None and ga == gb

    @classmethod
    def default(cls) -> "SynonymDictionary":
        data = resources.files("geocurate").joinpath("data/synonyms.json").read_text()
        return cls(json.loads(data)["groups"])


def _names_of(x: LabelQuery | Candidate) -> set[str]:
    names = {normalize(x.name)}
    if isinstance(x, Candidate):
        names |= {normalize(s) for s in x.synonyms}
    return names


class DictionaryMatcher:
    """Token-overlap matcher backed by a synonym dictionary.

    A candidate scores the best fraction of one of its phrases (name or
    synonym) whose tokens appear in the query's name, category or
    description; phrases of its descendants count at ``descendant_weight``.
    """

    def __init__(self, dictionary: SynonymDictionary | None = None, descendant_weight: float = 0.9,
                 description_jaccard: float = 0.8):
        self.dictionary = dictionary if dictionary is not None else SynonymDictionary.default()
        self.descendant_weight = descendant_weight
        self.description_jaccard = description_jaccard

    def _query_tokens(self, query: LabelQuery) -> set[str]:
        toks = tokens(query.name) | tokens(query.category) | tokens(query.description)
        for group in self.dictionary.groups:
            if any(tokens(member) and tokens(member) <= toks for member in group):
                for member in group:
                    toks |= tokens(member)
        return toks

    @staticmethod
    def _coverage(phrase: str, qtoks: set[str]) -> float:
        ptoks = tokens(phrase)
        if not ptoks:
            return 0.0
        return len(ptoks & qtoks) / len(ptoks)

    def score(self, query: LabelQuery, cand: Candidate) -> float:
        qtoks = self._query_tokens(query)
        own = max(self._coverage(p, qtoks) for p in (cand.name, *cand.synonyms))
        below = max((self._coverage(p, qtoks) for p in cand.descendants), default=0.0)
        return max(own, self.descendant_weight * below)

    def best_match(self, query: LabelQuery, candidates: Sequence[Candidate]) -> tuple[str | None, float]:
        best, best_score = None, 0.0
        for cand in sorted(candidates, key=lambda c: normalize(c.name)):
            s = self.score(query, cand)
            if s > best_score:
                best, best_score = cand.id, s
        return best, best_score

    def is_duplicate(self, a: LabelQuery | Candidate, b: Candidate) -> bool:
        na, nb = _names_of(a), _names_of(b)
        if na & nb:
            return True
        if any(self.dictionary.same_group(x, y) for x in na for y in nb):
            return True
        da, db = tokens(a.description), tokens(b.description)
        if len(da) >= 3 and len(db) >= 3:
            return len(da & db) / len(da | db) >= self.description_jaccard
        return False


def _candidate_json(c: Candidate) -> dict:
    return asdict(c) | {"synonyms": list(c.synonyms), "descendants": list(c.descendants)}


def _query_json(q: LabelQuery | Candidate) -> dict:
    return _candidate_json(q) if isinstance(q, Candidate) else asdict(q)


@dataclass
class RemoteMatcher:
    """Client for ``POST {query, candidates[], mode} -> {best, score}``.

    ``mode`` is ``"match"`` or ``"duplicate"``; a duplicate verdict is a
    ``best`` equal to the single candidate with ``score >= duplicate_threshold``.
    """

    endpoint: str
    timeout: float = 30.0
    duplicate_threshold: float = 0.9
    transcript_path: str | None = None
    transcript: list = field(default_factory=list)

    def _call(self, payload: dict) -> dict:
        body = json.dumps(payload, sort_keys=True).encode()
        req = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                reply = json.loads(resp.read().decode())
        except (urllib.error.URLError, TimeoutError, OSError, json.JSONDecodeError) as exc:
            raise MatcherUnavailableError(
                f"matcher transport failure at {self.endpoint}: {exc}; retry later or use the dictionary matcher"
            ) from exc
        record = {"request": payload, "response": reply}
        self.transcript.append(record)
        if self.transcript_path:
            with open(self.transcript_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        return reply

    def best_match(self, query, candidates):
        reply = self._call({
            "mode": "match",
            "query": _query_json(query),
            "candidates": [_candidate_json(c) for c in candidates],
        })
        score = float(reply.get("score", 0.0))
        return reply.get("best"), min(max(score, 0.0), 1.0)

    def is_duplicate(self, a, b):
        reply = self._call({"mode": "duplicate", "query": _query_json(a), "candidates": [_candidate_json(b)]})
        return reply.get("best") == b.id and float(reply.get("score", 0.0)) >= self.duplicate_threshold


class ReplayMatcher(RemoteMatcher):
    """Answers from a recorded transcript; unknown requests are a transport failure."""

    def __init__(self, records: Sequence[dict], duplicate_threshold: float = 0.9):
        super().__init__(endpoint="replay://", duplicate_threshold=duplicate_threshold)
        self._answers = {json.dumps(r["request"], sort_keys=True): r["response"] for r in records}

    @classmethod
    def from_file(cls, path, **kw) -> "ReplayMatcher":
        lines = Path(path).read_text().splitlines()
        return cls([json.loads(line) for line in lines if line.strip()], **kw)

    def _call(self, payload: dict) -> dict:
        key = json.dumps(payload, sort_keys=True)
        if key not in self._answers:
            raise MatcherUnavailableError("request not present in replay transcript")
        return self._answers[key]
