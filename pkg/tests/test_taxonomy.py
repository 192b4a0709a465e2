import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from geocurate.matchers import (
    Candidate,
    DictionaryMatcher,
    LabelQuery,
    MatcherUnavailableError,
    RemoteMatcher,
    ReplayMatcher,
    edit_distance,
    normalize,
)
from geocurate.taxonomy import (
    UNCLASSIFIED,
    LabelExistsError,
    LabelTree,
    TaxonomyError,
    ancestor_closure,
    consolidate_duplicates,
    include_novel_label,
    map_labels,
    read_image_labels_csv,
)


@pytest.fixture
def tree():
    return LabelTree.default()


@pytest.fixture
def matcher():
    return DictionaryMatcher()


def test_default_tree_is_valid(tree):
    tree.validate()
    levels = tree.level_sets()
    assert len(levels[1]) == 7 and len(levels[2]) == 21
    assert tree.find("Cropland") == "farmland"


def test_normalize_and_edit_distance():
    assert normalize("  Parking   LOT ") == "parking lot"
    assert edit_distance("reservoir", "reservior") == 1
    assert edit_distance("pond", "pound") == 1
    assert edit_distance("lake", "park") == 3
    assert edit_distance("ab", "ba") == 1


def test_farmyard_goes_under_building(tree, matcher):
    p = include_novel_label(tree, "farmyard", "buildings for keeping animals, or crop supplies", matcher)
    assert p.parent_id == "building"
    assert tree[p.node_id].level == 3
    tree.validate()


def test_existing_label_rejected(tree, matcher):
    v = tree.version
    with pytest.raises(LabelExistsError, match="already present"):
        include_novel_label(tree, "Woodland", "", matcher)
    with pytest.raises(LabelExistsError, match="already present"):
        include_novel_label(tree, "graveyard", "a burial ground", matcher)
    assert tree.version == v


def test_unmatched_label_goes_to_unclassified(tree, matcher):
    p = include_novel_label(tree, "zzyzx", "no overlap at all", matcher)
    assert p.parent_id == UNCLASSIFIED
    assert tree[UNCLASSIFIED].level == 1
    tree.validate()
    # the reserved root never takes part in matching
    p2 = include_novel_label(tree, "qwerty", "", matcher)
    assert p2.parent_id == UNCLASSIFIED


def test_cemetery_graveyard_merge(tree, matcher):
    tree.add_node("graveyard", "infrastructure", frequency=3)
    tree["cemetery"].frequency = 5
    report = consolidate_duplicates(tree, matcher)
    assert report.merges == [{"survivor": "cemetery", "absorbed": ["graveyard"], "reason": "synonym"}]
    assert tree.find("graveyard") == "cemetery"
    assert tree["cemetery"].frequency == 8


def test_merge_survivor_by_frequency(tree, matcher):
    tree.add_node("graveyard", "infrastructure", frequency=9)
    tree["cemetery"].frequency = 1
    consolidate_duplicates(tree, matcher)
    assert tree.find("cemetery") == "graveyard"


def test_spelling_variant_and_children_move(tree, matcher):
    nid = tree.add_node("resevoir", "lake", frequency=0)
    kid = tree.add_node("silt trap", nid)
    report = consolidate_duplicates(tree, matcher)
    assert report.merges[0]["reason"] == "spelling"
    # equal frequency: the lexicographically smaller name survives
    assert nid not in tree and tree.find("resevoir") == "reservoir"
    assert tree[kid].parent == "reservoir"
    tree.validate()


def test_cross_level_pair_skipped(tree, matcher):
    tree.add_node("roads", "bridge")  # level 4, spelling variant of level-2 "road"
    report = consolidate_duplicates(tree, matcher)
    assert not report
    assert any("levels differ" in s["why"] for s in report.skipped)
    tree.validate()


def test_consolidation_idempotent(tree, matcher):
    tree.add_node("graveyard", "infrastructure", frequency=3)
    tree.add_node("car park", "road")
    consolidate_duplicates(tree, matcher)
    snapshot = tree.dumps()
    again = consolidate_duplicates(tree, matcher)
    assert not again.merges
    assert tree.dumps() == snapshot


def test_map_labels(tree):
    res = map_labels(tree, {"church": 5, "Lake": 2, "mystery": 4})
    assert res.rejects == {"mystery": 4}
    assert set(res.subtree.nodes) == {"church", "infrastructure", "building_area", "lake", "water_area"}
    res.subtree.validate()
    # frequencies are reset on every mapping
    res2 = map_labels(tree, {"church": 1})
    assert tree["church"].frequency == 1 and tree["lake"].frequency == 0
    assert set(res2.subtree.nodes) == {"church", "infrastructure", "building_area"}


def test_ancestor_closure(tree):
    assert ancestor_closure(tree, ["church"], 2) == {"infrastructure"}
    assert ancestor_closure(tree, ["church", "cemetery", "pond"], 1) == {"building_area", "water_area"}
    assert ancestor_closure(tree, ["building"], 3) == set()


def test_add_node_limits(tree):
    a = tree.add_node("level four", "church")
    with pytest.raises(TaxonomyError):
        tree.add_node("level five", a)
    with pytest.raises(TaxonomyError):
        tree.add_node("orphan", "missing")


def test_json_roundtrip(tree, tmp_path):
    tree.add_node("farmyard", "building", "animals", synonyms=["Farm Yard"])
    tree.save(tmp_path / "t.json")
    back = LabelTree.load(tmp_path / "t.json")
    assert back.dumps() == tree.dumps()
    assert back.find("farm yard") == "farmyard"


def test_image_label_csv(tmp_path):
    p = tmp_path / "labels.csv"
    p.write_text("image_id,label_name\na,Church\na,church\nb,church\nb,Lake\n")
    assert read_image_labels_csv(p) == {"church": 2, "lake": 1}


def test_dictionary_duplicate_rules():
    m = DictionaryMatcher()
    a = Candidate("x", "car park", "", (), ())
    b = Candidate("y", "parking lot", "", (), ())
    assert m.is_duplicate(a, b)
    c = Candidate("z", "lake", "a large body of still water", (), ())
    d = Candidate("w", "mere", "a large body of still water", (), ())
    assert m.is_duplicate(c, d)
    assert not m.is_duplicate(a, c)


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        payload = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        self.server.seen.append(payload)
        local = DictionaryMatcher()
        q = payload["query"]
        cands = [Candidate(c["id"], c["name"], c["description"], tuple(c["synonyms"]), tuple(c["descendants"]))
                 for c in payload["candidates"]]
        query = LabelQuery(q["name"], q.get("description", ""), q.get("category", ""))
        if payload["mode"] == "match":
            best, score = local.best_match(query, cands)
        else:
            best, score = (cands[0].id, 1.0) if local.is_duplicate(query, cands[0]) else (None, 0.0)
        body = json.dumps({"best": best, "score": score}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    srv.seen = []
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield srv
    srv.shutdown()
    srv.server_close()


def test_remote_matcher_and_replay(tree, server, tmp_path):
    url = f"http://127.0.0.1:{server.server_address[1]}/"
    log = tmp_path / "transcript.jsonl"
    remote = RemoteMatcher(url, timeout=5, transcript_path=str(log))
    p = include_novel_label(tree, "farmyard", "buildings for keeping animals, or crop supplies", remote)
    assert p.parent_id == "building"
    assert {s["mode"] for s in server.seen} <= {"match", "duplicate"}
    assert len(log.read_text().splitlines()) == len(server.seen)

    # the same request sequence replays offline
    fresh = LabelTree.default()
    replay = ReplayMatcher.from_file(log)
    p2 = include_novel_label(fresh, "farmyard", "buildings for keeping animals, or crop supplies", replay)
    assert p2 == p
    assert fresh.dumps() == tree.dumps()


def test_remote_transport_failure(tree):
    remote = RemoteMatcher("http://127.0.0.1:9/", timeout=0.5)
    v = tree.version
    with pytest.raises(MatcherUnavailableError, match="retry"):
        include_novel_label(tree, "farmyard", "animals", remote)
    assert tree.version == v


def test_replay_unknown_request():
    with pytest.raises(MatcherUnavailableError):
        ReplayMatcher([]).best_match(LabelQuery("a"), [])
