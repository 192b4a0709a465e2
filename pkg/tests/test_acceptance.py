"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import json
import math
import time

import numpy as np
import pytest

from geocurate.autocorrelation import (
    ClusterLabel,
    Hotspot,
    Significance,
    global_morans_i,
    select_sampling_regions,
)
from geocurate.cli import main
from geocurate.grid_io import GridKind, RasterGrid, load_regions, read_ascii_grid, regions_from_label_raster
from geocurate.lsi_sampler import (
    allocate_classes,
    allocate_regions,
    dumps_geojson,
    lsi,
    points_to_geojson,
    region_shares,
    run_sampling,
)
from geocurate.matchers import DictionaryMatcher
from geocurate.retrieval_eval import (
    GroundTruth,
    RankedRun,
    average_precision,
    evaluate,
    weighted_average_precision,
)
from geocurate.synthetic import bundled_world
from geocurate.taxonomy import (
    LabelExistsError,
    LabelTree,
    TaxonomyError,
    consolidate_duplicates,
    include_novel_label,
    map_labels,
)
from geocurate.weights import contiguity_weights
from oracles import lsi_bruteforce, lsi_value, metric_reference, select_regions


def report(capsys, tag, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {tag}: {detail}")
    assert ok, detail


def lattice(rows, cols, rule="edge"):
    return contiguity_weights(regions_from_label_raster(np.arange(rows * cols).reshape(rows, cols)), rule)


def test_ac1_moran_exactness(capsys):
    t0 = time.perf_counter()
    sig = Significance(permutations=99, seed=0)
    checker = global_morans_i([1, 0, 0, 1], lattice(2, 2), sig).I
    chain = global_morans_i([1, 1, 0, 0], lattice(1, 4), sig).I
    elapsed = time.perf_counter() - t0
    ok = checker == -1.0 and abs(chain - 1 / 3) <= 1e-12 and elapsed < 1.0
    report(capsys, "AC1 Moran exactness", ok, f"checkerboard I={checker!r}, chain I={chain!r}, {elapsed:.3f}s")


def test_ac2_permutation_calibration(capsys):
    t0 = time.perf_counter()
    W = lattice(10, 10)
    rejections = 0
    reps = 200
    for rep in range(reps):
        x = np.random.default_rng(10_000 + rep).random(100)
        r = global_morans_i(x, W, Significance(permutations=199, seed=rep))
        rejections += r.p_value <= 0.05
    rate = rejections / reps
    elapsed = time.perf_counter() - t0
    ok = 0.02 <= rate <= 0.09 and elapsed < 60
    report(capsys, "AC2 permutation calibration", ok, f"false-positive rate {rate:.3f} over {reps} replicates, {elapsed:.1f}s")


def test_ac3_selection_oracle(capsys):
    rng = np.random.default_rng(3)
    clusters = [c.value for c in ClusterLabel]
    spots = [h.value for h in Hotspot]
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 21))
        ids = [f"R{i}" for i in range(n)]
        cl = {r: clusters[int(rng.integers(len(clusters)))] for r in ids}
        gs = {r: spots[int(rng.integers(len(spots)))] for r in ids}
        mismatches += select_sampling_regions(cl, gs) != select_regions(cl, gs)
    report(capsys, "AC3 selection oracle", mismatches == 0, f"{mismatches} mismatches in 1000 instances")


def test_ac4_lsi_oracle(capsys):
    rng = np.random.default_rng(4)
    mismatches = 0
    checks = 0
    for _ in range(500):
        k = int(rng.integers(1, 6))
        codes = rng.integers(0, k, size=(16, 16))
        mask = np.ones((16, 16), dtype=bool)
        for target in ("all", *range(k)):
            total, q = lsi_bruteforce(codes.tolist(), mask.tolist(), target)
            mismatches += lsi(codes, target).value != lsi_value(total, q)
            checks += 1
    board = np.array([[1, 2], [2, 1]])
    all_mode = lsi(board).value
    class_mode = lsi(board, 1).value
    ok = mismatches == 0 and all_mode == 1.0 and abs(class_mode - 1 / math.sqrt(2)) <= 1e-12
    report(capsys, "AC4 LSI oracle", ok,
           f"{mismatches}/{checks} mismatches; checkerboard all={all_mode!r}, class={class_mode!r}")


def test_ac5_allocation_conservation(capsys):
    rng = np.random.default_rng(5)
    broken = 0
    for _ in range(1000):
        ids = [f"R{i}" for i in range(int(rng.integers(1, 12)))]
        rl = {r: float(rng.random()) * (rng.random() < 0.85) for r in ids}
        rl[ids[int(rng.integers(len(ids)))]] = float(rng.random()) + 1e-3
        areas = {r: float(rng.uniform(0.5, 50)) for r in ids}
        N = int(rng.integers(0, 300))
        per_region = allocate_regions(rl, areas, N)
        broken += sum(per_region.values()) != N
        cl, props = {}, {}
        for r in ids:
            ks = list(range(1, int(rng.integers(2, 7))))
            w = rng.dirichlet(np.ones(len(ks)))
            for k, wk in zip(ks, w):
                cl[(r, k)] = float(rng.random()) * (rng.random() < 0.8)
                props[(r, k)] = float(wk)
            cl[(r, ks[0])] = float(rng.random()) + 1e-3
        per_class = allocate_classes(cl, props, per_region)
        for r in ids:
            broken += sum(v for (rr, _), v in per_class.items() if rr == r) != per_region[r]

    decreases = 0
    for _ in range(1000):
        ids = [f"R{i}" for i in range(int(rng.integers(2, 12)))]
        rl = {r: float(rng.random()) for r in ids}
        areas = {r: float(rng.uniform(0.5, 50)) for r in ids}
        N = int(rng.integers(1, 300))
        target = ids[int(rng.integers(len(ids)))]
        before = region_shares(rl, areas, N)[target]
        rl[target] += float(rng.exponential())
        decreases += region_shares(rl, areas, N)[target] < before
    ok = broken == 0 and decreases == 0
    report(capsys, "AC5 allocation conservation", ok,
           f"{broken} conservation failures in 1000 instances, {decreases} share decreases in 1000 trials")


def _random_landcover(rng, size=32, classes=5):
    seeds = rng.uniform(0, size, size=(int(rng.integers(6, 30)), 2))
    codes = rng.integers(1, classes + 1, size=len(seeds))
    rr, cc = np.mgrid[0:size, 0:size]
    d = (rr[..., None] + 0.5 - seeds[:, 0]) ** 2 + (cc[..., None] + 0.5 - seeds[:, 1]) ** 2
    lc = codes[np.argmin(d, axis=-1)]
    noise = rng.random((size, size)) < 0.05
    lc[noise] = rng.integers(1, classes + 1, size=int(noise.sum()))
    return RasterGrid(lc, 10.0, 0.0, 0.0, -1, GridKind.CATEGORICAL)


def test_ac6_placement_determinism(capsys, tmp_path):
    rng = np.random.default_rng(6)
    instances = []
    cfg = bundled_world(tmp_path / "world")
    lc = read_ascii_grid(cfg.parent / "landcover.asc")
    instances.append((lc, load_regions(cfg.parent / "regions.json", lc).subset(["R00", "R01", "R10", "R32"]), 48))
    for _ in range(20):
        grid = _random_landcover(rng)
        labels = (np.arange(32)[:, None] // 16) * 2 + np.arange(32)[None, :] // 16
        instances.append((grid, regions_from_label_raster(labels), int(rng.integers(1, 80))))

    differing = 0
    wrong_class = 0
    points_seen = 0
    for k, (grid, regions, total) in enumerate(instances):
        docs = []
        for workers in (1, 1, 8):
            _, pts = run_sampling(grid, regions, total, 4, 4, seed=1000 + k, clamp=True, workers=workers)
            docs.append(dumps_geojson(points_to_geojson(pts, grid)))
            for p in pts:
                wrong_class += int(grid.values[p.cell]) != p.class_code
                points_seen += 1
        differing += len(set(docs)) != 1
    ok = differing == 0 and wrong_class == 0
    report(capsys, "AC6 placement determinism", ok,
           f"{differing}/{len(instances)} instances not byte-identical; "
           f"{wrong_class}/{points_seen} points off-class")


def test_ac7_metric_oracle(capsys):
    rng = np.random.default_rng(7)
    exact_fail = 0
    ndcg_err = 0.0
    for _ in range(1000):
        n_labels = int(rng.integers(1, 6))
        m = int(rng.integers(1, 21))
        items = {}
        for i in range(m):
            size = int(rng.integers(1, n_labels + 1))
            items[f"i{i:02d}"] = frozenset(int(v) for v in rng.choice(n_labels, size=size, replace=False))
        qid = f"i{int(rng.integers(m)):02d}"
        ids = sorted(items)
        ranked = [ids[j] for j in rng.permutation(m)[: int(rng.integers(0, m + 1))]]
        rep = evaluate(RankedRun({qid: ranked}), GroundTruth(items), (1, 3, 5))
        qlab = items[qid]
        c = [len(qlab & items[r]) for r in ranked]
        ideal = [len(qlab & items[r]) for r in ids]
        for n in (1, 3, 5):
            acg, ndcg, ap, wap = metric_reference(c, ideal, n)
            got = rep.per_query[qid]
            exact_fail += (got["ACG"][n] != acg) + (got["MAP"][n] != ap) + (got["WMAP"][n] != wap)
            ndcg_err = max(ndcg_err, abs(got["NDCG"][n] - ndcg))
    ap_hand = average_precision([1, 0, 1], 3)
    wmap_hand = weighted_average_precision([2, 0, 1], 3)
    ok = exact_fail == 0 and ndcg_err <= 1e-12 and ap_hand == 5 / 6 and wmap_hand == 1.5
    report(capsys, "AC7 metric oracle", ok,
           f"{exact_fail} exact mismatches, max NDCG error {ndcg_err:.2e}, "
           f"AP(1,0,1)@3={ap_hand!r}, WMAP(2,0,1)@3={wmap_hand!r}")


_WORDS = ["farm", "yard", "green", "house", "water", "tower", "school", "rail", "way", "stone",
          "pit", "church", "field", "rice", "lake", "pond", "forest", "road", "park", "grave"]


def _random_ops(tree, matcher, rng, steps=200):
    failures = []
    for step in range(steps):
        op = rng.choice(["add", "variant", "merge", "map"], p=[0.45, 0.25, 0.15, 0.15])
        try:
            if op == "add":
                name = " ".join(rng.choice(_WORDS, size=int(rng.integers(1, 3))))
                if rng.random() < 0.5:
                    name += f" {int(rng.integers(100))}"
                include_novel_label(tree, name, "", matcher)
            elif op == "variant":
                # one-letter change of an existing name next to it, to feed the merge pass
                node = tree[str(rng.choice(sorted(tree.nodes)))]
                chars = list(node.name)
                chars[int(rng.integers(len(chars)))] = chr(97 + int(rng.integers(26)))
                tree.add_node("".join(chars), node.parent, frequency=int(rng.integers(5)))
            elif op == "merge":
                consolidate_duplicates(tree, matcher)
            else:
                picks = rng.choice(sorted(tree.nodes), size=5)
                result = map_labels(tree, {tree[p].name: int(rng.integers(1, 9)) for p in picks})
                result.subtree.validate()
        except LabelExistsError:
            pass
        except TaxonomyError as exc:
            if "cannot add below" not in str(exc):
                failures.append(f"step {step} {op}: {exc}")
        problems = tree.problems()
        if problems:
            failures.append(f"step {step} {op}: {problems[:3]}")
    return failures


def test_ac8_taxonomy_invariants(capsys):
    matcher = DictionaryMatcher()
    failures = []
    not_idempotent = 0
    for seed in range(3):
        tree = LabelTree.default()
        failures += _random_ops(tree, matcher, np.random.default_rng(800 + seed))
        consolidate_duplicates(tree, matcher)
        snapshot = tree.dumps()
        again = consolidate_duplicates(tree, matcher)
        not_idempotent += bool(again.merges) or tree.dumps() != snapshot

    tree = LabelTree.default()
    farm = include_novel_label(tree, "farmyard", "buildings for keeping animals, or crop supplies", matcher)
    tree.add_node("graveyard", "infrastructure", frequency=2)
    tree["cemetery"].frequency = 7
    merged = consolidate_duplicates(tree, matcher)
    worked = (
        farm.parent_id == "building"
        and any(m["survivor"] == "cemetery" and "graveyard" in m["absorbed"] for m in merged.merges)
        and tree.find("graveyard") == "cemetery"
    )
    ok = not failures and not_idempotent == 0 and worked
    report(capsys, "AC8 taxonomy invariants", ok,
           f"{len(failures)} validation failures over 3x200 ops, {not_idempotent} non-idempotent merges, "
           f"farmyard under {farm.parent_id!r}, cemetery/graveyard merged={tree.find('graveyard') == 'cemetery'}")


def _brick_regions(rows=100, per_row=100):
    # running-bond bricks two cells wide: two side neighbours, two above, two below
    labels = np.full((rows, 2 * per_row + 1), -1, dtype=np.int64)
    for r in range(rows):
        off = r % 2
        for b in range(per_row):
            labels[r, off + 2 * b: off + 2 * b + 2] = r * per_row + b
    return regions_from_label_raster(labels)


def test_ac9_scale(capsys):
    W = contiguity_weights(_brick_regions(), "edge")
    x = np.random.default_rng(9).random(W.n)
    t0 = time.perf_counter()
    r = global_morans_i(x, W, Significance(permutations=999, seed=9, workers=8))
    elapsed = time.perf_counter() - t0
    mean_nbrs = float(W.neighbor_counts.mean())
    ok = W.n == 10_000 and 5.5 <= mean_nbrs <= 6.0 and r.n_permutations == 999 and elapsed < 10
    report(capsys, "AC9 scale", ok,
           f"n={W.n}, mean neighbours {mean_nbrs:.2f}, 999 permutations in {elapsed:.2f}s")


def test_ac10_end_to_end(capsys, tmp_path):
    t0 = time.perf_counter()
    cfg = bundled_world(tmp_path / "world")
    out = tmp_path / "out"
    codes = {}
    for cmd in ("moran", "lisa", "gistar", "select-regions", "sample", "eval"):
        codes[cmd] = main(["--config", str(cfg), "--out-dir", str(out), "--quiet", cmd])

    alloc = json.loads((out / "allocation.json").read_text())
    samples = json.loads((out / "samples.geojson").read_text())
    selected = {f["properties"]["region_id"]
                for f in json.loads((out / "selected_regions.geojson").read_text())["features"]}
    checks = {}
    checks["region total"] = sum(alloc["per_region"].values()) == alloc["total"]
    checks["class totals"] = all(
        sum(c["count"] for c in alloc["per_class"] if c["region_id"] == rid) == n
        for rid, n in alloc["per_region"].items()
    )
    checks["points placed"] = len(samples["features"]) == sum(alloc["rounding_trace"]["placed"].values())
    lc = read_ascii_grid(cfg.parent / "landcover.asc")
    regions = load_regions(cfg.parent / "regions.json", lc)
    checks["point classes"] = all(
        int(lc.values[tuple(f["properties"]["cell"])]) == f["properties"]["class"] for f in samples["features"]
    )
    checks["points in selected regions"] = all(
        f["properties"]["region_id"] in selected
        and tuple(f["properties"]["cell"]) in regions.regions[regions.index_of(f["properties"]["region_id"])].cells
        for f in samples["features"]
    )
    again = tmp_path / "again"
    rerun = main(["--config", str(cfg), "--out-dir", str(again), "--quiet", "sample", "--workers", "8"])
    checks["rerun byte-identical"] = rerun == 0 and (
        (out / "samples.geojson").read_bytes() == (again / "samples.geojson").read_bytes()
    )
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    ok = all(c == 0 for c in codes.values()) and not failed and elapsed < 30
    report(capsys, "AC10 end-to-end", ok,
           f"exit codes {codes}, failed checks {failed}, {len(samples['features'])} points, {elapsed:.1f}s")
