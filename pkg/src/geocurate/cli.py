"""Command-line entry point.

Exit codes: 0 success, 1 input or contract error, 2 gated refusal.
Every output lands under ``--out-dir`` with a fixed file name.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autocorrelation import (
    ClusterLabel,
    Hotspot,
    Significance,
    getis_ord_gi_star,
    global_morans_i,
    local_morans_i,
    select_sampling_regions,
)
from .config import ConfigError, PipelineConfig, provenance
from .grid_io import GridKind, RasterGrid, RegionSet, load_regions, read_ascii_grid, region_aggregate
from .lsi_sampler import InfeasibleAllocationError, dumps_geojson, points_to_geojson, run_sampling
from .matchers import DictionaryMatcher, RemoteMatcher
from .retrieval_eval import evaluate, format_table, load_truth, read_run
from .taxonomy import (
    LabelTree,
    TaxonomyError,
    consolidate_duplicates,
    include_novel_label,
    map_labels,
    read_image_labels_csv,
)
from .weights import (
    WeightMatrix,
    contiguity_weights,
    distance_decay,
    inverse_distance_weights,
    row_standardize,
    write_weights_csv,
)

log = logging.getLogger("geocurate")

EXIT_OK, EXIT_INPUT, EXIT_GATED = 0, 1, 2

MORAN_JSON = "moran.json"
LISA_JSON = "lisa.json"
LISA_GEOJSON = "lisa.geojson"
GISTAR_JSON = "gistar.json"
GISTAR_GEOJSON = "gistar.geojson"
WEIGHTS_CSV = "weights.csv"
SELECTED_GEOJSON = "selected_regions.geojson"
ALLOCATION_JSON = "allocation.json"
SAMPLES_GEOJSON = "samples.geojson"
METRICS_JSON = "metrics.json"
METRICS_TXT = "metrics.txt"


class GatedRefusal(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _dump(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _significance(cfg: PipelineConfig) -> Significance:
    return Significance(cfg.method, cfg.permutations, cfg.seed, cfg.alpha, cfg.workers)


def _light_inputs(cfg: PipelineConfig) -> tuple[RasterGrid, RegionSet, np.ndarray]:
    cfg.require("light_raster", "regions")
    grid = read_ascii_grid(cfg.light_raster, GridKind.CONTINUOUS)
    regions = load_regions(cfg.regions, grid)
    return grid, regions, region_aggregate(grid, regions, cfg.aggregator)


def _weights(cfg: PipelineConfig, regions: RegionSet, grid: RasterGrid) -> WeightMatrix:
    if cfg.weights_scheme == "inverse_distance":
        W = inverse_distance_weights(regions.centroids(grid), cfg.gamma or 1.0, cfg.cutoff)
    else:
        W = contiguity_weights(regions, cfg.weights_rule)
        if cfg.gamma is not None:
            W = distance_decay(W, regions.centroids(grid), cfg.gamma)
    return row_standardize(W) if cfg.standardize else W


def _region_polygon(grid: RasterGrid, cells) -> dict:
    from shapely.geometry import box, mapping
    from shapely.ops import unary_union

    cs = grid.cell_size
    boxes = []
    for r, c in sorted(cells):
        x0 = grid.origin_x + c * cs
        y0 = grid.origin_y + (grid.rows - r - 1) * cs
        boxes.append(box(x0, y0, x0 + cs, y0 + cs))
    geom = mapping(unary_union(boxes))
    return json.loads(json.dumps(geom))


def _feature_collection(grid: RasterGrid, regions: RegionSet, props: dict[str, dict], prov: dict) -> dict:
    features = []
    for region in regions:
        if region.region_id not in props:
            continue
        features.append({
            "type": "Feature",
            "geometry": _region_polygon(grid, region.cells),
            "properties": {"region_id": region.region_id, **props[region.region_id]},
        })
    return {"type": "FeatureCollection", "provenance": prov, "features": features}


def _moran(cfg, grid, regions, x, W):
    result = global_morans_i(x, W, _significance(cfg))
    return result, {
        **provenance(cfg),
        "n_regions": len(regions),
        "I": result.I,
        "expected_I": result.expected_I,
        "z_score": result.z_score,
        "p_value": result.p_value,
        "method": result.method,
        "n_permutations": result.n_permutations,
        "alpha": cfg.alpha,
        "pattern": result.pattern(cfg.alpha),
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_moran(cfg: PipelineConfig, args) -> int:
    grid, regions, x = _light_inputs(cfg)
    W = _weights(cfg, regions, grid)
    _, report = _moran(cfg, grid, regions, x, W)
    _dump(args.out_dir / MORAN_JSON, report)
    write_weights_csv(W, args.out_dir / WEIGHTS_CSV)
    log.info("Moran's I = %.4f (p = %.4f, %s)", report["I"], report["p_value"], report["pattern"])
    return EXIT_OK


def _lisa(cfg, args, grid, regions, x, W, force: bool):
    result, moran = _moran(cfg, grid, regions, x, W)
    _dump(args.out_dir / MORAN_JSON, moran)
    if not result.rejects_randomness(cfg.alpha) and not force:
        raise GatedRefusal(
            f"global Moran's I does not reject randomness (p = {result.p_value:.4g} > {cfg.alpha}); use --force"
        )
    return local_morans_i(x, W, _significance(cfg), regions.ids)


def cmd_lisa(cfg: PipelineConfig, args) -> int:
    grid, regions, x = _light_inputs(cfg)
    W = _weights(cfg, regions, grid)
    lisa = _lisa(cfg, args, grid, regions, x, W, args.force)
    prov = provenance(cfg)
    records = [
        {"region_id": r.region_id, "z_i": r.z_i, "lisa": r.lisa, "statistic": r.I_local,
         "z": r.z_score, "p": r.p_value, "label": r.cluster.value}
        for r in lisa
    ]
    _dump(args.out_dir / LISA_JSON, {**prov, "alpha": cfg.alpha, "regions": records})
    props = {rec["region_id"]: {k: v for k, v in rec.items() if k != "region_id"} for rec in records}
    _dump(args.out_dir / LISA_GEOJSON, _feature_collection(grid, regions, props, prov))
    return EXIT_OK


def _gistar(cfg, regions, x, W):
    return getis_ord_gi_star(x, W, _significance(cfg), regions.ids)


def cmd_gistar(cfg: PipelineConfig, args) -> int:
    grid, regions, x = _light_inputs(cfg)
    W = _weights(cfg, regions, grid)
    gi = _gistar(cfg, regions, x, W)
    prov = provenance(cfg)
    records = [
        {"region_id": r.region_id, "statistic": r.g_star, "z": r.g_star, "p": r.p_value, "label": r.hotspot.value}
        for r in gi
    ]
    _dump(args.out_dir / GISTAR_JSON, {**prov, "alpha": cfg.alpha, "regions": records})
    props = {rec["region_id"]: {k: v for k, v in rec.items() if k != "region_id"} for rec in records}
    _dump(args.out_dir / GISTAR_GEOJSON, _feature_collection(grid, regions, props, prov))
    return EXIT_OK


def _labels_from_reports(out_dir: Path):
    lisa_path, gi_path = out_dir / LISA_JSON, out_dir / GISTAR_JSON
    if not (lisa_path.exists() and gi_path.exists()):
        return None
    lisa = json.loads(lisa_path.read_text())["regions"]
    gi = json.loads(gi_path.read_text())["regions"]
    return (
        {r["region_id"]: ClusterLabel(r["label"]) for r in lisa},
        {r["region_id"]: Hotspot(r["label"]) for r in gi},
    )


def _selection(cfg, args, grid, regions, x):
    labels = _labels_from_reports(args.out_dir)
    if labels is None:
        W = _weights(cfg, regions, grid)
        lisa = _lisa(cfg, args, grid, regions, x, W, getattr(args, "force", False))
        gi = _gistar(cfg, regions, x, W)
        clusters = {r.region_id: r.cluster for r in lisa}
        spots = {r.region_id: r.hotspot for r in gi}
    else:
        clusters, spots = labels
    selected = select_sampling_regions(clusters, spots)
    return selected, clusters, spots


def cmd_select_regions(cfg: PipelineConfig, args) -> int:
    grid, regions, x = _light_inputs(cfg)
    selected, clusters, spots = _selection(cfg, args, grid, regions, x)
    props = {
        rid: {"cluster": clusters[rid].value, "hotspot": spots[rid].value,
              "rule": "outlier" if clusters[rid] in (ClusterLabel.HIGH_LOW, ClusterLabel.LOW_HIGH) else "cluster_and_hotspot"}
        for rid in selected
    }
    doc = _feature_collection(grid, regions, props, provenance(cfg))
    _dump(args.out_dir / SELECTED_GEOJSON, doc)
    log.info("selected %d of %d regions", len(selected), len(regions))
    return EXIT_OK


def cmd_sample(cfg: PipelineConfig, args) -> int:
    cfg.require("landcover_raster", "regions")
    lc = read_ascii_grid(cfg.landcover_raster, GridKind.CATEGORICAL)
    regions = load_regions(cfg.regions, lc)
    if args.all_regions:
        chosen = regions
    else:
        sel_path = args.out_dir / SELECTED_GEOJSON
        if sel_path.exists():
            feats = json.loads(sel_path.read_text())["features"]
            ids = {f["properties"]["region_id"] for f in feats}
        else:
            grid, light_regions, x = _light_inputs(cfg)
            ids, _, _ = _selection(cfg, args, grid, light_regions, x)
        unknown = sorted(ids - set(regions.ids))
        if unknown:
            raise ValueError(f"selected regions missing from region set: {unknown[:10]}")
        chosen = regions.subset(ids)
    prov = provenance(cfg)
    if cfg.total_samples > 0 and len(chosen) == 0:
        raise ValueError("cannot allocate samples: no selected regions")
    plan, points = run_sampling(
        lc, chosen, cfg.total_samples, cfg.unit_rows, cfg.unit_cols, cfg.seed, cfg.clamp, cfg.workers
    )
    _dump(args.out_dir / ALLOCATION_JSON, {**prov, **plan.to_json()})
    geo = points_to_geojson(points, lc)
    geo["provenance"] = prov
    (args.out_dir / SAMPLES_GEOJSON).write_text(dumps_geojson(geo))
    for w in plan.rounding_trace["warnings"]:
        log.warning("region %s class %s: %s", w["region_id"], w["class"], w["message"])
    log.info("placed %d sample points", len(points))
    return EXIT_OK


def _matcher(args):
    if args.matcher == "remote":
        if not args.endpoint:
            raise ConfigError("--endpoint is required with --matcher remote")
        return RemoteMatcher(args.endpoint, timeout=args.timeout, transcript_path=args.transcript)
    return DictionaryMatcher()


def _write_tree(tree: LabelTree, out_dir: Path, stem: str = "taxonomy") -> Path:
    tree.validate()
    path = out_dir / f"{stem}.v{tree.version}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(tree.dumps())
    return path


def cmd_taxonomy(cfg: PipelineConfig, args) -> int:
    cfg.require("taxonomy")
    tree = LabelTree.load(cfg.taxonomy)
    out = args.out_dir
    if args.action == "add":
        placement = include_novel_label(
            tree, args.name, args.description or "", _matcher(args), category=args.category or ""
        )
        path = _write_tree(tree, out)
        _dump(out / "placement.json", {**provenance(cfg), "parent": placement.parent_id,
                                       "node": placement.node_id, "level": placement.level,
                                       "path": list(placement.path), "scores": list(placement.scores),
                                       "taxonomy": path.name})
        log.info("added %s under %s", placement.node_id, placement.parent_id)
    elif args.action == "merge":
        before = tree.version
        report = consolidate_duplicates(tree, _matcher(args))
        tree.version = max(tree.version, before + 1)
        path = _write_tree(tree, out)
        _dump(out / "merge_report.json", {**provenance(cfg), **report.to_json(), "taxonomy": path.name})
    elif args.action == "map":
        if not args.counts:
            raise ConfigError("--counts is required for taxonomy map")
        counts = read_image_labels_csv(args.counts)
        result = map_labels(tree, counts)
        path = _write_tree(tree, out)
        sub_path = _write_tree(result.subtree, out, "taxonomy_mapped")
        _dump(out / "rejects.json", {**provenance(cfg), "rejects": result.rejects,
                                     "taxonomy": path.name, "mapped": sub_path.name})
        levels = {str(k): len(v) for k, v in sorted(result.subtree.level_sets().items())}
        log.info("mapped sub-tree level sizes: %s; %d rejects", levels, len(result.rejects))
    else:
        tree.validate()
        out.mkdir(parents=True, exist_ok=True)
        (out / "taxonomy_export.json").write_text(tree.dumps())
        lines = []

        def walk(nid, depth):
            n = tree[nid]
            syn = f" (= {', '.join(sorted(n.synonyms))})" if n.synonyms else ""
            lines.append(f"{'  ' * depth}{n.name}{syn} [{n.frequency}]")
            for child in tree.children(nid):
                walk(child, depth + 1)

        for root in tree.roots:
            walk(root, 0)
        (out / "taxonomy_export.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_eval(cfg: PipelineConfig, args) -> int:
    cfg.require("run", "truth")
    tree = LabelTree.load(cfg.taxonomy) if cfg.taxonomy else None
    truth, unresolved = load_truth(cfg.truth, tree, cfg.level)
    run = read_run(cfg.run, cfg.direction)
    unknown = sorted({i for items in run.queries.values() for i in items if i not in truth.items}
                     | {q for q in run.queries if q not in truth.items})
    if unknown:
        raise ValueError(f"run references unknown items: {' '.join(unknown[:10])}")
    report = evaluate(run, truth, cfg.cutoffs)
    doc = {**provenance(cfg), **report.to_json(), "unresolved_labels": unresolved}
    _dump(args.out_dir / METRICS_JSON, doc)
    (args.out_dir / METRICS_TXT).write_text(format_table(report))
    if not args.quiet:
        sys.stdout.write(format_table(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="flat JSON config file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--out-dir", type=Path, default=argparse.SUPPRESS)
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    return p


def _significance_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float)
    p.add_argument("--permutations", type=int)
    p.add_argument("--method", choices=("analytical", "permutation"))
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="geocurate", parents=[common], description=__doc__)
    parser.add_argument("--version", action="version", version=f"geocurate {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, helptext in (
        ("moran", cmd_moran, "global Moran's I on region-aggregated light"),
        ("lisa", cmd_lisa, "local Moran's I, gated on the global test"),
        ("gistar", cmd_gistar, "Getis-Ord Gi* hot/cold spots"),
        ("select-regions", cmd_select_regions, "combine LISA clusters and Gi* spots"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        _significance_flags(p)
        p.add_argument("--force", action="store_true", help="run LISA even if the global test is not significant")
        p.set_defaults(func=fn)

    p = sub.add_parser("sample", parents=[common], help="LSI-driven allocation and point placement")
    _significance_flags(p)
    p.add_argument("--total-samples", type=int)
    p.add_argument("--clamp", action="store_true", default=None)
    p.add_argument("--all-regions", action="store_true", help="sample every region, skipping selection")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("taxonomy", parents=[common], help="edit the label taxonomy")
    p.add_argument("action", choices=("add", "merge", "map", "export"))
    p.add_argument("--name")
    p.add_argument("--description")
    p.add_argument("--category", help="source category of the label, e.g. an OSM key")
    p.add_argument("--counts", help="CSV of image_id,label_name rows")
    p.add_argument("--taxonomy", help="taxonomy JSON (overrides config)")
    p.add_argument("--matcher", choices=("dictionary", "remote"), default="dictionary")
    p.add_argument("--endpoint")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--transcript", help="append remote matcher exchanges to this JSONL file")
    p.set_defaults(func=cmd_taxonomy)

    p = sub.add_parser("eval", parents=[common], help="ACG/NDCG/MAP/WMAP of a retrieval run")
    p.add_argument("--level", type=int, choices=(2, 3))
    p.add_argument("--cutoffs", help="comma-separated, e.g. 5,10,20,50,100")
    p.add_argument("--run")
    p.add_argument("--truth")
    p.add_argument("--taxonomy")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-world", parents=[common], help="write the synthetic demo world")
    p.set_defaults(func=None)
    return parser


def _overrides(args) -> dict:
    ov = {}
    for attr, key in (
        ("seed", "seed"), ("alpha", "alpha"), ("permutations", "permutations"), ("method", "method"),
        ("workers", "workers"), ("total_samples", "total_samples"), ("clamp", "clamp"),
        ("level", "level"), ("run", "run"), ("truth", "truth"), ("taxonomy", "taxonomy"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            ov[key] = value
    if getattr(args, "cutoffs", None):
        try:
            ov["cutoffs"] = [int(v) for v in args.cutoffs.split(",")]
        except ValueError:
            raise ConfigError(f"invalid --cutoffs {args.cutoffs!r}") from None
    for key in ("run", "truth", "taxonomy"):
        if key in ov:
            ov[key] = str(Path(ov[key]).resolve())
    return ov


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.out_dir = Path(getattr(args, "out_dir", "out"))
    args.quiet = getattr(args, "quiet", False)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")

    try:
        if args.command == "make-world":
            from .synthetic import make_world

            make_world(args.out_dir, seed=getattr(args, "seed", 7))
            return EXIT_OK
        cfg = PipelineConfig.load(getattr(args, "config", None), _overrides(args))
        args.out_dir.mkdir(parents=True, exist_ok=True)
        return args.func(cfg, args)
    except GatedRefusal as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_GATED
    except FileNotFoundError as exc:
        msg = str(exc) if str(exc).startswith("file not found") else f"file not found: {exc.filename}"
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT
    except InfeasibleAllocationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, KeyError, TaxonomyError, OSError, RuntimeError) as exc:
        text = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
        print(f"error: {' '.join(text.split())}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
