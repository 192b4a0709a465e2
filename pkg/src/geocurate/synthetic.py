"""Small synthetic world for demos and end-to-end checks.

64x64 night-light and land-cover grids cut into 16 square regions, plus a
label truth set and a noisy retrieval run over the bundled taxonomy.
"""

from __future__ import annotations

import json
import shutil
from importlib import resources
from pathlib import Path

import numpy as np

from .grid_io import GridKind, RasterGrid, regions_from_label_raster, write_ascii_grid
from .retrieval_eval import write_run
from .taxonomy import LabelTree

__all__ = ["make_world", "bundled_world"]

SIZE = 64
BLOCKS = 4
N_CLASSES = 5


def _light(rng: np.random.Generator) -> np.ndarray:
    block = SIZE // BLOCKS
    idx = np.arange(SIZE) // block
    A, B = np.meshgrid(idx, idx, indexing="ij")
    level = 80.0 * np.exp(-(A ** 2 + B ** 2) / 3.0)
    # an isolated bright town far from the core
    level[(A == 3) & (B == 2)] = 45.0
    return np.round(level + rng.gamma(2.0, 1.0, size=(SIZE, SIZE)), 3)


def _landcover(rng: np.random.Generator) -> np.ndarray:
    seeds = rng.uniform(0, SIZE, size=(70, 2))
    codes = rng.integers(1, N_CLASSES + 1, size=len(seeds))
    rr, cc = np.mgrid[0:SIZE, 0:SIZE]
    d = (rr[..., None] + 0.5 - seeds[:, 0]) ** 2 + (cc[..., None] + 0.5 - seeds[:, 1]) ** 2
    lc = codes[np.argmin(d, axis=-1)]
    noise = rng.random((SIZE, SIZE)) < 0.04
    lc[noise] = rng.integers(1, N_CLASSES + 1, size=int(noise.sum()))
    return lc


def _labels_and_run(rng: np.random.Generator, tree: LabelTree, n_items: int = 40):
    leaves = sorted(tree.level_sets()[3])
    themes = [leaves[k::4] for k in range(4)]
    truth = {}
    for i in range(n_items):
        theme = themes[i % 4]
        k = int(rng.integers(1, 4))
        picks = rng.choice(len(theme), size=min(k, len(theme)), replace=False)
        truth[f"img{i:03d}"] = sorted(tree[theme[p]].name for p in picks)
    ids = sorted(truth)
    scored = {}
    for q in ids:
        qs = set(truth[q])
        scored[q] = [
            (item, round(len(qs & set(truth[item])) + float(rng.normal(0, 0.8)), 6)) for item in ids
        ]
    return truth, scored


def make_world(out_dir, seed: int = 7) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    write_ascii_grid(RasterGrid(_light(rng), 1000.0, 500000.0, 3300000.0, -9999.0), out / "light.asc")
    lc = RasterGrid(_landcover(rng), 1000.0, 500000.0, 3300000.0, -9999, GridKind.CATEGORICAL)
    write_ascii_grid(lc, out / "landcover.asc", write_kind_sidecar=True)

    block = SIZE // BLOCKS
    rr, cc = np.mgrid[0:SIZE, 0:SIZE]
    labels = (rr // block) * BLOCKS + cc // block
    ids = [f"R{a}{b}" for a in range(BLOCKS) for b in range(BLOCKS)]
    regions = regions_from_label_raster(labels, ids, provenance="synthetic 4x4 block regions")
    (out / "regions.json").write_text(json.dumps(regions.to_json(), indent=1) + "\n")

    tree = LabelTree.default()
    tree.save(out / "taxonomy.json")
    truth, scored = _labels_and_run(rng, tree)
    (out / "truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
    write_run(out / "run.txt", scored)

    config = {
        "light_raster": "light.asc",
        "landcover_raster": "landcover.asc",
        "regions": "regions.json",
        "taxonomy": "taxonomy.json",
        "truth": "truth.json",
        "run": "run.txt",
        "weights_rule": "edge_or_corner",
        "method": "permutation",
        "permutations": 999,
        "alpha": 0.05,
        "seed": 2024,
        "total_samples": 48,
        "unit_rows": 4,
        "unit_cols": 4,
        "clamp": False,
        "level": 3,
        "cutoffs": [5, 10, 20, 50, 100],
    }
    (out / "config.json").write_text(json.dumps(config, indent=1) + "\n")
    return out


def bundled_world(dest) -> Path:
    """Copy the shipped synthetic world into ``dest`` and return the config path."""
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    src = resources.files("geocurate").joinpath("data/world")
    for entry in src.iterdir():
        if entry.is_file():
            with resources.as_file(entry) as p:
                shutil.copy(p, dest / entry.name)
    return dest / "config.json"
