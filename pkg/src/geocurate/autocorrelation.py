"""Global/local Moran's I, Getis-Ord Gi* and sampling-region selection.

Significance is either analytical (normal approximation) or Monte-Carlo
permutation. Permutation randomness is drawn from seed-indexed substreams
(one per batch for the global test, one per region for local tests), so
results do not depend on ``workers``.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .weights import WeightMatrix

__all__ = [
    "Significance",
    "ClusterLabel",
    "Hotspot",
    "MoranResult",
    "LisaResult",
    "GiStarResult",
    "global_morans_i",
    "local_morans_i",
    "getis_ord_gi_star",
    "classify_clusters",
    "classify_cluster",
    "select_sampling_regions",
    "DegenerateInputError",
]

_GLOBAL_BATCH = 128
# relative slack when counting permuted statistics "as extreme" as observed
_TIE_RTOL = 1e-10


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class Significance:
    method: str = "permutation"
    permutations: int = 999
    seed: int | None = None
    alpha: float = 0.05
    workers: int = 1

    def __post_init__(self):
        if self.method not in ("permutation", "analytical"):
            raise ValueError(f"unknown significance method {self.method!r}")
        if self.method == "permutation" and self.permutations < 1:
            raise ValueError("permutations must be positive")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


class ClusterLabel(str, Enum):
    HIGH_HIGH = "HighHigh"
    LOW_LOW = "LowLow"
    LOW_HIGH = "LowHigh"
    HIGH_LOW = "HighLow"
    NOT_SIGNIFICANT = "NotSignificant"


class Hotspot(str, Enum):
    HOT = "hot"
    COLD = "cold"
    NONE = "none"


@dataclass(frozen=True)
class MoranResult:
    I: float
    z_score: float
    p_value: float
    method: str
    n_permutations: int
    expected_I: float

    def pattern(self, alpha: float = 0.05) -> str:
        """'random' when randomness is not rejected, else 'clustered' or 'dispersed' by z sign."""
        if self.p_value > alpha:
            return "random"
        return "clustered" if self.z_score > 0 else "dispersed"

    def rejects_randomness(self, alpha: float = 0.05) -> bool:
        return self.pattern(alpha) != "random"


@dataclass(frozen=True)
class LisaResult:
    region_id: str
    z_i: float
    lisa: float
    I_local: float
    z_score: float
    p_value: float
    cluster: ClusterLabel


@dataclass(frozen=True)
class GiStarResult:
    region_id: str
    g_star: float
    p_value: float
    hotspot: Hotspot


def _spawn(seed, count: int) -> list[np.random.Generator]:
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in ss.spawn(count)]


def _run(fn, items, workers: int):
    if workers == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _centered(x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("values must be one-dimensional")
    if not np.all(np.isfinite(x)):
        raise ValueError("values contain non-finite entries")
    if np.ptp(x) == 0:
        raise DegenerateInputError("zero variance")
    return x, x - x.mean()


def _check_size(x: np.ndarray, W: WeightMatrix) -> None:
    if W.n != len(x):
        raise ValueError(f"{len(x)} values but weights cover {W.n} regions")


def _perm_p(observed: float, perms: np.ndarray, two_sided: bool) -> float:
    if two_sided:
        extreme = np.abs(perms) >= abs(observed) * (1 - _TIE_RTOL)
    elif observed >= 0:
        extreme = perms >= observed - abs(observed) * _TIE_RTOL
    else:
        extreme = perms <= observed + abs(observed) * _TIE_RTOL
    return (1 + int(np.count_nonzero(extreme))) / (1 + len(perms))


def _perm_z(observed: float, perms: np.ndarray) -> float:
    sd = perms.std()
    return float((observed - perms.mean()) / sd) if sd > 0 else 0.0


def _normal_p(z: float) -> float:
    return float(2 * norm.sf(abs(z)))


# ---------------------------------------------------------------------------
# Global Moran's I


def _moran_stat(z: np.ndarray, W: WeightMatrix) -> float:
    n = len(z)
    return (n / W.s0) * float(z @ (W.matrix @ z)) / float(z @ z)


def global_morans_i(x, W: WeightMatrix, significance: Significance | None = None) -> MoranResult:
    significance = significance or Significance()
    x, z = _centered(x)
    _check_size(x, W)
    n = len(x)
    if n < 2:
        raise ValueError("need at least two regions")
    s0 = W.s0
    if s0 == 0:
        raise DegenerateInputError("degenerate weights: no region has a neighbour")
    I = _moran_stat(z, W)
    if abs(I) > 1 + 1e-9:
        warnings.warn(f"Moran's I = {I:.4f} lies outside [-1, 1] for this weight structure")
    expected = -1.0 / (n - 1)

    if significance.method == "analytical":
        m = W.matrix
        sym = m + m.T
        s1 = 0.5 * float(sym.multiply(sym).sum())
        rs = np.asarray(m.sum(axis=1)).ravel()
        cs = np.asarray(m.sum(axis=0)).ravel()
        s2 = float(((rs + cs) ** 2).sum())
        var = (n * n * s1 - n * s2 + 3 * s0 * s0) / ((n * n - 1) * s0 * s0) - expected ** 2
        zs = (I - expected) / math.sqrt(var) if var > 0 else 0.0
        return MoranResult(I, zs, _normal_p(zs), "analytical", 0, expected)

    m_perm = significance.permutations
    n_batches = -(-m_perm // _GLOBAL_BATCH)
    rngs = _spawn(significance.seed, n_batches)
    zz = float(z @ z)
    scale = n / s0
    mat = W.matrix

    def batch(k: int) -> np.ndarray:
        size = min(_GLOBAL_BATCH, m_perm - k * _GLOBAL_BATCH)
        Z = rngs[k].permuted(np.tile(z, (size, 1)), axis=1)
        WZ = (mat @ Z.T).T
        return scale * np.einsum("ij,ij->i", Z, WZ) / zz

    perms = np.concatenate(_run(batch, range(n_batches), significance.workers))
    return MoranResult(
        I, _perm_z(I, perms), _perm_p(I, perms, two_sided=True), "permutation", m_perm, expected
    )


# ---------------------------------------------------------------------------
# conditional permutation helpers


def _draw_without_replacement(rng: np.random.Generator, pool: int, k: int, m: int) -> np.ndarray:
    """``m`` rows of ``k`` distinct indices from ``range(pool)``."""
    if k == 0:
        return np.empty((m, 0), dtype=np.int64)
    if 4 * k <= pool:
        draws = rng.integers(0, pool, size=(m, k))
        while True:
            s = np.sort(draws, axis=1)
            bad = np.nonzero((s[:, 1:] == s[:, :-1]).any(axis=1))[0]
            if bad.size == 0:
                return draws
            draws[bad] = rng.integers(0, pool, size=(bad.size, k))
    keys = rng.random((m, pool))
    return np.argpartition(keys, k - 1, axis=1)[:, :k]


def _conditional_sums(values: np.ndarray, W: WeightMatrix, i: int, rng, m: int) -> np.ndarray:
    """Permuted ``sum_j w_ij v_j`` with ``v_i`` held out and neighbours drawn from the rest."""
    nbrs, w = W.neighbors(i)
    idx = _draw_without_replacement(rng, len(values) - 1, len(nbrs), m)
    idx = idx + (idx >= i)
    return values[idx] @ w


# ---------------------------------------------------------------------------
# Local Moran's I


def classify_cluster(z_i: float, lisa: float, p_value: float, alpha: float = 0.05) -> ClusterLabel:
    if p_value > alpha or z_i == 0 or lisa == 0:
        return ClusterLabel.NOT_SIGNIFICANT
    if z_i > 0:
        return ClusterLabel.HIGH_HIGH if lisa > 0 else ClusterLabel.HIGH_LOW
    return ClusterLabel.LOW_HIGH if lisa > 0 else ClusterLabel.LOW_LOW


def classify_clusters(lisa: Sequence[LisaResult], alpha: float = 0.05) -> list[ClusterLabel]:
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return [classify_cluster(r.z_i, r.lisa, r.p_value, alpha) for r in lisa]


def local_morans_i(x, W: WeightMatrix, significance: Significance | None = None,
                   region_ids: Sequence[str] | None = None) -> list[LisaResult]:
    """Local Moran's I, ``I_i = z_i / S_i^2 * sum_{j != i} w_ij z_j``.

    ``S_i^2`` leaves region i out of the variance sum and divides by n - 1.
    Permutation inference is conditional: x_i stays put and its neighbour
    values are drawn from the other n - 1 regions.
    """
    significance = significance or Significance()
    x, z = _centered(x)
    _check_size(x, W)
    n = len(x)
    if n < 3:
        raise ValueError("local Moran's I needs at least three regions")
    ids = list(region_ids) if region_ids is not None else [str(i) for i in range(n)]

    lisa = W.matrix @ z
    total_ss = float(z @ z)
    s2 = (total_ss - z ** 2) / (n - 1)
    local = z / s2 * lisa

    if significance.method == "analytical":
        row_sum = W.row_sums()
        row_sq = np.asarray(W.matrix.multiply(W.matrix).sum(axis=1)).ravel()
        N = n - 1
        mu = -z / N
        sigma2 = (total_ss - z ** 2) / N - mu ** 2
        mean = row_sum * mu
        var = sigma2 * (N * row_sq - row_sum ** 2) / (N - 1)
        zs = np.where(var > 0, (lisa - mean) / np.sqrt(np.where(var > 0, var, 1)), 0.0)
        zs = np.sign(z) * zs
        ps = [_normal_p(v) for v in zs]
    else:
        m = significance.permutations
        rngs = _spawn(significance.seed, n)

        def one(i: int) -> tuple[float, float]:
            sums = _conditional_sums(z, W, i, rngs[i], m)
            perms = z[i] / s2[i] * sums
            if z[i] == 0:
                return 0.0, 1.0
            return _perm_z(local[i], perms), _perm_p(lisa[i], sums, two_sided=True)

        out = _run(one, range(n), significance.workers)
        zs = [o[0] for o in out]
        ps = [o[1] for o in out]

    return [
        LisaResult(
            ids[i], float(z[i]), float(lisa[i]), float(local[i]), float(zs[i]), float(ps[i]),
            classify_cluster(z[i], lisa[i], ps[i], significance.alpha),
        )
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# Getis-Ord Gi*


def getis_ord_gi_star(x, W: WeightMatrix, significance: Significance | None = None,
                      region_ids: Sequence[str] | None = None) -> list[GiStarResult]:
    """Gi* with the focal region included at weight 1.

    Permutation p-values are one-sided in the direction of the observed sign.
    """
    significance = significance or Significance()
    x, z = _centered(x)
    _check_size(x, W)
    n = len(x)
    if n < 2:
        raise ValueError("need at least two regions")
    ids = list(region_ids) if region_ids is not None else [str(i) for i in range(n)]

    xbar = x.mean()
    S = math.sqrt(float(np.mean(z ** 2)))
    if S == 0:
        raise DegenerateInputError("zero variance")
    wsum = W.row_sums() + 1.0
    wsq = np.asarray(W.matrix.multiply(W.matrix).sum(axis=1)).ravel() + 1.0
    radicand = (n * wsq - wsum ** 2) / (n - 1)
    bad = np.nonzero(radicand <= 0)[0]
    if bad.size:
        raise DegenerateInputError(
            f"degenerate weights: Gi* denominator vanishes for region {ids[bad[0]]!r}"
        )
    denom = S * np.sqrt(radicand)
    local_sum = W.matrix @ x + x
    g = (local_sum - xbar * wsum) / denom

    if significance.method == "analytical":
        ps = [_normal_p(v) for v in g]
    else:
        m = significance.permutations
        rngs = _spawn(significance.seed, n)

        def one(i: int) -> float:
            sums = _conditional_sums(x, W, i, rngs[i], m) + x[i]
            perms = (sums - xbar * wsum[i]) / denom[i]
            return _perm_p(g[i], perms, two_sided=False)

        ps = _run(one, range(n), significance.workers)

    results = []
    for i in range(n):
        p = float(ps[i])
        if p <= significance.alpha and g[i] > 0:
            spot = Hotspot.HOT
        elif p <= significance.alpha and g[i] < 0:
            spot = Hotspot.COLD
        else:
            spot = Hotspot.NONE
        results.append(GiStarResult(ids[i], float(g[i]), p, spot))
    return results


# ---------------------------------------------------------------------------
# region selection

_M_PLUS = {ClusterLabel.HIGH_HIGH, ClusterLabel.LOW_LOW}
_M_MINUS = {ClusterLabel.HIGH_LOW, ClusterLabel.LOW_HIGH}
_G = {Hotspot.HOT, Hotspot.COLD}


def _as_label_map(items, attr: str, enum) -> dict[str, Enum]:
    if isinstance(items, Mapping):
        return {str(k): enum(v) for k, v in items.items()}
    out = {}
    for it in items:
        if it.region_id in out:
            raise ValueError(f"duplicate region id {it.region_id!r}")
        out[it.region_id] = enum(getattr(it, attr))
    return out


def select_sampling_regions(clusters, gi) -> set[str]:
    """Regions in (HH/LL and hot/cold) together with every HL/LH outlier.

    ``clusters`` is a sequence of ``LisaResult`` or a mapping id -> ClusterLabel;
    ``gi`` a sequence of ``GiStarResult`` or a mapping id -> Hotspot.
    """
    labels = _as_label_map(clusters, "cluster", ClusterLabel)
    spots = _as_label_map(gi, "hotspot", Hotspot)
    if labels.keys() != spots.keys():
        missing = sorted(labels.keys() ^ spots.keys())[:10]
        raise ValueError(f"mismatched region universes: {missing}")
    return {
        rid for rid, lab in labels.items()
        if (lab in _M_PLUS and spots[rid] in _G) or lab in _M_MINUS
    }
