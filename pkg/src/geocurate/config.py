"""Flat JSON pipeline configuration with CLI overrides."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__
from .retrieval_eval import DEFAULT_CUTOFFS

__all__ = ["PipelineConfig", "ConfigError", "PATH_KEYS", "provenance"]

PATH_KEYS = ("light_raster", "landcover_raster", "regions", "taxonomy", "truth", "run")


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    light_raster: str | None = None
    landcover_raster: str | None = None
    regions: str | None = None
    taxonomy: str | None = None
    truth: str | None = None
    run: str | None = None
    # weights
    weights_scheme: str = "contiguity"
    weights_rule: str = "edge_or_corner"
    gamma: float | None = None
    cutoff: float | None = None
    standardize: bool = False
    # significance
    method: str = "permutation"
    permutations: int = 999
    alpha: float = 0.05
    seed: int = 0
    workers: int = 1
    aggregator: str = "mean"
    # sampling
    total_samples: int = 100
    unit_rows: int = 4
    unit_cols: int = 4
    clamp: bool = False
    # evaluation
    level: int = 3
    cutoffs: list[int] = field(default_factory=lambda: list(DEFAULT_CUTOFFS))
    direction: str = "image_to_text"

    @classmethod
    def load(cls, path: str | None = None, overrides: dict | None = None) -> "PipelineConfig":
        data: dict = {}
        base = Path.cwd()
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise FileNotFoundError(f"file not found: {p}")
            try:
                data = json.loads(p.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from None
            if not isinstance(data, dict):
                raise ConfigError("config must be a flat JSON object")
            base = p.resolve().parent
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        for key in PATH_KEYS:
            if data.get(key) is not None:
                data[key] = str((base / data[key]).resolve())
        for key, value in (overrides or {}).items():
            if value is not None:
                data[key] = value
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for key in PATH_KEYS:
            value = getattr(self, key)
            if value is not None and not Path(value).exists():
                raise FileNotFoundError(f"file not found: {value}")
        if self.weights_scheme not in ("contiguity", "inverse_distance"):
            raise ConfigError(f"weights_scheme must be contiguity or inverse_distance, got {self.weights_scheme!r}")
        if self.weights_rule not in ("edge", "edge_or_corner"):
            raise ConfigError(f"weights_rule must be edge or edge_or_corner, got {self.weights_rule!r}")
        if self.gamma is not None and not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if self.cutoff is not None and not self.cutoff > 0:
            raise ConfigError("cutoff must be positive")
        if self.method not in ("permutation", "analytical"):
            raise ConfigError(f"method must be permutation or analytical, got {self.method!r}")
        if self.permutations < 1:
            raise ConfigError("permutations must be positive")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.total_samples < 0:
            raise ConfigError("total_samples must be non-negative")
        if self.unit_rows < 1 or self.unit_cols < 1:
            raise ConfigError("unit_rows and unit_cols must be at least 1")
        if self.level not in (2, 3):
            raise ConfigError("level must be 2 or 3")
        if not self.cutoffs or any(int(n) < 1 for n in self.cutoffs):
            raise ConfigError("cutoffs must be positive integers")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    def require(self, *keys: str) -> None:
        missing = [k for k in keys if getattr(self, k) is None]
        if missing:
            raise ConfigError(f"missing required config: {', '.join(missing)}")

    def to_json(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of every setting that can change results; ``workers`` cannot."""
        doc = {k: v for k, v in self.to_json().items() if k != "workers"}
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def provenance(cfg: PipelineConfig) -> dict:
    return {"toolkit_version": __version__, "config_hash": cfg.digest(), "seed": cfg.seed}
