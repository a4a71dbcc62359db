"""YAML run configuration for the end-to-end pipeline (schema in docs/formats.md)."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from decimal import Decimal
from pathlib import Path

import yaml

from .execution import SignalPolicy
from .features import FeatureConfig
from .gbdt import GmadlParams
from .marketdata import IngestSchema
from .perfmetrics import SECONDS_PER_YEAR
from .validation import SearchSpace

OUTPUT_ROOT_ENV = "LOBSHAP_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


def _take(section: dict, name: str, allowed: set) -> dict:
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigError(f"'{name}' must be a mapping")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    return dict(section)


@dataclass(frozen=True)
class AssetConfig:
    name: str
    book_path: str
    trades_path: str
    tick: str = "0.01"
    lot: str = "0.0001"
    depth_levels: int = 5

    def schema(self, max_ffill_ms: int) -> IngestSchema:
        return IngestSchema(tick=Decimal(self.tick), lot=Decimal(self.lot),
                            depth_levels=self.depth_levels, max_ffill_ms=max_ffill_ms)


@dataclass(frozen=True)
class CVConfig:
    train_len: int = 7200
    test_len: int = 2000
    gap: int = 60
    step: int = 2000
    inner_folds: int = 3
    selection_metric: str = "gmadl"


@dataclass
class RunConfig:
    assets: list
    output_dir: str = "lobshap-out"
    seed: int = 0
    workers: int = 1
    budget: int = 30
    max_ffill_ms: int = 5000
    periods_per_year: float = SECONDS_PER_YEAR
    shap_quantile: float = 0.95
    features: FeatureConfig = field(default_factory=FeatureConfig)
    cv: CVConfig = field(default_factory=CVConfig)
    space: SearchSpace = field(default_factory=SearchSpace)
    gmadl: GmadlParams = field(default_factory=GmadlParams)
    policy: dict = field(default_factory=dict)
    base_dir: str = "."

    TOP_KEYS = {"assets", "output_dir", "seed", "workers", "budget", "max_ffill_ms",
                "periods_per_year", "shap_quantile", "features", "cv", "search_space",
                "gmadl", "policy"}

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        d = _take(d, "config", cls.TOP_KEYS)
        if "seed" not in d:
            raise ConfigError("'seed' is required")
        raw_assets = d.get("assets")
        if not raw_assets or not isinstance(raw_assets, list):
            raise ConfigError("'assets' must be a nonempty list")
        akeys = {f.name for f in fields(AssetConfig)}
        assets = []
        for i, a in enumerate(raw_assets):
            a = _take(a, f"assets[{i}]", akeys)
            missing = {"name", "book_path", "trades_path"} - set(a)
            if missing:
                raise ConfigError(f"assets[{i}] missing {sorted(missing)}")
            a = {k: (str(v) if k in ("tick", "lot") else v) for k, v in a.items()}
            assets.append(AssetConfig(**a))
        names = [a.name for a in assets]
        if len(set(names)) != len(names):
            raise ConfigError("asset names must be unique")
        try:
            cfg = cls(
                assets=assets,
                output_dir=str(d.get("output_dir", "lobshap-out")),
                seed=int(d["seed"]),
                workers=int(d.get("workers", 1)),
                budget=int(d.get("budget", 30)),
                max_ffill_ms=int(d.get("max_ffill_ms", 5000)),
                periods_per_year=float(d.get("periods_per_year", SECONDS_PER_YEAR)),
                shap_quantile=float(d.get("shap_quantile", 0.95)),
                features=FeatureConfig(**_take(d.get("features"), "features",
                                               {f.name for f in fields(FeatureConfig)})),
                cv=CVConfig(**_take(d.get("cv"), "cv", {f.name for f in fields(CVConfig)})),
                space=SearchSpace.from_dict(d.get("search_space") or {}),
                gmadl=GmadlParams(**_take(d.get("gmadl"), "gmadl", {"a", "b"})),
                policy=_take(d.get("policy"), "policy",
                             {f.name for f in fields(SignalPolicy)}),
                base_dir=str(base_dir),
            )
            cfg.signal_policy()
        except ConfigError:
            raise
        except (TypeError, KeyError, ValueError, ArithmeticError) as e:
            raise ConfigError(str(e)) from e
        if cfg.workers < 1 or cfg.budget < 1:
            raise ConfigError("workers and budget must be >= 1")
        if cfg.cv.selection_metric not in ("gmadl", "r2"):
            raise ConfigError("cv.selection_metric must be 'gmadl' or 'r2'")
        if not 0 < cfg.shap_quantile < 1:
            raise ConfigError("shap_quantile must be in (0, 1)")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from e
        return cls.from_dict(data, base_dir=path.parent)

    def signal_policy(self) -> SignalPolicy:
        return SignalPolicy(**self.policy)

    def resolve(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def output_path(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.output_dir)
        if root and not out.is_absolute():
            return Path(root) / out
        if root:
            return Path(root) / out.name
        return self.resolve(self.output_dir)

    def canonical(self) -> dict:
        """Config content that determines results (paths by name, not location)."""
        d = {
            "assets": [asdict(a) for a in self.assets],
            "seed": self.seed, "budget": self.budget, "max_ffill_ms": self.max_ffill_ms,
            "periods_per_year": self.periods_per_year, "shap_quantile": self.shap_quantile,
            "features": asdict(self.features), "cv": asdict(self.cv),
            "search_space": {k: list(v) for k, v in asdict(self.space).items()},
            "gmadl": asdict(self.gmadl),
            "policy": {k: str(v) for k, v in asdict(self.signal_policy()).items()},
        }
        return d

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()
