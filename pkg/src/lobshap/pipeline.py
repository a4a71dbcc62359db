"""End-to-end run: ingest, features, walk-forward CV, SHAP, backtests, reports."""

from __future__ import annotations

import hashlib
import json
import math
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .config import RunConfig
from .errors import DataError, LobshapError, NumericError
from .execution import run_blend, run_buy_hold, run_maker, run_taker
from .features import build_frame
from .marketdata import ingest
from .perfmetrics import compute_report, metrics_table, ttest_table
from .shapley import (
    ShapMatrix, dependence_export, explain, global_importance, high_quantile_abs,
    rank_correlation, summary_json, tick_size_association,
)
from .validation import make_plan, run_outer

STRATEGIES = ("taker", "maker", "joined")
SUBDIRS = ("features", "models", "oof", "shap", "backtests", "reports")


class StageFailure(LobshapError):
    def __init__(self, stage, asset, cause):
        super().__init__(f"stage '{stage}' failed for asset '{asset}': {cause}")
        self.stage, self.asset, self.cause = stage, asset, cause


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def _nan_to_none(x):
    if isinstance(x, dict):
        return {k: _nan_to_none(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_nan_to_none(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    clean = _nan_to_none(json.loads(json.dumps(obj, default=_json_default)))
    path.write_text(json.dumps(clean, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def write_csv(path: Path, df: pd.DataFrame, index=False) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=index, float_format="%.17g", lineterminator="\n")
    return path


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True,
                             timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class AssetOutcome:
    name: str
    durations: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)  # strategy -> MetricsReport, plus "bh"
    importance: list = field(default_factory=list)
    relative_tick: float = math.nan
    shap_quantile: float = math.nan
    pooled: dict = field(default_factory=dict)


class _Stage:
    def __init__(self, outcome: AssetOutcome, name: str, fallback):
        self.o, self.name, self.fallback = outcome, name, fallback

    def __enter__(self):
        self.t = time.perf_counter()
        return self

    def __exit__(self, et, ev, tb):
        self.o.durations[self.name] = round(time.perf_counter() - self.t, 6)
        if ev is None or isinstance(ev, StageFailure):
            return False
        if isinstance(ev, LobshapError):
            raise type(ev)(f"stage '{self.name}' failed for asset '{self.o.name}': {ev}") from ev
        if isinstance(ev, (OSError, ValueError, ArithmeticError)):
            raise self.fallback(f"stage '{self.name}' failed for asset '{self.o.name}': {ev}") from ev
        return False


def run_asset(cfg: RunConfig, asset_index: int, out: Path) -> AssetOutcome:
    asset = cfg.assets[asset_index]
    name = asset.name
    o = AssetOutcome(name)
    with _Stage(o, "ingest", DataError):
        schema = asset.schema(cfg.max_ffill_ms)
        series = ingest(cfg.resolve(asset.book_path), cfg.resolve(asset.trades_path), schema)
        (out / "features" / name).mkdir(parents=True, exist_ok=True)
        (out / "features" / name / "ingest_report.json").write_text(series.report.to_json() + "\n")

    with _Stage(o, "features", DataError):
        frame = build_frame(series, cfg.features)
        frame.to_csv(out / "features" / name / "features.csv")

    with _Stage(o, "cv", DataError):
        c = cfg.cv
        plan = make_plan(len(frame), c.train_len, c.test_len, c.gap, c.step)
        res = run_outer(frame, plan, cfg.budget, cfg.seed, cfg.space, cfg.gmadl,
                        c.inner_folds, c.selection_metric)
        mdir = out / "models" / name
        mdir.mkdir(parents=True, exist_ok=True)
        for r in res.folds:
            (mdir / f"fold_{r.fold_id}.json").write_text(r.model.to_json() + "\n")
        write_json(mdir / "cv_manifest.json", res.manifest())
        (out / "oof").mkdir(parents=True, exist_ok=True)
        res.write_oof_csv(out / "oof" / f"{name}.csv")
        o.pooled = dict(res.pooled)

    with _Stage(o, "explain", NumericError):
        sdir = out / "shap" / name
        sdir.mkdir(parents=True, exist_ok=True)
        parts, xs = [], []
        for r in res.folds:
            t0, t1 = r.fold.train
            bg = frame.X[t0:t1][frame.valid[t0:t1]]
            rows = r.test_index[frame.valid[r.test_index]]
            if len(rows) == 0:
                continue
            sm = explain(r.model, frame.X[rows], bg)
            sm.to_csv(sdir / f"fold_{r.fold_id}.csv")
            parts.append(sm)
            xs.append(frame.X[rows])
        if not parts:
            raise NumericError("no valid test rows to explain")
        pooled = ShapMatrix.concat(parts)
        Xp = np.vstack(xs)
        (sdir / "importance.json").write_text(summary_json(pooled) + "\n")
        for f in pooled.feature_names:
            write_csv(sdir / f"dependence_{f}.csv", dependence_export(pooled, Xp, f))
        o.importance = global_importance(pooled)
        if "l1_imbalance" in pooled.feature_names:
            o.shap_quantile = high_quantile_abs(pooled, "l1_imbalance", cfg.shap_quantile)
        o.relative_tick = float(series.tick_f / np.nanmean(series.mids()))

    with _Stage(o, "backtest", NumericError):
        lo, hi = plan.folds[0].test[0], plan.folds[-1].test[1]
        span = series.slice(lo, hi)
        preds = np.full(len(frame), np.nan)
        preds[res.oof_index] = res.oof_pred
        preds = preds[lo:hi]
        policy = cfg.signal_policy()
        bdir = out / "backtests" / name
        bdir.mkdir(parents=True, exist_ok=True)
        taker = run_taker(span, preds, policy)
        maker = run_maker(span, preds, policy)
        blend = run_blend(taker, maker)
        bh = run_buy_hold(span, policy.notional, policy.taker_fee_rate, policy.initial_cash)
        for label_, acct in (("taker", taker), ("maker", maker), ("buy_hold", bh)):
            acct.write_equity_csv(bdir / f"{label_}_equity.csv")
            acct.write_trades_csv(bdir / f"{label_}_trades.csv")
        blend.write_equity_csv(bdir / "joined_equity.csv")

    with _Stage(o, "metrics", NumericError):
        o.reports = reports_from_equity(bdir, cfg.periods_per_year)
        for key, rep in o.reports.items():
            write_json(out / "reports" / f"{name}_{key}.json", rep.to_dict())
    return o


def _read_equity(path: Path) -> np.ndarray:
    return pd.read_csv(path, float_precision="round_trip")["equity_net"].to_numpy(float)


def reports_from_equity(bdir: Path, periods_per_year: float) -> dict:
    """MetricsReport per strategy (t-tested against buy-and-hold) plus ``bh``."""
    bh = _read_equity(bdir / "buy_hold_equity.csv")
    out = {}
    for s in STRATEGIES:
        out[s] = compute_report(_read_equity(bdir / f"{s}_equity.csv"), periods_per_year, bh)
    out["bh"] = compute_report(bh, periods_per_year)
    return out


def write_summary_reports(out: Path, per_asset: dict) -> None:
    """reports/metrics.csv and reports/ttest.csv from {asset: {strategy|bh: MetricsReport}}."""
    # sorted, so `lobshap report` rebuilds the same bytes whatever the config order
    per_asset = dict(sorted(per_asset.items()))
    frames = []
    for s in STRATEGIES:
        cols = {}
        for a, reps in per_asset.items():
            cols[a] = reps[s]
            cols[f"{a}-bh"] = reps["bh"]
        t = metrics_table(cols)
        t.insert(0, "strategy", s)
        frames.append(t.rename_axis("metric").reset_index())
    write_csv(out / "reports" / "metrics.csv", pd.concat(frames, ignore_index=True))
    tt = ttest_table({a: {s: reps[s] for s in STRATEGIES} for a, reps in per_asset.items()})
    write_csv(out / "reports" / "ttest.csv", tt.rename_axis("asset").reset_index())


def _cross_asset_reports(out: Path, outcomes: list, cfg: RunConfig) -> None:
    rankings = {o.name: o.importance for o in outcomes}
    write_json(out / "reports" / "importance.json",
               {a: [{"feature": f, "mean_abs_shap": v} for f, v in r] for a, r in rankings.items()})
    if len(outcomes) >= 2:
        m = rank_correlation(rankings)
        rc = {"assets": list(m.index), "matrix": m.to_numpy().tolist()}
    else:
        rc = {"assets": [o.name for o in outcomes], "matrix": [[1.0]] if outcomes else [],
              "note": "fewer than two assets"}
    write_json(out / "reports" / "rank_correlation.json", rc)
    pts = [(o.relative_tick, o.shap_quantile) for o in outcomes]
    write_json(out / "reports" / "tick_association.json", {
        "quantile": cfg.shap_quantile,
        "assets": [{"asset": o.name, "relative_tick": o.relative_tick,
                    "shap_quantile": o.shap_quantile} for o in outcomes],
        "spearman": tick_size_association(pts),
    })


def _collect_files(out: Path) -> dict:
    files = {}
    for sub in SUBDIRS:
        base = out / sub
        if base.exists():
            for p in sorted(base.rglob("*")):
                if p.is_file():
                    files[p.relative_to(out).as_posix()] = file_sha256(p)
    return files


def manifest_hash(manifest: dict) -> str:
    """Hash of the result-determining manifest content (no timings or version)."""
    core = {"config_hash": manifest["config_hash"], "files": manifest["files"],
            "status": manifest["status"]}
    return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()


def _write_manifest(out: Path, manifest: dict) -> Path:
    manifest["manifest_hash"] = manifest_hash(manifest)
    return write_json(out / "manifest.json", manifest)


def refresh_manifest(out: Path) -> dict:
    """Re-hash the artifact tree after an in-place report rewrite."""
    out = Path(out)
    path = out / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {
        "version": version_string(), "config_hash": None, "status": "complete", "stale": False}
    manifest["files"] = _collect_files(out)
    _write_manifest(out, manifest)
    return manifest


def run_pipeline(cfg: RunConfig, out: Path = None) -> dict:
    out = Path(out) if out is not None else cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"version": version_string(), "config_hash": cfg.digest(), "status": "running",
                "stale": True, "durations": {}, "files": {}}
    _write_manifest(out, manifest)
    t_all = time.perf_counter()
    try:
        n = len(cfg.assets)
        if cfg.workers > 1 and n > 1:
            with ProcessPoolExecutor(max_workers=min(cfg.workers, n)) as pool:
                outcomes = list(pool.map(run_asset, [cfg] * n, range(n), [out] * n))
        else:
            outcomes = [run_asset(cfg, i, out) for i in range(n)]
        t = time.perf_counter()
        write_summary_reports(out, {o.name: o.reports for o in outcomes})
        _cross_asset_reports(out, outcomes, cfg)
        report_time = round(time.perf_counter() - t, 6)
    except LobshapError as e:
        manifest.update(status="failed", error=str(e), files=_collect_files(out),
                        durations={"total": round(time.perf_counter() - t_all, 6)})
        _write_manifest(out, manifest)
        raise
    manifest.update(
        status="complete", stale=False, files=_collect_files(out),
        durations={**{o.name: o.durations for o in outcomes}, "reports": report_time,
                   "total": round(time.perf_counter() - t_all, 6)},
        pooled={o.name: o.pooled for o in outcomes},
    )
    _write_manifest(out, manifest)
    return manifest
