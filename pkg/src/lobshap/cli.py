"""Command-line entry point: ``lobshap {synth,ingest,features,run,sim,report}``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric or undefined-metric error.
"""

from __future__ import annotations

import argparse
import gzip
import json
import sys
from dataclasses import asdict, replace
from decimal import Decimal, InvalidOperation
from pathlib import Path

import pandas as pd

from .config import ConfigError, RunConfig
from .errors import DataError, NumericError
from .features import FeatureConfig, build_frame
from .marketdata import REGIMES, IngestSchema, RegimeConfig, gen_synthetic, ingest, serialize
from .microsim import (
    SimConfig, TwinConfig, microprice_anticipation, simulate, tick_ladder, twin_simulation,
    write_ladder_json,
)
from .perfmetrics import SECONDS_PER_YEAR
from .pipeline import (
    file_sha256, refresh_manifest, reports_from_equity, run_pipeline, write_json, write_summary_reports,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _kv(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _decimal(text: str) -> Decimal:
    try:
        d = Decimal(text)
    except InvalidOperation:
        raise argparse.ArgumentTypeError(f"not a decimal: {text!r}") from None
    if not d > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return d


def _schema_args(p):
    p.add_argument("--book", required=True, type=Path, help="book CSV (optionally .gz)")
    p.add_argument("--trades", required=True, type=Path, help="trades CSV (optionally .gz)")
    p.add_argument("--tick", type=_decimal, default=Decimal("0.01"))
    p.add_argument("--lot", type=_decimal, default=Decimal("0.0001"))
    p.add_argument("--depth-levels", type=int, default=5)
    p.add_argument("--max-ffill-ms", type=int, default=5000)


def _schema(a) -> IngestSchema:
    return IngestSchema(tick=a.tick, lot=a.lot, depth_levels=a.depth_levels,
                        max_ffill_ms=a.max_ffill_ms)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lobshap", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate synthetic book and trade CSVs")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-seconds", type=int, required=True)
    p.add_argument("--regime", default="signal", choices=sorted(REGIMES))
    p.add_argument("--set", dest="overrides", type=_kv, action="append", default=[],
                   metavar="KEY=VALUE", help="override one regime parameter")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--gzip", action="store_true")

    p = sub.add_parser("ingest", help="align raw CSVs onto the 1 s grid")
    _schema_args(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("features", help="compute the feature frame")
    _schema_args(p)
    p.add_argument("--trade-window", type=int, default=1)
    p.add_argument("--vol-window", type=int, default=60)
    p.add_argument("--horizon", type=int, default=3)
    p.add_argument("--out", type=Path, required=True, help="output CSV")

    p = sub.add_parser("run", help="run the full pipeline from a YAML config")
    p.add_argument("config", type=Path)
    p.add_argument("--output-dir")
    p.add_argument("--workers", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("sim", help="replenishing-depth microprice simulation")
    p.add_argument("--tick", type=float, default=0.01)
    p.add_argument("--gain", type=float, default=0.3)
    p.add_argument("--steps", type=int, default=20_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--depth-mean", type=float, default=10.0)
    p.add_argument("--replenish-rate", type=float, default=0.1)
    p.add_argument("--move-prob", type=float, default=0.35)
    p.add_argument("--jump-vol", type=float, default=0.02)
    p.add_argument("--ladder", action="store_true", help="run the tick ladder")
    p.add_argument("--multipliers", default="1,2,5,10")
    p.add_argument("--seeds", type=int, default=20, help="ladder seeds per tick")
    p.add_argument("--twin", action="store_true", help="also run the spot/futures twin")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("report", help="recompute report tables from a run directory")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--periods-per-year", type=float)
    return ap


def cmd_synth(a) -> int:
    try:
        regime = RegimeConfig.from_overrides(REGIMES[a.regime], dict(a.overrides))
    except (KeyError, ValueError) as e:
        raise UsageError(e.args[0] if e.args else str(e)) from e
    if a.n_seconds < 10:
        raise UsageError("--n-seconds must be >= 10")
    bp, tp = gen_synthetic(a.seed, a.n_seconds, regime, a.out, compress=a.gzip)
    rows = {}
    for p in (bp, tp):
        opener = gzip.open if p.suffix == ".gz" else open
        with opener(p, "rt") as fh:
            rows[p.name] = sum(1 for _ in fh) - 1
    prov = {"seed": a.seed, "n_seconds": a.n_seconds, "regime": a.regime,
            "regime_config": asdict(regime),
            "files": {p.name: {"rows": rows[p.name], "sha256": file_sha256(p)} for p in (bp, tp)}}
    write_json(a.out / "provenance.json", prov)
    print(f"book rows: {rows[bp.name]}  trade rows: {rows[tp.name]}  -> {a.out}")
    return EXIT_OK


def cmd_ingest(a) -> int:
    series = ingest(a.book, a.trades, _schema(a))
    a.out.mkdir(parents=True, exist_ok=True)
    serialize(series, a.out, stem="aligned")
    (a.out / "ingest_report.json").write_text(series.report.to_json() + "\n")
    print(series.report.to_json())
    return EXIT_OK


def cmd_features(a) -> int:
    series = ingest(a.book, a.trades, _schema(a))
    cfg = FeatureConfig(a.trade_window, a.vol_window, a.horizon)
    frame = build_frame(series, cfg)
    a.out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(a.out)
    print(f"{len(frame)} grid points, {int(frame.valid.sum())} valid -> {a.out}")
    return EXIT_OK


def cmd_run(a) -> int:
    if not a.config.exists():
        raise UsageError(f"config not found: {a.config}")
    cfg = RunConfig.load(a.config)
    if a.output_dir is not None:
        cfg.output_dir = a.output_dir
    if a.workers is not None:
        cfg.workers = a.workers
    if a.budget is not None:
        cfg.budget = a.budget
    if a.seed is not None:
        cfg.seed = a.seed
    if cfg.workers < 1 or cfg.budget < 1:
        raise UsageError("--workers and --budget must be >= 1")
    for asset in cfg.assets:
        for p in (asset.book_path, asset.trades_path):
            if not cfg.resolve(p).exists():
                raise DataError(f"asset '{asset.name}': file not found: {cfg.resolve(p)}")
    m = run_pipeline(cfg)
    print(f"run complete: {len(m['files'])} files, manifest hash {m['manifest_hash'][:16]}")
    return EXIT_OK


def cmd_sim(a) -> int:
    try:
        base = SimConfig(tick=a.tick, imbalance_gain=a.gain, steps=a.steps, seed=a.seed,
                         depth_mean=a.depth_mean, replenish_rate=a.replenish_rate,
                         move_prob=a.move_prob, jump_vol=a.jump_vol)
        mults = [float(m) for m in a.multipliers.split(",") if m.strip()]
    except ValueError as e:
        raise UsageError(str(e)) from e
    if a.steps < 100:
        raise UsageError("--steps must be >= 100")
    a.out.mkdir(parents=True, exist_ok=True)
    path = simulate(base)
    path.write_csv(a.out / "path.csv")
    summary = {"config": asdict(base), "anticipation": microprice_anticipation(path)}
    if a.ladder:
        if not mults or a.seeds < 1:
            raise UsageError("ladder needs at least one multiplier and one seed")
        lad = tick_ladder(base, mults, range(a.seeds))
        write_ladder_json(lad, a.out / "ladder.json")
        summary["ladder_spearman"] = lad["spearman_tick_vs_shap"]
    if a.twin:
        tw = twin_simulation(replace(TwinConfig(), seed=a.seed))
        summary["twin_corr"] = tw["corr"]
    write_json(a.out / "summary.json", summary)
    print(json.dumps({k: v for k, v in summary.items() if k != "config"}, sort_keys=True))
    return EXIT_OK


def cmd_report(a) -> int:
    root = a.run_dir
    bt = root / "backtests"
    if not bt.is_dir():
        raise UsageError(f"no backtests/ directory under {root}")
    ppy = a.periods_per_year
    if ppy is None:
        # reuse the run's annualisation when a per-asset report records it
        prior = sorted((root / "reports").glob("*_bh.json"))
        ppy = json.loads(prior[0].read_text())["periods_per_year"] if prior else SECONDS_PER_YEAR
    per_asset = {}
    for d in sorted(p for p in bt.iterdir() if p.is_dir()):
        try:
            per_asset[d.name] = reports_from_equity(d, ppy)
        except (OSError, KeyError, pd.errors.ParserError) as e:
            raise DataError(f"{d.name}: {e}") from e
        except (ValueError, ArithmeticError) as e:
            raise NumericError(f"{d.name}: {e}") from e
    if not per_asset:
        raise DataError(f"no asset backtests under {bt}")
    write_summary_reports(root, per_asset)
    refresh_manifest(root)
    print((root / "reports" / "metrics.csv").read_text(), end="")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "features": cmd_features,
            "run": cmd_run, "sim": cmd_sim, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    try:
        return COMMANDS[args.cmd](args)
    except (UsageError, ConfigError) as e:
        print(f"lobshap {args.cmd}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"lobshap {args.cmd}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"lobshap {args.cmd}: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
