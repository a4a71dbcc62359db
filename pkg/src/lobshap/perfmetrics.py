"""Return, risk and drawdown statistics for equity curves, plus Welch t-tests.

Undefined values (non-positive terminal equity, zero denominators, too few
points) are returned as NaN and serialised as JSON null.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
import pandas as pd
from scipy import stats

SECONDS_PER_YEAR = 365 * 86400

METRIC_ROWS = ("ARC", "ASD", "IR*", "MDD", "MLD", "IR**")


def _equity(equity) -> np.ndarray:
    e = np.asarray([float(v) for v in equity], dtype=float)
    if e.ndim != 1 or e.size == 0:
        raise ValueError("equity must be a nonempty 1-D series")
    return e


def simple_returns(equity) -> np.ndarray:
    e = _equity(equity)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.diff(e) / e[:-1]


def arc(equity, periods_per_year: float = SECONDS_PER_YEAR) -> float:
    """Annualised compounded return over ``len(equity) - 1`` periods."""
    e = _equity(equity)
    if len(e) < 2:
        raise ValueError("arc needs at least two points")
    if not e[0] > 0:
        raise ValueError("initial equity must be positive")
    if not e[-1] > 0:
        return math.nan
    years = (len(e) - 1) / periods_per_year
    with np.errstate(over="ignore"):
        growth = float(np.exp(math.log(e[-1] / e[0]) / years))
    return growth - 1.0


def asd(returns, periods_per_year: float = SECONDS_PER_YEAR) -> float:
    r = np.asarray(returns, dtype=float)
    if r.size < 2:
        return math.nan
    return float(np.std(r, ddof=1) * math.sqrt(periods_per_year))


def ir_star(arc_value: float, asd_value: float) -> float:
    if not asd_value > 0 or math.isnan(arc_value):
        return math.nan
    return arc_value / asd_value


def mdd(equity) -> float:
    """Largest peak-to-trough loss as a fraction of the running peak."""
    e = _equity(equity)
    peak = np.maximum.accumulate(e)
    if np.any(peak <= 0):
        return math.nan
    return float(np.max((peak - e) / peak))


def mld_periods(equity) -> int:
    """Longest stretch from the last time at a running peak to the first strict new high.

    Only stretches that actually dip below the peak count; an unrecovered
    drawdown runs to the last point.
    """
    e = _equity(equity)
    best = 0
    peak = e[0]
    peak_at = 0
    under = False
    for i in range(1, len(e)):
        v = e[i]
        if v > peak:
            if under:
                best = max(best, i - peak_at)
            peak, peak_at, under = v, i, False
        elif v == peak and not under:
            peak_at = i
        elif v < peak:
            under = True
    if under:
        best = max(best, len(e) - 1 - peak_at)
    return best


def mld_years(equity, periods_per_year: float = SECONDS_PER_YEAR) -> float:
    return mld_periods(equity) / periods_per_year


def ir_double_star(arc_value: float, asd_value: float, mdd_value: float) -> float:
    if not (asd_value > 0 and mdd_value > 0) or math.isnan(arc_value):
        return math.nan
    return arc_value * abs(arc_value) / (asd_value * mdd_value)


def ttest_vs_benchmark(strategy_returns, benchmark_returns) -> tuple:
    """Welch t statistic and one-sided p-value for mean(strategy) > mean(benchmark)."""
    a = np.asarray(strategy_returns, dtype=float)
    b = np.asarray(benchmark_returns, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("both samples need at least two returns")
    if np.var(a) == 0 and np.var(b) == 0:
        return math.nan, math.nan
    res = stats.ttest_ind(a, b, equal_var=False, alternative="greater")
    return float(res.statistic), float(res.pvalue)


@dataclass
class MetricsReport:
    arc: float
    asd: float
    ir_star: float
    mdd: float
    mld_years: float
    ir_double_star: float
    n_obs: int
    periods_per_year: float
    t_stat: float = math.nan
    p_value: float = math.nan

    def row(self) -> dict:
        return {"ARC": self.arc, "ASD": self.asd, "IR*": self.ir_star, "MDD": self.mdd,
                "MLD": self.mld_years, "IR**": self.ir_double_star}

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v)
                for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def compute_report(equity, periods_per_year: float = SECONDS_PER_YEAR,
                   benchmark_equity=None) -> MetricsReport:
    e = _equity(equity)
    r = simple_returns(e)
    a = arc(e, periods_per_year)
    s = asd(r, periods_per_year)
    d = mdd(e)
    t, p = math.nan, math.nan
    if benchmark_equity is not None:
        rb = simple_returns(benchmark_equity)
        if np.all(np.isfinite(r)) and np.all(np.isfinite(rb)):
            t, p = ttest_vs_benchmark(r, rb)
    return MetricsReport(a, s, ir_star(a, s), d, mld_years(e, periods_per_year),
                         ir_double_star(a, s, d), len(e) - 1, periods_per_year, t, p)


def metrics_table(reports: Mapping[str, MetricsReport]) -> pd.DataFrame:
    """Metric rows by column (e.g. ``btc`` and ``btc-bh``), in insertion order."""
    return pd.DataFrame({col: rep.row() for col, rep in reports.items()},
                        index=list(METRIC_ROWS))


def ttest_table(rows: Mapping[str, Mapping[str, MetricsReport]]) -> pd.DataFrame:
    """One row per asset, t and p columns per strategy."""
    out = {}
    for asset, by_strategy in rows.items():
        rec = {}
        for strat, rep in by_strategy.items():
            rec[f"{strat}_t"] = rep.t_stat
            rec[f"{strat}_p"] = rep.p_value
        out[asset] = rec
    return pd.DataFrame.from_dict(out, orient="index")
