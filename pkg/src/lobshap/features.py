"""The ten-feature microstructure library on the aligned grid.

Every window is trailing, so a feature at grid point t only uses book rows and
trades stamped at or before t. Price-based features are relative to the mid.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .marketdata import BUY, AlignedSeries, BookSnapshot, label

FEATURE_NAMES = (
    "l1_imbalance",
    "spread_rel",
    "net_order_flow",
    "vwap_buy_to_mid",
    "vwap_sell_to_mid",
    "volatility",
    "volume_traded",
    "n_trades",
    "trade_price_variance",
    "volume_concentration",
)

# bit flags in FeatureFrame.notes
NOTE_NO_BUYS = 1
NOTE_NO_SELLS = 2


@dataclass(frozen=True)
class FeatureConfig:
    trade_window_s: int = 1
    vol_window: int = 60
    horizon_s: int = 3

    def __post_init__(self):
        if self.trade_window_s < 1:
            raise ValueError("trade_window_s must be >= 1")
        if self.vol_window < 2:
            raise ValueError("vol_window must be >= 2")
        if self.horizon_s < 1:
            raise ValueError("horizon_s must be >= 1")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# scalar definitions


def l1_imbalance(snap: BookSnapshot) -> float:
    b, a = snap.bid_qty[0], snap.ask_qty[0]
    return (b - a) / (b + a)


def spread_rel(snap: BookSnapshot) -> float:
    m = (snap.ask_px[0] + snap.bid_px[0]) / 2
    return (snap.ask_px[0] - snap.bid_px[0]) / m


def volume_concentration(snap: BookSnapshot) -> float:
    total = sum(snap.bid_qty) + sum(snap.ask_qty)
    return (snap.bid_qty[0] + snap.ask_qty[0]) / total


def trade_window_features(trades, mid_now: float) -> dict:
    """Trade-flow features over a list of TradeRecord in the trailing window."""
    if mid_now <= 0:
        raise ValueError("mid_now must be positive")
    out = dict(net_order_flow=0.0, volume_traded=0.0, n_trades=0,
               vwap_buy_to_mid=0.0, vwap_sell_to_mid=0.0, trade_price_variance=0.0)
    if not trades:
        return out
    vol = sum(t.qty for t in trades)
    signed = sum(t.qty * t.side for t in trades)
    out["net_order_flow"] = signed / vol
    out["volume_traded"] = vol
    out["n_trades"] = len(trades)
    for side, key in ((BUY, "vwap_buy_to_mid"), (-BUY, "vwap_sell_to_mid")):
        sub = [t for t in trades if t.side == side]
        if sub:
            vwap = sum(t.price * t.qty for t in sub) / sum(t.qty for t in sub)
            out[key] = (vwap - mid_now) / mid_now
    if len(trades) >= 2:
        out["trade_price_variance"] = float(np.var([t.price for t in trades])) / mid_now ** 2
    return out


def volatility(series: AlignedSeries, t: int, window: int = 60) -> float:
    """Sample sd of the ``window`` one-second mid log returns ending at t (NaN if short)."""
    if window < 2:
        raise ValueError("window must be >= 2")
    if t < window:
        return float("nan")
    m = series.mids()[t - window:t + 1]
    if not np.all(np.isfinite(m)):
        return float("nan")
    return float(np.std(np.diff(np.log(m)), ddof=1))


# ---------------------------------------------------------------------------
# frame


@dataclass(eq=False)
class FeatureFrame:
    grid_ts: np.ndarray
    X: np.ndarray  # [n, 10] in FEATURE_NAMES order, NaN where not computable
    label: np.ndarray
    valid: np.ndarray
    notes: np.ndarray = field(default=None)
    feature_names: tuple = FEATURE_NAMES

    def __len__(self) -> int:
        return len(self.grid_ts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureFrame):
            return NotImplemented
        return (tuple(self.feature_names) == tuple(other.feature_names)
                and np.array_equal(self.grid_ts, other.grid_ts)
                and np.array_equal(self.X, other.X, equal_nan=True)
                and np.array_equal(self.label, other.label, equal_nan=True)
                and np.array_equal(self.valid, other.valid))

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.feature_names.index(name)]

    def slice(self, start: int, stop: int) -> "FeatureFrame":
        notes = None if self.notes is None else self.notes[start:stop]
        return FeatureFrame(self.grid_ts[start:stop], self.X[start:stop],
                            self.label[start:stop], self.valid[start:stop], notes,
                            self.feature_names)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.X, columns=list(self.feature_names))
        df.insert(0, "grid_ts", self.grid_ts)
        df["label"] = self.label
        df["valid"] = self.valid.astype(np.int8)
        return df

    def to_csv(self, path) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        return path

    @classmethod
    def from_csv(cls, path) -> "FeatureFrame":
        df = pd.read_csv(path, float_precision="round_trip")
        names = tuple(c for c in df.columns if c not in ("grid_ts", "label", "valid"))
        return cls(df["grid_ts"].to_numpy(np.int64), df[list(names)].to_numpy(float),
                   df["label"].to_numpy(float), df["valid"].to_numpy(bool), None, names)

    def save_npz(self, path) -> Path:
        path = Path(path)
        np.savez_compressed(path, grid_ts=self.grid_ts, X=self.X, label=self.label,
                            valid=self.valid, notes=self.notes,
                            names=np.array(self.feature_names))
        return path

    @classmethod
    def load_npz(cls, path) -> "FeatureFrame":
        with np.load(path, allow_pickle=False) as z:
            return cls(z["grid_ts"], z["X"], z["label"], z["valid"], z["notes"],
                       tuple(str(s) for s in z["names"]))


def _window_sum(per_bucket: np.ndarray, w: int) -> np.ndarray:
    out = per_bucket.astype(float).copy()
    for k in range(1, w):
        out[k:] += per_bucket[:-k]
    return out


def build_frame(series: AlignedSeries, config: FeatureConfig = FeatureConfig()) -> FeatureFrame:
    n = len(series)
    tick, lot = series.tick_f, series.lot_f
    mids = series.mids()
    bq0 = series.bid_qty[:, 0].astype(float)
    aq0 = series.ask_qty[:, 0].astype(float)
    bid0 = series.bid_px[:, 0].astype(float) * tick
    ask0 = series.ask_px[:, 0].astype(float) * tick

    imb = (bq0 - aq0) / (bq0 + aq0)
    spread = (ask0 - bid0) / mids
    total_depth = series.bid_qty.sum(axis=1) + series.ask_qty.sum(axis=1)
    conc = (bq0 + aq0) / total_depth

    # per-bucket trade aggregates
    bucket = np.repeat(np.arange(n), np.diff(series.bucket_ptr))
    q = series.trade_qty.astype(float) * lot
    px_ticks = series.trade_px.astype(float)
    is_buy = series.trade_side == BUY

    def per_bucket(w):
        return np.bincount(bucket, weights=w, minlength=n)

    W = config.trade_window_s
    cnt = _window_sum(np.bincount(bucket, minlength=n), W)
    vol = _window_sum(per_bucket(q), W)
    signed = _window_sum(per_bucket(np.where(is_buy, q, -q)), W)
    bvol = _window_sum(per_bucket(np.where(is_buy, q, 0.0)), W)
    svol = _window_sum(per_bucket(np.where(is_buy, 0.0, q)), W)
    bnot = _window_sum(per_bucket(np.where(is_buy, px_ticks * q, 0.0)), W)
    snot = _window_sum(per_bucket(np.where(is_buy, 0.0, px_ticks * q)), W)
    # trade prices centred on the grid mid (in ticks) keep the moment-based variance well conditioned
    ref = np.rint(mids / tick) if n else mids
    ref = np.where(np.isfinite(ref), ref, 0.0)
    ref_t = ref[bucket] if len(bucket) else np.zeros(0)

    with np.errstate(invalid="ignore", divide="ignore"):
        nof = np.where(vol > 0, signed / np.where(vol > 0, vol, 1), 0.0)
        vwap_b = np.where(bvol > 0, bnot / np.where(bvol > 0, bvol, 1) * tick, np.nan)
        vwap_s = np.where(svol > 0, snot / np.where(svol > 0, svol, 1) * tick, np.nan)
        vb = np.where(bvol > 0, (vwap_b - mids) / mids, 0.0)
        vs = np.where(svol > 0, (vwap_s - mids) / mids, 0.0)

    tpv = np.zeros(n)
    if len(bucket):
        if W == 1:
            d = px_ticks - ref_t
            s1 = per_bucket(d)
            s2 = per_bucket(d * d)
            with np.errstate(invalid="ignore", divide="ignore"):
                var_ticks = np.where(cnt >= 2, s2 / np.maximum(cnt, 1) - (s1 / np.maximum(cnt, 1)) ** 2, 0.0)
            tpv = np.maximum(var_ticks, 0.0) * tick * tick / (mids * mids)
        else:
            ptr = series.bucket_ptr
            prices = px_ticks * tick
            for t in range(n):
                lo = ptr[max(0, t - W + 1)]
                hi = ptr[t + 1]
                if hi - lo >= 2:
                    tpv[t] = np.var(prices[lo:hi]) / (mids[t] * mids[t])
        tpv = np.where(cnt >= 2, tpv, 0.0)

    # volatility of 1 s log returns over the trailing window
    vw = config.vol_window
    vol_f = np.full(n, np.nan)
    if n > vw:
        lr = np.diff(np.log(mids))
        win = np.lib.stride_tricks.sliding_window_view(lr, vw)
        ok = np.all(np.isfinite(win), axis=1)
        sd = np.full(len(win), np.nan)
        sd[ok] = np.std(win[ok], axis=1, ddof=1)
        vol_f[vw:] = sd

    X = np.column_stack([imb, spread, nof, vb, vs, vol_f, vol, cnt, tpv, conc])
    y = label(series, config.horizon_s)
    window_ok = np.arange(n) >= W - 1
    valid = series.valid & window_ok & np.isfinite(y) & np.all(np.isfinite(X), axis=1)
    X = np.where(series.valid[:, None], X, np.nan)
    notes = ((bvol == 0) * NOTE_NO_BUYS | (svol == 0) * NOTE_NO_SELLS).astype(np.int8)
    return FeatureFrame(series.grid_ts.copy(), X, y, valid, notes)


def series_digest(series: AlignedSeries) -> str:
    h = hashlib.sha256()
    h.update(str(series.tick).encode())
    h.update(str(series.lot).encode())
    for name in AlignedSeries._ARRAYS:
        h.update(np.ascontiguousarray(getattr(series, name)).tobytes())
    return h.hexdigest()[:16]


def cached_frame(series: AlignedSeries, config: FeatureConfig, cache_dir,
                 input_hash: Optional[str] = None) -> FeatureFrame:
    """``build_frame`` with an npz cache keyed by (input hash, config hash)."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = f"{input_hash or series_digest(series)}_{config.digest()}.npz"
    path = cache_dir / key
    if path.exists():
        return FeatureFrame.load_npz(path)
    frame = build_frame(series, config)
    frame.save_npz(path)
    return frame
