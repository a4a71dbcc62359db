"""Ingest, validate and align order-book snapshots and trades on a 1 s grid.

Prices are carried as integer multiples of a declared tick and quantities as
integer multiples of a declared lot, so that accounting downstream can be done
in exact decimal arithmetic. Float views are derived on demand.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from decimal import Decimal
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .errors import DataError

logger = logging.getLogger(__name__)

BUY = 1
SELL = -1


@dataclass(frozen=True)
class IngestSchema:
    tick: Decimal = Decimal("0.01")
    lot: Decimal = Decimal("0.0001")
    depth_levels: int = 5
    max_ffill_ms: int = 5000

    def __post_init__(self):
        object.__setattr__(self, "tick", Decimal(str(self.tick)))
        object.__setattr__(self, "lot", Decimal(str(self.lot)))
        if self.tick <= 0 or self.lot <= 0:
            raise ValueError("tick and lot must be positive")
        if self.depth_levels < 1:
            raise ValueError("depth_levels must be >= 1")


@dataclass(frozen=True)
class BookSnapshot:
    """One book state; prices in quote currency, quantities in base currency."""

    ts: int
    bid_px: tuple
    bid_qty: tuple
    ask_px: tuple
    ask_qty: tuple

    def __post_init__(self):
        n = len(self.bid_px)
        if n < 1 or not (len(self.bid_qty) == len(self.ask_px) == len(self.ask_qty) == n):
            raise ValueError("levels must be non-empty and of equal length")
        if not (self.ask_px[0] > self.bid_px[0] > 0):
            raise ValueError("crossed or non-positive top of book")
        if any(b1 <= b2 for b1, b2 in zip(self.bid_px, self.bid_px[1:])):
            raise ValueError("bids must be strictly decreasing")
        if any(a1 >= a2 for a1, a2 in zip(self.ask_px, self.ask_px[1:])):
            raise ValueError("asks must be strictly increasing")
        if min(self.bid_qty) < 0 or min(self.ask_qty) < 0:
            raise ValueError("quantities must be non-negative")
        if self.bid_qty[0] <= 0 or self.ask_qty[0] <= 0:
            raise ValueError("level-0 quantities must be positive")

    @property
    def depth(self) -> int:
        return len(self.bid_px)


@dataclass(frozen=True)
class TradeRecord:
    ts: int
    price: float
    qty: float
    side: int  # BUY or SELL aggressor

    def __post_init__(self):
        if self.price <= 0 or self.qty <= 0:
            raise ValueError("trade price and qty must be positive")
        if self.side not in (BUY, SELL):
            raise ValueError("side must be BUY (+1) or SELL (-1)")


def mid(snapshot: BookSnapshot) -> float:
    return (snapshot.ask_px[0] + snapshot.bid_px[0]) / 2


# ---------------------------------------------------------------------------
# raw streams


@dataclass
class RawBook:
    """Book rows in integer ticks / lots, ordered by timestamp."""

    ts: np.ndarray  # int64 ms
    bid_px: np.ndarray  # int64 [m, L] ticks
    bid_qty: np.ndarray  # int64 [m, L] lots
    ask_px: np.ndarray
    ask_qty: np.ndarray


@dataclass
class RawTrades:
    ts: np.ndarray  # int64 ms
    px: np.ndarray  # int64 ticks
    qty: np.ndarray  # int64 lots
    side: np.ndarray  # int8, +1 buy / -1 sell aggressor

    @classmethod
    def empty(cls) -> "RawTrades":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), np.zeros(0, dtype=np.int8))


@dataclass
class IngestReport:
    book_rows: int = 0
    book_rejected_crossed: int = 0
    book_rejected_other: int = 0
    trade_rows: int = 0
    trades_outside_grid: int = 0
    volume_outside_grid_lots: int = 0
    grid_points: int = 0
    grid_start_s: int = 0
    grid_end_s: int = 0
    invalid_points: int = 0
    fill_gaps: int = 0
    max_fill_gap_ms: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# aligned series


@dataclass(eq=False)
class AlignedSeries:
    """Book state and trade buckets on a regular 1 s grid.

    ``trades_in_bucket(i)`` holds trades with ts in (grid_ts[i]-1s, grid_ts[i]].
    Trades are stored flat; ``bucket_ptr[i]:bucket_ptr[i+1]`` indexes bucket i.
    """

    grid_ts: np.ndarray  # int64 seconds
    tick: Decimal
    lot: Decimal
    bid_px: np.ndarray  # int64 [n, L] ticks
    bid_qty: np.ndarray  # int64 [n, L] lots
    ask_px: np.ndarray
    ask_qty: np.ndarray
    source_ts: np.ndarray  # int64 ms of the carried-forward book row
    valid: np.ndarray  # bool
    trade_ts: np.ndarray
    trade_px: np.ndarray
    trade_qty: np.ndarray
    trade_side: np.ndarray
    bucket_ptr: np.ndarray  # int64 [n + 1]
    report: Optional[IngestReport] = field(default=None, repr=False)

    _ARRAYS = ("grid_ts", "bid_px", "bid_qty", "ask_px", "ask_qty", "source_ts", "valid",
               "trade_ts", "trade_px", "trade_qty", "trade_side", "bucket_ptr")

    def __post_init__(self):
        for name in self._ARRAYS:
            getattr(self, name).setflags(write=False)

    def __len__(self) -> int:
        return len(self.grid_ts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AlignedSeries):
            return NotImplemented
        if self.tick != other.tick or self.lot != other.lot:
            return False
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in self._ARRAYS)

    @property
    def depth(self) -> int:
        return self.bid_px.shape[1]

    @property
    def span(self) -> tuple:
        return int(self.grid_ts[0]), int(self.grid_ts[-1])

    @property
    def tick_f(self) -> float:
        return float(self.tick)

    @property
    def lot_f(self) -> float:
        return float(self.lot)

    def mids(self) -> np.ndarray:
        """Float mid prices; NaN on invalid grid points."""
        m = (self.bid_px[:, 0] + self.ask_px[:, 0]) * (self.tick_f / 2)
        return np.where(self.valid, m, np.nan)

    def bucket(self, i: int) -> slice:
        return slice(int(self.bucket_ptr[i]), int(self.bucket_ptr[i + 1]))

    def trades_in_bucket(self, i: int) -> list:
        sl = self.bucket(i)
        return [TradeRecord(int(ts), px * self.tick_f, q * self.lot_f, int(sd))
                for ts, px, q, sd in zip(self.trade_ts[sl], self.trade_px[sl],
                                         self.trade_qty[sl], self.trade_side[sl])]

    def snapshot(self, i: int) -> BookSnapshot:
        t, l = self.tick_f, self.lot_f
        return BookSnapshot(
            ts=int(self.source_ts[i]),
            bid_px=tuple(float(p) * t for p in self.bid_px[i]),
            bid_qty=tuple(float(q) * l for q in self.bid_qty[i]),
            ask_px=tuple(float(p) * t for p in self.ask_px[i]),
            ask_qty=tuple(float(q) * l for q in self.ask_qty[i]),
        )

    def slice(self, start: int, stop: int) -> "AlignedSeries":
        """Grid points [start, stop) with their trade buckets."""
        start, stop, _ = slice(start, stop).indices(len(self))
        if stop <= start:
            raise ValueError("empty slice")
        lo, hi = int(self.bucket_ptr[start]), int(self.bucket_ptr[stop])
        return replace(
            self,
            grid_ts=self.grid_ts[start:stop], bid_px=self.bid_px[start:stop],
            bid_qty=self.bid_qty[start:stop], ask_px=self.ask_px[start:stop],
            ask_qty=self.ask_qty[start:stop], source_ts=self.source_ts[start:stop],
            valid=self.valid[start:stop], trade_ts=self.trade_ts[lo:hi],
            trade_px=self.trade_px[lo:hi], trade_qty=self.trade_qty[lo:hi],
            trade_side=self.trade_side[lo:hi],
            bucket_ptr=self.bucket_ptr[start:stop + 1] - lo, report=None,
        )

    def with_valid(self, valid: np.ndarray) -> "AlignedSeries":
        return replace(self, valid=np.asarray(valid, dtype=bool).copy())

    def shifted(self, seconds: int) -> "AlignedSeries":
        """Same data with every timestamp moved by ``seconds``."""
        return replace(self, grid_ts=self.grid_ts + seconds,
                       source_ts=self.source_ts + 1000 * seconds,
                       trade_ts=self.trade_ts + 1000 * seconds)

    def scaled(self, k: int) -> "AlignedSeries":
        """Same book with every price multiplied by integer ``k``."""
        return replace(self, tick=self.tick * k)


def label(series: AlignedSeries, horizon_s: int = 3) -> np.ndarray:
    """Forward log return of the mid over ``horizon_s`` grid steps (NaN = missing)."""
    if horizon_s < 1:
        raise ValueError("horizon_s must be >= 1")
    m = series.mids()
    out = np.full(len(m), np.nan)
    if len(m) > horizon_s:
        out[:-horizon_s] = np.log(m[horizon_s:] / m[:-horizon_s])
    return out


# ---------------------------------------------------------------------------
# alignment


def _book_row_checks(bid_px, bid_qty, ask_px, ask_qty):
    crossed = ~((ask_px[:, 0] > bid_px[:, 0]) & (bid_px[:, 0] > 0))
    other = np.zeros(len(bid_px), dtype=bool)
    if bid_px.shape[1] > 1:
        other |= np.any(np.diff(bid_px, axis=1) >= 0, axis=1)
        other |= np.any(np.diff(ask_px, axis=1) <= 0, axis=1)
    other |= np.any(bid_qty < 0, axis=1) | np.any(ask_qty < 0, axis=1)
    other |= (bid_qty[:, 0] <= 0) | (ask_qty[:, 0] <= 0)
    other &= ~crossed
    return crossed, other


def align(book: RawBook, trades: RawTrades, schema: IngestSchema,
          span: Optional[tuple] = None) -> AlignedSeries:
    """Sample ``book`` onto the 1 s grid and bucket ``trades``.

    The grid runs from the first whole second covered by both streams to the
    last whole second at which the book is still within ``max_ffill_ms`` of a
    row and trades are still being recorded. ``span`` (first, last grid second)
    overrides that derivation.
    """
    rep = IngestReport(book_rows=len(book.ts), trade_rows=len(trades.ts))
    crossed, other = _book_row_checks(book.bid_px, book.bid_qty, book.ask_px, book.ask_qty)
    rep.book_rejected_crossed = int(crossed.sum())
    rep.book_rejected_other = int(other.sum())
    keep = ~(crossed | other)
    bts = book.ts[keep]
    if len(bts) == 0:
        raise DataError("empty intersection: no valid book rows")

    if span is None:
        first_ms = int(bts[0])
        last_ms = int(bts[-1]) + schema.max_ffill_ms
        if len(trades.ts):
            first_ms = max(first_ms, int(trades.ts[0]))
            last_ms = min(last_ms, int(trades.ts[-1]))
        g0, g1 = -(-first_ms // 1000), last_ms // 1000
    else:
        g0, g1 = int(span[0]), int(span[1])
    if g1 < g0:
        raise DataError("empty intersection between book and trade time ranges")

    grid = np.arange(g0, g1 + 1, dtype=np.int64)
    src = np.searchsorted(bts, grid * 1000, side="right") - 1
    has_src = src >= 0
    src_c = np.clip(src, 0, None)
    source_ts = np.where(has_src, bts[src_c], -1)
    gap = grid * 1000 - source_ts
    valid = has_src & (gap <= schema.max_ffill_ms)
    if not valid.any():
        raise DataError("empty intersection: no valid grid points")

    def take(a):
        return a[keep][src_c]

    bucket_id = -(-trades.ts // 1000) - g0  # ceil(ts / 1000) - g0
    inside = (bucket_id >= 0) & (bucket_id < len(grid))
    rep.trades_outside_grid = int((~inside).sum())
    rep.volume_outside_grid_lots = int(trades.qty[~inside].sum())
    order = np.argsort(bucket_id[inside], kind="stable")
    tb = bucket_id[inside][order]
    ptr = np.searchsorted(tb, np.arange(len(grid) + 1), side="left").astype(np.int64)

    rep.grid_points = len(grid)
    rep.grid_start_s, rep.grid_end_s = int(g0), int(g1)
    rep.invalid_points = int((~valid).sum())
    stale = has_src & ~valid
    rep.fill_gaps = int(stale.sum())
    rep.max_fill_gap_ms = int(gap[has_src].max()) if has_src.any() else 0

    return AlignedSeries(
        grid_ts=grid, tick=schema.tick, lot=schema.lot,
        bid_px=take(book.bid_px), bid_qty=take(book.bid_qty),
        ask_px=take(book.ask_px), ask_qty=take(book.ask_qty),
        source_ts=source_ts.astype(np.int64), valid=valid,
        trade_ts=trades.ts[inside][order], trade_px=trades.px[inside][order],
        trade_qty=trades.qty[inside][order], trade_side=trades.side[inside][order],
        bucket_ptr=ptr, report=rep,
    )


# ---------------------------------------------------------------------------
# CSV ingest / serialization


def _book_columns(levels: int) -> list:
    cols = ["ts_ms"]
    for k in range(levels):
        cols += [f"bid_px_{k}", f"bid_qty_{k}", f"ask_px_{k}", f"ask_qty_{k}"]
    return cols


def _read_csv(path, kind: str) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{kind} file not found: {path}")
    try:
        return pd.read_csv(path, dtype=str, compression="infer", keep_default_na=False)
    except pd.errors.ParserError as exc:
        raise DataError(f"malformed {kind} file {path}: {exc}") from None
    except pd.errors.EmptyDataError:
        raise DataError(f"{kind} file {path} has no header") from None


def _numeric(df: pd.DataFrame, col: str, path, kind: str) -> np.ndarray:
    vals = pd.to_numeric(df[col], errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(vals)
    if bad.any():
        line = int(np.argmax(bad)) + 2  # header is line 1
        raise DataError(f"malformed {kind} row at line {line} of {path}: column {col!r}")
    return vals


def _to_units(vals: np.ndarray, unit: Decimal, col: str, path, kind: str) -> np.ndarray:
    scaled = vals / float(unit)
    units = np.rint(scaled)
    off = np.abs(scaled - units) > 1e-6 * np.maximum(1.0, np.abs(scaled))
    if off.any():
        line = int(np.argmax(off)) + 2
        raise DataError(f"{kind} row at line {line} of {path}: {col} not a multiple of {unit}")
    return units.astype(np.int64)


def _check_sorted(ts: np.ndarray, path, kind: str):
    dec = np.diff(ts) < 0
    if dec.any():
        line = int(np.argmax(dec)) + 3
        raise DataError(f"{kind} timestamps decrease at line {line} of {path}")


def read_book_csv(path, schema: IngestSchema) -> RawBook:
    df = _read_csv(path, "book")
    need = _book_columns(schema.depth_levels)
    missing = [c for c in need if c not in df.columns]
    if missing:
        raise DataError(f"book file {path} lacks columns {missing}")
    ts = _numeric(df, "ts_ms", path, "book").astype(np.int64)
    _check_sorted(ts, path, "book")
    L = schema.depth_levels
    arrs = {}
    for side in ("bid", "ask"):
        px = np.empty((len(df), L), dtype=np.int64)
        qty = np.empty((len(df), L), dtype=np.int64)
        for k in range(L):
            c = f"{side}_px_{k}"
            px[:, k] = _to_units(_numeric(df, c, path, "book"), schema.tick, c, path, "book")
            c = f"{side}_qty_{k}"
            qty[:, k] = _to_units(_numeric(df, c, path, "book"), schema.lot, c, path, "book")
        arrs[side] = (px, qty)
    return RawBook(ts, arrs["bid"][0], arrs["bid"][1], arrs["ask"][0], arrs["ask"][1])


def read_trades_csv(path, schema: IngestSchema) -> RawTrades:
    df = _read_csv(path, "trades")
    missing = [c for c in ("ts_ms", "price", "qty", "side") if c not in df.columns]
    if missing:
        raise DataError(f"trades file {path} lacks columns {missing}")
    if len(df) == 0:
        return RawTrades.empty()
    ts = _numeric(df, "ts_ms", path, "trades").astype(np.int64)
    _check_sorted(ts, path, "trades")
    px = _numeric(df, "price", path, "trades")
    qty = _numeric(df, "qty", path, "trades")
    bad = (px <= 0) | (qty <= 0)
    side_s = df["side"].str.strip().to_numpy()
    bad |= ~np.isin(side_s, ["B", "S"])
    if bad.any():
        line = int(np.argmax(bad)) + 2
        raise DataError(f"malformed trades row at line {line} of {path}")
    side = np.where(side_s == "B", BUY, SELL).astype(np.int8)
    return RawTrades(ts, _to_units(px, schema.tick, "price", path, "trades"),
                     _to_units(qty, schema.lot, "qty", path, "trades"), side)


def ingest(book_path, trades_path, schema: IngestSchema = IngestSchema(),
           span: Optional[tuple] = None) -> AlignedSeries:
    book = read_book_csv(book_path, schema)
    trades = read_trades_csv(trades_path, schema)
    series = align(book, trades, schema, span=span)
    logger.info("ingested %d book rows, %d trades -> %d grid points (%d invalid)",
                series.report.book_rows, series.report.trade_rows, len(series),
                series.report.invalid_points)
    return series


def _decimals(unit: Decimal) -> int:
    return max(0, -unit.normalize().as_tuple().exponent)


def _fmt(units: np.ndarray, unit: Decimal) -> np.ndarray:
    # exact for |units| < 2**53: fixed-point printing of an integer multiple
    d = _decimals(unit)
    return np.char.mod(f"%.{d}f", units.astype(float) * float(unit))


def _write_frame(df: pd.DataFrame, path) -> Path:
    path = Path(path)
    comp = {"method": "gzip", "mtime": 0} if path.suffix == ".gz" else None
    df.to_csv(path, index=False, compression=comp, lineterminator="\n")
    return path


def write_book_csv(book: RawBook, path, schema: IngestSchema) -> Path:
    L = book.bid_px.shape[1]
    data = {"ts_ms": book.ts.astype(np.int64)}
    for k in range(L):
        data[f"bid_px_{k}"] = _fmt(book.bid_px[:, k], schema.tick)
        data[f"bid_qty_{k}"] = _fmt(book.bid_qty[:, k], schema.lot)
        data[f"ask_px_{k}"] = _fmt(book.ask_px[:, k], schema.tick)
        data[f"ask_qty_{k}"] = _fmt(book.ask_qty[:, k], schema.lot)
    return _write_frame(pd.DataFrame(data, columns=_book_columns(L)), path)


def write_trades_csv(trades: RawTrades, path, schema: IngestSchema) -> Path:
    df = pd.DataFrame({
        "ts_ms": trades.ts.astype(np.int64),
        "price": _fmt(trades.px, schema.tick),
        "qty": _fmt(trades.qty, schema.lot),
        "side": np.where(trades.side == BUY, "B", "S"),
    }, columns=["ts_ms", "price", "qty", "side"])
    return _write_frame(df, path)


def serialize(series: AlignedSeries, out_dir, stem: str = "series") -> tuple:
    """Write the book rows and trades behind ``series`` as CSV files.

    Re-ingesting with ``span=series.span`` reproduces ``series`` exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    has_src = series.source_ts >= 0
    idx = np.flatnonzero(has_src)
    first = idx[np.r_[True, np.diff(series.source_ts[idx]) != 0]]
    book = RawBook(series.source_ts[first], series.bid_px[first], series.bid_qty[first],
                   series.ask_px[first], series.ask_qty[first])
    trades = RawTrades(series.trade_ts, series.trade_px, series.trade_qty, series.trade_side)
    schema = IngestSchema(tick=series.tick, lot=series.lot, depth_levels=series.depth)
    bp = write_book_csv(book, out_dir / f"{stem}_book.csv", schema)
    tp = write_trades_csv(trades, out_dir / f"{stem}_trades.csv", schema)
    return bp, tp


# ---------------------------------------------------------------------------
# synthetic streams


@dataclass(frozen=True)
class RegimeConfig:
    """Parameters of the synthetic tick-grid market.

    ``imbalance_gain`` maps displayed L1 imbalance to the up-move probability
    of the next second's mid change; zero gives a driftless walk.
    """

    tick: str = "0.01"
    lot: str = "0.0001"
    initial_mid: float = 100.0
    depth_levels: int = 5
    depth_scale: float = 5.0
    imbalance_gain: float = 0.3
    imbalance_persistence: float = 0.9
    move_prob: float = 0.35
    trade_intensity: float = 3.0
    trade_size: float = 0.5
    aggressor_coupling: float = 0.5
    replenish_gain: float = 2.0
    spread_toggle_prob: float = 0.05
    outage_prob: float = 0.0
    start_ms: int = 1_700_000_000_000

    def __post_init__(self):
        if Decimal(self.tick) <= 0 or Decimal(self.lot) <= 0:
            raise ValueError("tick and lot must be positive")
        if not 0 <= self.move_prob <= 1:
            raise ValueError("move_prob must be in [0, 1]")
        if not 0 <= self.imbalance_persistence < 1:
            raise ValueError("imbalance_persistence must be in [0, 1)")
        if self.depth_levels < 1 or self.depth_scale <= 0 or self.trade_size <= 0:
            raise ValueError("depth_levels, depth_scale and trade_size must be positive")

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_overrides(cls, base: "RegimeConfig", overrides: dict) -> "RegimeConfig":
        unknown = sorted(set(overrides) - set(cls.keys()))
        if unknown:
            raise KeyError(f"unknown regime keys: {unknown}")
        typed = {}
        for f in fields(cls):
            if f.name in overrides:
                cur = getattr(base, f.name)
                typed[f.name] = type(cur)(overrides[f.name])
        return replace(base, **typed)

    def schema(self) -> IngestSchema:
        return IngestSchema(tick=Decimal(self.tick), lot=Decimal(self.lot),
                            depth_levels=self.depth_levels)


REGIMES = {
    "signal": RegimeConfig(),
    "null": RegimeConfig(imbalance_gain=0.0),
}


def resolve_regime(regime) -> RegimeConfig:
    if isinstance(regime, RegimeConfig):
        return regime
    try:
        return REGIMES[regime]
    except KeyError:
        raise KeyError(f"unknown regime {regime!r}; known: {sorted(REGIMES)}") from None


def simulate_streams(seed: int, n_seconds: int, regime: RegimeConfig = RegimeConfig()):
    """Generate (RawBook, RawTrades) for ``n_seconds`` of a synthetic market.

    Each second: the displayed imbalance at the start of the second sets the
    up-move probability ``1/2 + gain * imbalance``; the mid moves one tick with
    probability ``move_prob`` at a random millisecond; Poisson trades print at
    the prevailing touch with buy probability tilted toward the drift; a book
    row is published after the move and after the depth refresh. Liquidity
    providers refill the side that takers hit, so net buying during a second
    pushes the next displayed imbalance toward the ask (``replenish_gain``).
    """
    if n_seconds < 10:
        raise ValueError("n_seconds must be >= 10")
    rg = resolve_regime(regime)
    rng = np.random.default_rng(seed)
    tick, lot = float(Decimal(rg.tick)), float(Decimal(rg.lot))
    L = rg.depth_levels
    depth_lots = rg.depth_scale / lot
    level_scale = 1.0 + 0.5 * np.arange(L)

    bid = int(math.floor(rg.initial_mid / tick - 0.5))
    ask = bid + 1
    x = 0.0
    phi = rg.imbalance_persistence
    innov = math.sqrt(1.0 - phi * phi)

    def draw_depth(imb):
        total = depth_lots * math.exp(0.3 * rng.standard_normal())
        bq = max(1, int(round(total * (1 + imb) / 2)))
        aq = max(1, int(round(total * (1 - imb) / 2)))
        deep = np.maximum(0, np.rint(depth_lots * level_scale[1:]
                                     * np.exp(0.4 * rng.standard_normal((2, L - 1))))).astype(np.int64)
        return bq, aq, deep

    imb = math.tanh(x)
    bq, aq, deep = draw_depth(imb)

    b_ts, b_bid, b_ask, b_bq, b_aq, b_deep = [], [], [], [], [], []
    t_ts, t_px, t_qty, t_side = [], [], [], []

    def record(ts):
        b_ts.append(ts)
        b_bid.append(bid)
        b_ask.append(ask)
        b_bq.append(bq)
        b_aq.append(aq)
        b_deep.append(deep)

    record(rg.start_ms)
    outage_left = 0
    for s in range(n_seconds):
        base = rg.start_ms + 1000 * s
        cur_imb = (bq - aq) / (bq + aq)
        p_up = min(1.0, max(0.0, 0.5 + rg.imbalance_gain * cur_imb))
        moved = rng.random() < rg.move_prob
        up = rng.random() < p_up
        t_move = int(rng.integers(1, 1000))
        t_upd = int(rng.integers(1, 1000))
        toggle = rng.random() < rg.spread_toggle_prob
        toggle_side = rng.random() < 0.5
        n_tr = int(rng.poisson(rg.trade_intensity))
        tr_ms = np.sort(rng.integers(1, 1001, n_tr))
        p_buy = min(1.0, max(0.0, 0.5 + rg.aggressor_coupling * (p_up - 0.5)))
        tr_buy = rng.random(n_tr) < p_buy
        tr_q = np.maximum(1, np.rint(rng.exponential(rg.trade_size / lot, n_tr))).astype(np.int64)
        x = phi * x + innov * rng.standard_normal()
        net_flow = float(np.where(tr_buy, tr_q, -tr_q).sum()) / depth_lots if n_tr else 0.0
        if outage_left == 0 and rg.outage_prob > 0 and rng.random() < rg.outage_prob:
            outage_left = int(rng.integers(6, 21))

        events = sorted([(t_move, 0), (t_upd, 1)])
        ti = 0
        for t_ev, kind in events:
            while ti < n_tr and tr_ms[ti] < t_ev:
                t_ts.append(base + int(tr_ms[ti]))
                t_px.append(ask if tr_buy[ti] else bid)
                t_qty.append(int(tr_q[ti]))
                t_side.append(BUY if tr_buy[ti] else SELL)
                ti += 1
            if kind == 0:
                if not moved:
                    continue
                step = 1 if up else -1
                bid += step
                ask += step
            else:
                if toggle:
                    if ask - bid == 1:
                        if toggle_side:
                            ask += 1
                        else:
                            bid -= 1
                    else:
                        if toggle_side:
                            ask -= 1
                        else:
                            bid += 1
                x -= rg.replenish_gain * net_flow
                imb = math.tanh(x)
                bq, aq, deep = draw_depth(imb)
            if outage_left == 0:
                record(base + t_ev)
        while ti < n_tr:
            t_ts.append(base + int(tr_ms[ti]))
            t_px.append(ask if tr_buy[ti] else bid)
            t_qty.append(int(tr_q[ti]))
            t_side.append(BUY if tr_buy[ti] else SELL)
            ti += 1
        if outage_left:
            outage_left -= 1

    m = len(b_ts)
    bid0 = np.asarray(b_bid, dtype=np.int64)
    ask0 = np.asarray(b_ask, dtype=np.int64)
    offs = np.arange(L, dtype=np.int64)
    deep_arr = np.asarray(b_deep, dtype=np.int64).reshape(m, 2, L - 1)
    bid_qty = np.empty((m, L), dtype=np.int64)
    ask_qty = np.empty((m, L), dtype=np.int64)
    bid_qty[:, 0] = b_bq
    ask_qty[:, 0] = b_aq
    bid_qty[:, 1:] = deep_arr[:, 0, :]
    ask_qty[:, 1:] = deep_arr[:, 1, :]
    book = RawBook(np.asarray(b_ts, dtype=np.int64), bid0[:, None] - offs, bid_qty,
                   ask0[:, None] + offs, ask_qty)
    trades = RawTrades(np.asarray(t_ts, dtype=np.int64), np.asarray(t_px, dtype=np.int64),
                       np.asarray(t_qty, dtype=np.int64), np.asarray(t_side, dtype=np.int8))
    return book, trades


def gen_synthetic(seed: int, n_seconds: int, regime: RegimeConfig, out_dir,
                  compress: bool = False) -> tuple:
    """Write a synthetic book CSV and trades CSV; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    regime = resolve_regime(regime)
    book, trades = simulate_streams(seed, n_seconds, regime)
    ext = ".csv.gz" if compress else ".csv"
    schema = regime.schema()
    bp = write_book_csv(book, out_dir / f"book{ext}", schema)
    tp = write_trades_csv(trades, out_dir / f"trades{ext}", schema)
    return bp, tp


def synthetic_series(seed: int, n_seconds: int, regime: RegimeConfig = RegimeConfig(),
                     max_ffill_ms: int = 5000) -> AlignedSeries:
    """In-memory shortcut for ``ingest(gen_synthetic(...))``."""
    regime = resolve_regime(regime)
    book, trades = simulate_streams(seed, n_seconds, regime)
    schema = replace(regime.schema(), max_ffill_ms=max_ffill_ms)
    return align(book, trades, schema)
