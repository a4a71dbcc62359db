"""Taker, maker, blended and buy-and-hold backtests with exact decimal accounting.

All engines step over the 1 s grid. Long inventory is marked at the best bid
and short inventory at the best ask, so reported equity never exceeds what an
immediate exit at the touch would realise. Grid points whose book is invalid
carry the last valid quote forward for marking and never trade.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from decimal import ROUND_DOWN, Decimal, localcontext
from pathlib import Path
from typing import Optional

import numpy as np

from .marketdata import BUY, SELL, AlignedSeries

PREC = 60
TAKER = "Taker"
MAKER = "Maker"


def _dec(x) -> Decimal:
    if isinstance(x, Decimal):
        return x
    if isinstance(x, float) and math.isinf(x):
        return Decimal("Infinity") if x > 0 else Decimal("-Infinity")
    return Decimal(str(x))


@dataclass(frozen=True)
class SignalPolicy:
    theta: Decimal = Decimal("0")
    notional: Decimal = Decimal("1000")
    taker_fee_rate: Decimal = Decimal("0.0004")
    maker_fee_rate: Decimal = Decimal("0.0002")
    initial_cash: Optional[Decimal] = None  # defaults to notional
    requote_ticks: int = 1
    flatten_at_end: bool = False

    def __post_init__(self):
        for name in ("theta", "notional", "taker_fee_rate", "maker_fee_rate"):
            object.__setattr__(self, name, _dec(getattr(self, name)))
        cash = self.notional if self.initial_cash is None else _dec(self.initial_cash)
        object.__setattr__(self, "initial_cash", cash)
        if self.theta.is_nan() or self.theta < 0:
            raise ValueError("theta must be >= 0")
        if not (self.notional > 0 and self.notional.is_finite()):
            raise ValueError("notional must be positive")
        if self.taker_fee_rate < 0:
            raise ValueError("taker_fee_rate must be >= 0")
        if not self.maker_fee_rate.is_finite():
            raise ValueError("maker_fee_rate must be finite")
        if self.requote_ticks < 0:
            raise ValueError("requote_ticks must be >= 0")

    def signals(self, preds) -> np.ndarray:
        """Thresholded signal per step: +1, -1, or 0 meaning hold the previous state."""
        p = np.asarray(preds, dtype=float)
        th = float(self.theta)
        with np.errstate(invalid="ignore"):
            fire = np.isfinite(p) & (np.abs(p) > th)
        return np.where(fire, np.sign(p), 0).astype(np.int8)


@dataclass(frozen=True)
class Fill:
    ts: int
    side: int
    price: Decimal
    qty: Decimal
    liquidity: str
    fee: Decimal
    cash_after: Decimal
    inventory_after: Decimal


@dataclass
class Account:
    """Cash, inventory and equity trajectories plus the fill log."""

    ts: list = field(default_factory=list)
    cash: list = field(default_factory=list)
    inventory: list = field(default_factory=list)
    bid: list = field(default_factory=list)  # marking quotes
    ask: list = field(default_factory=list)
    equity_net: list = field(default_factory=list)
    equity_gross: list = field(default_factory=list)
    fills: list = field(default_factory=list)
    initial_cash: Decimal = Decimal(0)

    def __len__(self) -> int:
        return len(self.equity_net)

    @property
    def n_trades(self) -> int:
        return len(self.fills)

    @staticmethod
    def mark(inventory: Decimal, bid: Decimal, ask: Decimal) -> Decimal:
        if inventory > 0:
            return inventory * bid
        if inventory < 0:
            return inventory * ask
        return Decimal(0)

    def equity_mid(self) -> list:
        with localcontext() as ctx:
            ctx.prec = PREC
            return [c + q * (b + a) / 2 for c, q, b, a in
                    zip(self.cash, self.inventory, self.bid, self.ask)]

    def equity_array(self, gross: bool = False) -> np.ndarray:
        return np.array([float(v) for v in (self.equity_gross if gross else self.equity_net)])

    def write_trades_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["ts", "side", "price", "qty", "liquidity", "fee", "cash_after",
                        "inventory_after"])
            for f in self.fills:
                w.writerow([f.ts, "B" if f.side == BUY else "S", f.price, f.qty, f.liquidity,
                            f.fee, f.cash_after, f.inventory_after])
        return path

    def write_equity_csv(self, path) -> Path:
        return write_equity_csv(path, self.ts, self.equity_gross, self.equity_net)


def write_equity_csv(path, ts, gross, net) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ts", "equity_gross", "equity_net"])
        for row in zip(ts, gross, net):
            w.writerow(row)
    return path


class _Ledger:
    """Mutable account state shared by the engines."""

    def __init__(self, initial_cash: Decimal):
        self.cash = initial_cash
        self.inv = Decimal(0)
        self.fees = Decimal(0)
        self.acct = Account(initial_cash=initial_cash)

    def fill(self, ts, side, price, qty, liquidity, fee_rate):
        fee = fee_rate * price * qty
        self.cash += -side * price * qty - fee
        self.inv += side * qty
        self.fees += fee
        self.acct.fills.append(Fill(ts, side, price, qty, liquidity, fee, self.cash, self.inv))

    def record(self, ts, bid, ask):
        a = self.acct
        eq = self.cash + Account.mark(self.inv, bid, ask)
        a.ts.append(ts)
        a.cash.append(self.cash)
        a.inventory.append(self.inv)
        a.bid.append(bid)
        a.ask.append(ask)
        a.equity_net.append(eq)
        a.equity_gross.append(eq + self.fees)


class _Quotes:
    """Decimal best quotes with the last valid book carried over invalid points."""

    def __init__(self, series: AlignedSeries):
        self.s = series
        self.tick = series.tick
        self.lot = series.lot
        first = np.flatnonzero(series.valid)
        if len(first) == 0:
            raise ValueError("series has no valid grid point")
        self.first_valid = int(first[0])
        self._i = -1
        self.bid_t = self.ask_t = 0
        self.bid = self.ask = None
        self.bid_q = self.ask_q = None

    def at(self, i: int) -> bool:
        """Advance to grid point i; returns whether the point is tradable."""
        s = self.s
        ok = bool(s.valid[i])
        if ok or self.bid is None:
            j = i if ok else self.first_valid
            self.bid_t = int(s.bid_px[j, 0])
            self.ask_t = int(s.ask_px[j, 0])
            self.bid = self.bid_t * self.tick
            self.ask = self.ask_t * self.tick
            self.bid_q = int(s.bid_qty[j, 0]) * self.lot
            self.ask_q = int(s.ask_qty[j, 0]) * self.lot
        return ok

    @property
    def mid(self) -> Decimal:
        return (self.bid + self.ask) / 2


def _check_aligned(series: AlignedSeries, preds) -> np.ndarray:
    p = np.asarray(preds, dtype=float)
    if p.ndim != 1 or len(p) != len(series):
        raise ValueError(f"predictions of length {p.size} do not align with {len(series)} grid points")
    return p


def _unit_qty(notional: Decimal, mid: Decimal, lot: Decimal) -> Decimal:
    q = (notional / mid).quantize(lot, rounding=ROUND_DOWN)
    return q if q > 0 else lot


def run_taker(series: AlignedSeries, preds, policy: SignalPolicy = SignalPolicy()) -> Account:
    p = _check_aligned(series, preds)
    sig = policy.signals(p)
    with localcontext() as ctx:
        ctx.prec = PREC
        q = _Quotes(series)
        led = _Ledger(policy.initial_cash)
        state = 0
        n = len(series)
        for i in range(n):
            ts = int(series.grid_ts[i])
            ok = q.at(i)
            if ok and sig[i] != 0 and sig[i] != state:
                state = int(sig[i])
                target = state * _unit_qty(policy.notional, q.mid, q.lot)
                diff = target - led.inv
                if diff > 0:
                    led.fill(ts, BUY, q.ask, diff, TAKER, policy.taker_fee_rate)
                elif diff < 0:
                    led.fill(ts, SELL, q.bid, -diff, TAKER, policy.taker_fee_rate)
            if policy.flatten_at_end and i == n - 1 and led.inv != 0:
                if led.inv > 0:
                    led.fill(ts, SELL, q.bid, led.inv, TAKER, policy.taker_fee_rate)
                else:
                    led.fill(ts, BUY, q.ask, -led.inv, TAKER, policy.taker_fee_rate)
            led.record(ts, q.bid, q.ask)
        return led.acct


@dataclass
class MakerOrder:
    side: int
    price_ticks: int
    price: Decimal
    qty: Decimal  # remaining
    queue_ahead: Decimal

    def __post_init__(self):
        if self.queue_ahead < 0:
            raise ValueError("queue_ahead must be >= 0")


def match_bucket(order: MakerOrder, trades) -> Decimal:
    """Apply one bucket of (price_ticks, qty, aggressor side) trades to a resting order.

    Returns the filled quantity and updates ``order`` in place. A trade strictly
    through the order price fills the whole remainder; trades at the order
    price from the opposite aggressor first consume ``queue_ahead``.
    """
    filled = Decimal(0)
    for px, qty, side in trades:
        if order.qty <= 0:
            break
        through = px < order.price_ticks if order.side == BUY else px > order.price_ticks
        if through:
            filled += order.qty
            order.qty = Decimal(0)
            break
        if px == order.price_ticks and side == -order.side:
            if qty <= order.queue_ahead:
                order.queue_ahead -= qty
                continue
            take = min(order.qty, qty - order.queue_ahead)
            order.queue_ahead = Decimal(0)
            order.qty -= take
            filled += take
    return filled


def run_maker(series: AlignedSeries, preds, policy: SignalPolicy = SignalPolicy()) -> Account:
    """Passive execution: post at the touch on the desired side, fill from later trades.

    An order placed at grid t can only be filled by trades in bucket t+1 or
    later. Fills are at the posted price.
    """
    p = _check_aligned(series, preds)
    sig = policy.signals(p)
    with localcontext() as ctx:
        ctx.prec = PREC
        q = _Quotes(series)
        led = _Ledger(policy.initial_cash)
        lot = series.lot
        ptr = series.bucket_ptr
        state = 0
        target = Decimal(0)
        order: Optional[MakerOrder] = None
        n = len(series)
        for i in range(n):
            ts = int(series.grid_ts[i])
            ok = q.at(i)
            if order is not None and ptr[i + 1] > ptr[i]:
                lo, hi = ptr[i], ptr[i + 1]
                bucket = [(int(series.trade_px[k]), int(series.trade_qty[k]) * lot,
                           int(series.trade_side[k])) for k in range(lo, hi)]
                got = match_bucket(order, bucket)
                if got > 0:
                    led.fill(ts, order.side, order.price, got, MAKER, policy.maker_fee_rate)
                if order.qty == 0:
                    order = None
            if ok:
                if sig[i] != 0 and sig[i] != state:
                    state = int(sig[i])
                    target = state * _unit_qty(policy.notional, q.mid, lot)
                    order = None
                need = target - led.inv
                if need == 0:
                    order = None
                else:
                    side = BUY if need > 0 else SELL
                    best_t = q.bid_t if side == BUY else q.ask_t
                    stale = (order is None or order.side != side
                             or abs(best_t - order.price_ticks) > policy.requote_ticks)
                    if stale:
                        order = MakerOrder(side, best_t, best_t * q.tick, abs(need),
                                           q.bid_q if side == BUY else q.ask_q)
                    else:
                        order.qty = abs(need)
            if policy.flatten_at_end and i == n - 1 and led.inv != 0:
                order = None
                if led.inv > 0:
                    led.fill(ts, SELL, q.bid, led.inv, TAKER, policy.taker_fee_rate)
                else:
                    led.fill(ts, BUY, q.ask, -led.inv, TAKER, policy.taker_fee_rate)
            led.record(ts, q.bid, q.ask)
        return led.acct


@dataclass
class BlendResult:
    ts: list
    equity_net: list
    equity_gross: list

    def __len__(self) -> int:
        return len(self.equity_net)

    def equity_array(self, gross: bool = False) -> np.ndarray:
        return np.array([float(v) for v in (self.equity_gross if gross else self.equity_net)])

    def write_equity_csv(self, path) -> Path:
        return write_equity_csv(path, self.ts, self.equity_gross, self.equity_net)


def run_blend(taker, maker) -> BlendResult:
    """Half the capital in each engine: equity is the per-step average."""
    if len(taker) != len(maker):
        raise ValueError(f"equity length mismatch: {len(taker)} vs {len(maker)}")
    if list(taker.ts) != list(maker.ts):
        raise ValueError("taker and maker are not on the same grid")
    with localcontext() as ctx:
        ctx.prec = PREC
        net = [(a + b) / 2 for a, b in zip(taker.equity_net, maker.equity_net)]
        gross = [(a + b) / 2 for a, b in zip(taker.equity_gross, maker.equity_gross)]
    return BlendResult(list(taker.ts), net, gross)


def run_buy_hold(series: AlignedSeries, notional, fee_rate=0, initial_cash=None) -> Account:
    """One taker buy of notional/mid at the first valid ask, held to the end."""
    if len(series) == 0:
        raise ValueError("empty series")
    policy = SignalPolicy(theta=0, notional=notional, taker_fee_rate=fee_rate,
                          initial_cash=initial_cash)
    return run_taker(series, np.ones(len(series)), policy)
