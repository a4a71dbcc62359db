from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lobshap.execution import (
    MAKER, TAKER, Account, MakerOrder, SignalPolicy, match_bucket, run_blend, run_buy_hold,
    run_maker, run_taker,
)
from lobshap.marketdata import BUY, SELL, label, synthetic_series

from conftest import make_series


@pytest.fixture(scope="module")
def synth():
    return synthetic_series(5, 3000, "signal")


def _noisy_preds(series, seed, scale=1e-4):
    rng = np.random.default_rng(seed)
    lab = np.nan_to_num(label(series), nan=0.0)
    return lab + rng.normal(scale=scale, size=len(series))


def _check_identity(acct):
    for i in range(len(acct)):
        expect = acct.cash[i] + Account.mark(acct.inventory[i], acct.bid[i], acct.ask[i])
        assert acct.equity_net[i] == expect
    assert acct.equity_gross[-1] - acct.equity_net[-1] == sum((f.fee for f in acct.fills), Decimal(0))


def test_policy_validation():
    with pytest.raises(ValueError):
        SignalPolicy(theta=-1)
    with pytest.raises(ValueError):
        SignalPolicy(notional=0)
    with pytest.raises(ValueError):
        SignalPolicy(taker_fee_rate=-0.1)
    assert SignalPolicy(notional=50).initial_cash == Decimal(50)


def test_infinite_threshold_never_trades(synth):
    pol = SignalPolicy(theta=float("inf"))
    p = _noisy_preds(synth, 0)
    for engine in (run_taker, run_maker):
        acct = engine(synth, p, pol)
        assert acct.n_trades == 0
        assert set(acct.equity_net) == {pol.initial_cash}


def test_misaligned_predictions(synth):
    with pytest.raises(ValueError):
        run_taker(synth, np.zeros(len(synth) - 1))
    with pytest.raises(ValueError):
        run_maker(synth, np.zeros((2, 2)))


def test_round_trip_closed_form():
    # tick 0.01: bid 1.00, ask 1.01, flat; long at step 1, flattened at the end
    s = make_series([100] * 6, [101] * 6)
    fee = Decimal("0.001")
    pol = SignalPolicy(theta=0, notional=1000, taker_fee_rate=fee, flatten_at_end=True)
    acct = run_taker(s, [0, 1, 0, 0, 0, 0], pol)
    bid, ask = Decimal("1.00"), Decimal("1.01")
    q = (Decimal(1000) / ((bid + ask) / 2)).quantize(Decimal("0.0001"), rounding="ROUND_DOWN")
    loss = q * (ask - bid) + fee * q * ask + fee * q * bid
    assert [f.side for f in acct.fills] == [BUY, SELL]
    assert acct.fills[0].price == ask and acct.fills[1].price == bid
    assert acct.equity_net[-1] == Decimal(1000) - loss
    assert acct.equity_gross[-1] == Decimal(1000) - q * (ask - bid)


def test_perfect_foresight_beats_buy_hold_on_uptrend():
    n = 200
    bid = 1000 + np.arange(n) // 3
    s = make_series(bid, bid + 1)
    pred = np.nan_to_num(label(s), nan=0.0)
    pol = SignalPolicy(theta=0, notional=1000, taker_fee_rate=0)
    acct = run_taker(s, pred, pol)
    bh = run_buy_hold(s, 1000)
    assert acct.equity_net[-1] > acct.initial_cash
    assert acct.equity_net[-1] >= bh.equity_net[-1]


def test_buy_hold_zero_spread_flat_is_constant():
    s = make_series([100] * 20, [100] * 20)
    acct = run_buy_hold(s, 1000)
    assert set(acct.equity_net) == {Decimal(1000)}
    assert acct.n_trades == 1


def test_buy_hold_linear_exposure():
    n = 50
    px = np.linspace(10000, 20000, n).astype(np.int64)
    s = make_series(px, px)
    acct = run_buy_hold(s, 1000)
    assert float(acct.equity_net[-1]) == pytest.approx(2000, rel=1e-6)


def test_buy_hold_equals_always_long_taker(synth):
    fee = Decimal("0.0005")
    bh = run_buy_hold(synth, 1000, fee_rate=fee)
    tk = run_taker(synth, np.full(len(synth), 1e-3),
                   SignalPolicy(theta=0, notional=1000, taker_fee_rate=fee))
    assert bh.equity_net == tk.equity_net
    assert len(bh.fills) == 1 and bh.fills[0].liquidity == TAKER


@pytest.mark.parametrize("engine", [run_taker, run_maker])
def test_accounting_identity_and_pessimism(synth, engine):
    acct = engine(synth, _noisy_preds(synth, 1), SignalPolicy(theta=2e-5))
    assert acct.n_trades > 0
    _check_identity(acct)
    for eq, em, inv in zip(acct.equity_net, acct.equity_mid(), acct.inventory):
        assert eq <= em
        assert (eq == em) == (inv == 0)


def test_fee_monotonicity(synth):
    p = _noisy_preds(synth, 2)
    curves = [run_taker(synth, p, SignalPolicy(theta=1e-5, taker_fee_rate=f)).equity_net
              for f in ("0", "0.0002", "0.001")]
    for lo, hi in zip(curves, curves[1:]):
        assert all(b <= a for a, b in zip(lo, hi))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000), t1=st.floats(0, 3e-4), t2=st.floats(0, 3e-4))
def test_threshold_monotone_activity(synth, seed, t1, t2):
    lo, hi = sorted((t1, t2))
    p = _noisy_preds(synth, seed)
    a = run_taker(synth, p, SignalPolicy(theta=lo)).n_trades
    b = run_taker(synth, p, SignalPolicy(theta=hi)).n_trades
    assert b <= a


def test_taker_fills_at_touch(synth):
    acct = run_taker(synth, _noisy_preds(synth, 3), SignalPolicy(theta=1e-5))
    quotes = {int(t): (b, a) for t, b, a in zip(acct.ts, acct.bid, acct.ask)}
    for f in acct.fills:
        b, a = quotes[f.ts]
        assert f.price == (a if f.side == BUY else b)


# -- maker ---------------------------------------------------------------


def test_match_bucket_queue_arithmetic():
    order = MakerOrder(BUY, 100, Decimal(100), Decimal(10), Decimal(5))
    got = match_bucket(order, [(100, Decimal(3), SELL), (100, Decimal(4), SELL)])
    assert got == Decimal(2)
    assert order.qty == Decimal(8) and order.queue_ahead == 0
    # further sells at the price fill directly
    assert match_bucket(order, [(100, Decimal(1), SELL)]) == Decimal(1)
    # buy aggressors do not touch a resting bid
    assert match_bucket(order, [(100, Decimal(50), BUY)]) == 0


def test_match_bucket_trade_through():
    order = MakerOrder(BUY, 100, Decimal(100), Decimal(10), Decimal(1000))
    assert match_bucket(order, [(99, Decimal(1), SELL)]) == Decimal(10)
    ask = MakerOrder(SELL, 101, Decimal(101), Decimal(4), Decimal(1000))
    assert match_bucket(ask, [(102, Decimal(1), BUY)]) == Decimal(4)


def test_negative_queue_rejected():
    with pytest.raises(ValueError):
        MakerOrder(BUY, 1, Decimal(1), Decimal(1), Decimal(-1))


def _maker_series(trades, n=4):
    # tick 1, lot 1: bid 100 ask 101, five lots displayed at each touch
    return make_series([100] * n, [101] * n, [5] * n, [5] * n, trades=trades, tick="1", lot="1")


def test_maker_queue_fill_end_to_end():
    s = _maker_series([(1, 100, 3, SELL), (1, 100, 4, SELL)])
    pol = SignalPolicy(theta=0, notional=Decimal("1005"), maker_fee_rate=0)  # 10 units at mid 100.5
    acct = run_maker(s, [1, 0, 0, 0], pol)
    assert len(acct.fills) == 1
    f = acct.fills[0]
    assert (f.side, f.price, f.qty, f.liquidity) == (BUY, Decimal(100), Decimal(2), MAKER)
    assert f.ts == s.grid_ts[1]


def test_maker_trade_through_end_to_end():
    s = _maker_series([(2, 99, 1, SELL)])
    acct = run_maker(s, [1, 0, 0, 0], SignalPolicy(theta=0, notional=Decimal("1005")))
    assert [(f.price, f.qty) for f in acct.fills] == [(Decimal(100), Decimal(10))]


def test_maker_no_trades_no_fills():
    s = _maker_series([])
    acct = run_maker(s, [1, -1, 1, -1], SignalPolicy(theta=0))
    assert acct.n_trades == 0
    assert set(acct.equity_net) == {acct.initial_cash}


def test_maker_same_bucket_trades_cannot_fill_new_order():
    # the order is posted at step 1; trades stamped in bucket 1 predate it
    s = _maker_series([(1, 99, 1, SELL)])
    acct = run_maker(s, [0, 1, 0, 0], SignalPolicy(theta=0, notional=Decimal("1005")))
    assert acct.n_trades == 0


def test_maker_requotes_when_quote_moves():
    # bid moves up by 2 ticks after posting; the order reprices to the new bid
    s = make_series([100, 102, 102, 102], [101, 103, 103, 103], [5] * 4, [5] * 4,
                    trades=[(2, 102, 6, SELL)], tick="1", lot="1")
    acct = run_maker(s, [1, 0, 0, 0], SignalPolicy(theta=0, notional=Decimal("1005"),
                                                      maker_fee_rate=0))
    assert [(f.price, f.qty) for f in acct.fills] == [(Decimal(102), Decimal(1))]


def test_maker_fills_are_backed_by_trades(synth):
    acct = run_maker(synth, _noisy_preds(synth, 4), SignalPolicy(theta=1e-5))
    assert acct.n_trades > 0
    pos = {int(t): i for i, t in enumerate(synth.grid_ts)}
    for f in acct.fills:
        assert f.liquidity == MAKER
        i = pos[f.ts]
        lo, hi = synth.bucket_ptr[i], synth.bucket_ptr[i + 1]
        px = synth.trade_px[lo:hi] * synth.tick_f
        assert hi > lo
        # a resting bid fills only if the market printed at or below it, an ask at or above
        if f.side == BUY:
            assert px.min() <= float(f.price) + 1e-12
        else:
            assert px.max() >= float(f.price) - 1e-12


# -- blend ---------------------------------------------------------------


def test_blend_identity_and_errors(synth):
    p = _noisy_preds(synth, 5)
    tk = run_taker(synth, p)
    assert run_blend(tk, tk).equity_net == tk.equity_net
    mk = run_maker(synth, p)
    b = run_blend(tk, mk)
    assert all(x == (a + c) / 2 for x, a, c in zip(b.equity_net, tk.equity_net, mk.equity_net))
    short = run_taker(make_series([100] * 5, [101] * 5), np.zeros(5))
    with pytest.raises(ValueError):
        run_blend(tk, short)


def test_blend_flat_and_antisymmetric():
    flat = make_series([100] * 10, [101] * 10)
    a = run_taker(flat, np.zeros(10))
    assert set(run_blend(a, a).equity_net) == {a.initial_cash}

    class Curve:
        def __init__(self, eq):
            self.ts = list(range(len(eq)))
            self.equity_net = eq
            self.equity_gross = eq

        def __len__(self):
            return len(self.equity_net)

    x = [Decimal(v) for v in ("0", "1.5", "-2", "3.25")]
    up = Curve([Decimal(100) + v for v in x])
    down = Curve([Decimal(100) - v for v in x])
    assert set(run_blend(up, down).equity_net) == {Decimal(100)}


def test_csv_exports(tmp_path, synth):
    acct = run_taker(synth, _noisy_preds(synth, 6), SignalPolicy(theta=1e-5))
    t = acct.write_trades_csv(tmp_path / "t.csv").read_text().splitlines()
    assert t[0] == "ts,side,price,qty,liquidity,fee,cash_after,inventory_after"
    assert len(t) == acct.n_trades + 1
    e = acct.write_equity_csv(tmp_path / "e.csv").read_text().splitlines()
    assert e[0] == "ts,equity_gross,equity_net"
    assert len(e) == len(synth) + 1
