"""Stylized replenishing-depth book: imbalance, microprice and tick coarseness.

The book always has a one-tick spread. Touch queues mean-revert toward
``depth_mean`` at ``replenish_rate`` per step with multiplicative shocks
standing in for consumption and refills. Each step the mid moves one tick with
probability ``move_prob``, upward with probability ``1/2 + gain * imbalance``
(clamped), and independently takes an exogenous jump of
``round(N(0, jump_vol / tick))`` ticks. The jump does not depend on the tick,
so on a coarser grid the imbalance-driven component is a larger share of each
price change.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .gbdt import Hyperparams, fit
from .shapley import explain, high_quantile_abs, spearman


@dataclass(frozen=True)
class SimConfig:
    tick: float = 0.01
    initial_mid: float = 100.0
    depth_mean: float = 10.0
    replenish_rate: float = 0.1
    imbalance_gain: float = 0.3
    steps: int = 20_000
    seed: int = 0
    move_prob: float = 0.35
    depth_noise: float = 0.2
    jump_vol: float = 0.02

    def __post_init__(self):
        if not self.tick > 0:
            raise ValueError("tick must be positive")
        if not self.initial_mid > self.tick:
            raise ValueError("initial_mid must exceed one tick")
        if not self.depth_mean > 0:
            raise ValueError("depth_mean must be positive")
        if not 0 < self.replenish_rate <= 1:
            raise ValueError("replenish_rate must be in (0, 1]")
        if not 0 <= self.move_prob <= 1:
            raise ValueError("move_prob must be in [0, 1]")
        if self.steps < 2:
            raise ValueError("steps must be >= 2")
        if self.depth_noise < 0 or self.jump_vol < 0:
            raise ValueError("noise scales must be >= 0")


@dataclass
class SimPath:
    ticked_mid: np.ndarray
    bid_qty: np.ndarray
    ask_qty: np.ndarray
    imbalance: np.ndarray
    microprice: np.ndarray
    next_move: np.ndarray  # mid[t+1] - mid[t]; NaN at the last step
    tick: float

    def __len__(self) -> int:
        return len(self.ticked_mid)

    @property
    def bid(self) -> np.ndarray:
        return self.ticked_mid - self.tick / 2

    @property
    def ask(self) -> np.ndarray:
        return self.ticked_mid + self.tick / 2

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "ticked_mid", "bid_qty", "ask_qty", "imbalance", "microprice"])
            for i in range(len(self)):
                w.writerow([i, repr(float(self.ticked_mid[i])), repr(float(self.bid_qty[i])),
                            repr(float(self.ask_qty[i])), repr(float(self.imbalance[i])),
                            repr(float(self.microprice[i]))])
        return path


def microprice(bid, ask, bid_qty, ask_qty):
    """Touch price weighted toward the side with less displayed depth.

    Equal to ``(ask * bid_qty + bid * ask_qty) / (bid_qty + ask_qty)``, written as
    mid plus half-spread times imbalance so a balanced book returns the mid exactly.
    """
    bid, ask = np.asarray(bid, float), np.asarray(ask, float)
    bq, aq = np.asarray(bid_qty, float), np.asarray(ask_qty, float)
    return (bid + ask) / 2 + (ask - bid) / 2 * ((bq - aq) / (bq + aq))


def simulate(config: SimConfig) -> SimPath:
    c = config
    rng = np.random.default_rng(c.seed)
    n = c.steps
    shocks = rng.standard_normal((n, 2))
    moves = rng.random(n) < c.move_prob
    ups = rng.random(n)
    jumps = np.rint(rng.normal(0.0, c.jump_vol / c.tick, n)) if c.jump_vol > 0 else np.zeros(n)

    q = np.empty((n, 2))
    cur = np.array([c.depth_mean, c.depth_mean])
    floor = 1e-3 * c.depth_mean
    r = c.replenish_rate
    for t in range(n):
        q[t] = cur
        cur = np.maximum(floor, cur + r * (c.depth_mean - cur) + c.depth_noise * c.depth_mean * shocks[t])
    bq, aq = q[:, 0], q[:, 1]
    imb = (bq - aq) / (bq + aq)
    p_up = np.clip(0.5 + c.imbalance_gain * imb, 0.0, 1.0)
    step_ticks = np.where(moves, np.where(ups < p_up, 1, -1), 0) + jumps
    # mid sits half a tick above a tick-grid bid
    bid0 = math.floor(c.initial_mid / c.tick - 0.5)
    bid_ticks = bid0 + np.concatenate([[0], np.cumsum(step_ticks[:-1])])
    mid = (bid_ticks + 0.5) * c.tick
    nxt = np.append(np.diff(mid), np.nan)
    micro = microprice(mid - c.tick / 2, mid + c.tick / 2, bq, aq)
    return SimPath(mid, bq, aq, imb, micro, nxt, c.tick)


def microprice_anticipation(path: SimPath) -> float:
    """Correlation of (microprice - mid) with the next mid change."""
    if len(path) < 100:
        raise ValueError("path must have at least 100 steps")
    x = (path.microprice - path.ticked_mid)[:-1]
    y = path.next_move[:-1]
    if np.std(x) == 0 or np.std(y) == 0:
        return math.nan
    return float(np.corrcoef(x, y)[0, 1])


# ---------------------------------------------------------------------------
# tick ladder

LADDER_HP = Hyperparams(depth=2, iterations=40, learning_rate=0.1, l2_leaf=1.0, subsample=1.0,
                        bins=32)


def imbalance_shap_quantile(path: SimPath, q: float = 0.95, hp: Hyperparams = LADDER_HP,
                            seed: int = 0) -> float:
    """q-quantile of |SHAP| of imbalance in a small GBDT forecasting the next log return."""
    mid = path.ticked_mid
    y = np.log(mid[1:] / mid[:-1])
    depth = (path.bid_qty + path.ask_qty)[:-1]
    X = np.column_stack([path.imbalance[:-1], depth])
    model = fit(X, y, hp, seed=seed, feature_names=("l1_imbalance", "total_depth"))
    return high_quantile_abs(explain(model, X, X), "l1_imbalance", q)


def tick_ladder(base: SimConfig = SimConfig(), multipliers: Sequence = (1, 2, 5, 10),
                seeds: Sequence = range(20), q: float = 0.95) -> dict:
    """Run every (tick multiple, seed) pair; summarise per tick and associate with SHAP."""
    rows = []
    for m in multipliers:
        tick = base.tick * m
        anticip, shap_q, rel = [], [], []
        for s in seeds:
            path = simulate(replace(base, tick=tick, seed=int(s)))
            anticip.append(microprice_anticipation(path))
            shap_q.append(imbalance_shap_quantile(path, q, seed=int(s)))
            rel.append(tick / float(np.mean(path.ticked_mid)))
        rows.append({
            "tick": tick,
            "multiplier": m,
            "relative_tick": float(np.mean(rel)),
            "anticipation_mean": float(np.mean(anticip)),
            "anticipation_sd": float(np.std(anticip, ddof=1)) if len(anticip) > 1 else 0.0,
            "shap_quantile_mean": float(np.mean(shap_q)),
            "n_seeds": len(anticip),
        })
    pairs = [(r["relative_tick"], r["shap_quantile_mean"]) for r in rows]
    assoc = spearman(*zip(*pairs)) if len(pairs) >= 3 else math.nan
    anticip_assoc = (spearman([r["relative_tick"] for r in rows],
                              [r["anticipation_mean"] for r in rows])
                     if len(rows) >= 3 else math.nan)
    return {"config": asdict(base), "quantile": q, "rows": rows,
            "spearman_tick_vs_shap": assoc, "spearman_tick_vs_anticipation": anticip_assoc}


def write_ladder_json(summary: dict, path) -> Path:
    path = Path(path)
    clean = json.loads(json.dumps(summary, default=float), parse_constant=lambda c: None)
    path.write_text(json.dumps(clean, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


# ---------------------------------------------------------------------------
# coarse spot versus fine futures


def spread_position(mid_fut, bid_spot, ask_spot):
    """Affine map of the futures mid onto the spot spread: -1 at the bid, +1 at the ask."""
    m, b, a = np.asarray(mid_fut, float), np.asarray(bid_spot, float), np.asarray(ask_spot, float)
    width = a - b
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(width > 0, 2 * (m - b) / width - 1, np.nan)
    return float(out) if out.ndim == 0 else out


def position_imbalance_corr(positions, imbalances) -> float:
    x = np.asarray(positions, float)
    y = np.asarray(imbalances, float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("positions and imbalances must be equal-length vectors")
    if len(x) < 3:
        raise ValueError("need at least 3 points")
    if np.std(x) == 0 or np.std(y) == 0:
        return math.nan
    return float(np.corrcoef(x, y)[0, 1])


@dataclass(frozen=True)
class TwinConfig:
    steps: int = 20_000
    seed: int = 0
    initial_price: float = 1.0
    spot_tick: float = 0.001
    fut_tick: float = 0.00001
    price_vol: float = 0.0003  # per-step sd of the latent price
    imbalance_noise: float = 0.25


def twin_simulation(config: TwinConfig = TwinConfig()) -> dict:
    """Coarse spot and fine futures books driven by one latent price path.

    Spot depth leans toward the side the latent price is closer to, so the
    displayed imbalance tracks where the price sits inside the spot spread.
    """
    c = config
    rng = np.random.default_rng(c.seed)
    price = c.initial_price + np.cumsum(rng.normal(0.0, c.price_vol, c.steps))
    bid_spot = np.floor(price / c.spot_tick) * c.spot_tick
    ask_spot = bid_spot + c.spot_tick
    u = (price - bid_spot) / c.spot_tick
    imb = np.clip(2 * u - 1 + rng.normal(0.0, c.imbalance_noise, c.steps), -1.0, 1.0)
    mid_fut = np.rint(price / c.fut_tick) * c.fut_tick
    pos = spread_position(mid_fut, bid_spot, ask_spot)
    return {"position": pos, "imbalance": imb, "bid_spot": bid_spot, "ask_spot": ask_spot,
            "mid_fut": mid_fut, "corr": position_imbalance_corr(pos, imb)}
