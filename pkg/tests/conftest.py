import numpy as np
import pytest

from lobshap.gbdt import Tree, TreeEnsemble


def random_tree(rng, n_features, depth, n_bins):
    """Random preorder tree; leaves may appear early so shapes vary."""
    nodes = []

    def rec(level):
        if level == depth or (level > 0 and rng.random() < 0.25):
            nodes.append({"v": float(rng.normal())})
            return
        nodes.append({"f": int(rng.integers(n_features)), "t": int(rng.integers(n_bins - 1))})
        rec(level + 1)
        rec(level + 1)

    rec(0)
    return Tree.from_preorder(nodes)


def random_ensemble(rng, n_features=5, n_trees=3, depth=3, n_bins=8, lr=0.1):
    edges = [np.sort(rng.normal(size=n_bins - 1)) for _ in range(n_features)]
    names = tuple(f"x{j}" for j in range(n_features))
    trees = [random_tree(rng, n_features, depth, n_bins) for _ in range(n_trees)]
    return TreeEnsemble(float(rng.normal()), lr, trees, edges, names)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_series(bid, ask, bid_qty=None, ask_qty=None, trades=(), tick="0.01", lot="0.0001",
                valid=None, depth=1):
    """Hand-built AlignedSeries. ``trades`` holds (bucket, price_ticks, qty_lots, side)."""
    from decimal import Decimal

    from lobshap.marketdata import AlignedSeries

    bid = np.asarray(bid, dtype=np.int64)
    ask = np.asarray(ask, dtype=np.int64)
    n = len(bid)
    bq = np.full(n, 100, dtype=np.int64) if bid_qty is None else np.asarray(bid_qty, np.int64)
    aq = np.full(n, 100, dtype=np.int64) if ask_qty is None else np.asarray(ask_qty, np.int64)
    offs = np.arange(depth)
    trades = sorted(trades, key=lambda t: t[0])
    counts = np.bincount([t[0] for t in trades], minlength=n) if trades else np.zeros(n, int)
    ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    grid = np.arange(1000, 1000 + n, dtype=np.int64)
    return AlignedSeries(
        grid_ts=grid, tick=Decimal(tick), lot=Decimal(lot),
        bid_px=bid[:, None] - offs, bid_qty=np.repeat(bq[:, None], depth, 1),
        ask_px=ask[:, None] + offs, ask_qty=np.repeat(aq[:, None], depth, 1),
        source_ts=grid * 1000, valid=np.ones(n, bool) if valid is None else np.asarray(valid),
        trade_ts=np.array([grid[t[0]] * 1000 for t in trades], dtype=np.int64),
        trade_px=np.array([t[1] for t in trades], dtype=np.int64),
        trade_qty=np.array([t[2] for t in trades], dtype=np.int64),
        trade_side=np.array([t[3] for t in trades], dtype=np.int8),
        bucket_ptr=ptr,
    )
