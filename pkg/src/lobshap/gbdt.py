"""Histogram gradient-boosted regression trees with squared-error gradients.

Features are quantile-binned with cut points taken from the training data
itself, so bin assignments are unchanged by any strictly increasing transform
of a raw feature. Models are scored with R^2 and GMADL; GMADL is only used for
selection, never as a training gradient.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import DataError

MODEL_FORMAT = "lobshap-gbdt"
MODEL_VERSION = 1


@dataclass(frozen=True)
class Hyperparams:
    depth: int = 4
    iterations: int = 200
    learning_rate: float = 0.05
    l2_leaf: float = 3.0
    subsample: float = 0.8
    bins: int = 256

    RANGES = {
        "depth": (1, 8),
        "iterations": (10, 1000),
        "learning_rate": (1e-3, 0.3),
        "l2_leaf": (0.0, 100.0),
        "subsample": (0.0, 1.0),
        "bins": (16, 512),
    }

    def __post_init__(self):
        for name, (lo, hi) in self.RANGES.items():
            v = getattr(self, name)
            if name == "subsample":
                ok = lo < v <= hi
            else:
                ok = lo <= v <= hi
            if not ok:
                raise ValueError(f"{name}={v} outside documented range [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GmadlParams:
    a: float = 1000.0
    b: float = 1.0

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("GMADL parameters a and b must be positive")


# ---------------------------------------------------------------------------
# binning


def quantile_edges(x: np.ndarray, bins: int) -> np.ndarray:
    """Strictly increasing cut points drawn from the sample's order statistics."""
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if len(x) == 0:
        return np.zeros(0)
    levels = np.arange(1, bins) / bins
    edges = np.unique(np.quantile(x, levels, method="inverted_cdf"))
    # the sample maximum separates nothing
    return edges[edges < x.max()]


def bin_column(x: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Bin id = number of edges strictly below x; ``bin <= t`` iff ``x <= edges[t]``."""
    return np.searchsorted(edges, x, side="left").astype(np.int32)


# ---------------------------------------------------------------------------
# trees


@dataclass
class Tree:
    """Binary regression tree in flat arrays; node 0 is the root, nodes in preorder.

    Split nodes send a row left iff ``bin(x[feature]) <= threshold``; leaves have
    ``feature == -1`` and carry ``value``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def max_depth(self) -> int:
        def rec(node):
            if self.is_leaf(node):
                return 0
            return 1 + max(rec(self.left[node]), rec(self.right[node]))
        return rec(0)

    def leaf_index(self, B: np.ndarray) -> np.ndarray:
        """Leaf reached by each row of the binned matrix ``B``."""
        node = np.zeros(len(B), dtype=np.int64)
        active = ~(self.feature[node] < 0)
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = B[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = self.feature[node[idx]] >= 0
        return node

    def predict_binned(self, B: np.ndarray) -> np.ndarray:
        return self.value[self.leaf_index(B)]

    def to_preorder(self) -> list:
        out = []

        def rec(node):
            if self.is_leaf(node):
                out.append({"v": float(self.value[node])})
            else:
                out.append({"f": int(self.feature[node]), "t": int(self.threshold[node])})
                rec(self.left[node])
                rec(self.right[node])
        rec(0)
        return out

    @classmethod
    def from_preorder(cls, nodes: Sequence[Mapping]) -> "Tree":
        feature, threshold, left, right, value = [], [], [], [], []
        pos = 0

        def rec():
            nonlocal pos
            me = len(feature)
            nd = nodes[pos]
            pos += 1
            feature.append(-1)
            threshold.append(-1)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            if "v" in nd:
                value[me] = float(nd["v"])
            else:
                feature[me] = int(nd["f"])
                threshold[me] = int(nd["t"])
                left[me] = rec()
                right[me] = rec()
            return me
        rec()
        if pos != len(nodes):
            raise ValueError("trailing nodes in preorder tree description")
        return cls(np.asarray(feature, dtype=np.int32), np.asarray(threshold, dtype=np.int32),
                   np.asarray(left, dtype=np.int32), np.asarray(right, dtype=np.int32),
                   np.asarray(value, dtype=float))

    @classmethod
    def stump(cls, feature: int, threshold: int, left_value: float, right_value: float) -> "Tree":
        return cls.from_preorder([{"f": feature, "t": threshold},
                                  {"v": left_value}, {"v": right_value}])


@dataclass
class TreeEnsemble:
    base_score: float
    learning_rate: float
    trees: list
    bin_edges: list
    feature_names: tuple
    hyperparams: Optional[dict] = field(default=None)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def _matrix(self, X) -> np.ndarray:
        if hasattr(X, "columns"):  # DataFrame
            missing = [f for f in self.feature_names if f not in X.columns]
            if missing:
                raise KeyError(f"missing feature {missing[0]!r}")
            return X[list(self.feature_names)].to_numpy(dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def bin(self, X) -> np.ndarray:
        X = self._matrix(X)
        B = np.empty(X.shape, dtype=np.int32)
        for j, e in enumerate(self.bin_edges):
            B[:, j] = bin_column(X[:, j], e)
        return B

    def tree_outputs(self, X) -> np.ndarray:
        """Raw (unscaled) per-tree outputs, shape [n_trees, n_rows]."""
        B = self.bin(X)
        if not self.trees:
            return np.zeros((0, len(B)))
        return np.stack([t.predict_binned(B) for t in self.trees])

    def predict(self, X) -> np.ndarray:
        out = self.tree_outputs(X)
        return self.base_score + self.learning_rate * out.sum(axis=0)

    def predict_row(self, x: Mapping) -> float:
        missing = [f for f in self.feature_names if f not in x]
        if missing:
            raise KeyError(f"missing feature {missing[0]!r}")
        return float(self.predict(np.array([[float(x[f]) for f in self.feature_names]]))[0])

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "base_score": float(self.base_score),
            "learning_rate": float(self.learning_rate),
            "feature_names": list(self.feature_names),
            "bin_edges": [[float(v) for v in e] for e in self.bin_edges],
            "hyperparams": self.hyperparams,
            "trees": [t.to_preorder() for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def model_id(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: Mapping) -> "TreeEnsemble":
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ValueError("unsupported model document")
        return cls(d["base_score"], d["learning_rate"],
                   [Tree.from_preorder(t) for t in d["trees"]],
                   [np.asarray(e, dtype=float) for e in d["bin_edges"]],
                   tuple(d["feature_names"]), d.get("hyperparams"))

    @classmethod
    def from_json(cls, text: str) -> "TreeEnsemble":
        return cls.from_dict(json.loads(text))


def predict(model: TreeEnsemble, x) -> float:
    """Single-row prediction from a feature mapping or vector."""
    if isinstance(x, Mapping):
        return model.predict_row(x)
    return float(model.predict(np.asarray(x, dtype=float)[None, :])[0])


# ---------------------------------------------------------------------------
# training


def _grow(B, grad, n_bins, depth, l2, min_leaf):
    """Greedy depth-limited tree on binned rows ``B`` fitting targets ``grad``."""
    F = B.shape[1]
    width = int(n_bins.max())
    offsets = (np.arange(F) * width).astype(np.int64)
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(-1)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    def rec(idx, level):
        me = new_node()
        g = grad[idx]
        G, C = float(g.sum()), len(idx)
        value[me] = G / (C + l2)
        if level >= depth or C < 2 * min_leaf:
            return me
        codes = (B[idx].astype(np.int64) + offsets).ravel()
        hg = np.bincount(codes, weights=np.repeat(g, F), minlength=F * width).reshape(F, width)
        hc = np.bincount(codes, minlength=F * width).reshape(F, width)
        GL = np.cumsum(hg, axis=1)[:, :-1]
        CL = np.cumsum(hc, axis=1)[:, :-1]
        CR = C - CL
        GR = G - GL
        ok = (CL >= min_leaf) & (CR >= min_leaf)
        if not ok.any():
            return me
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = GL * GL / (CL + l2) + GR * GR / (CR + l2) - G * G / (C + l2)
        gain = np.where(ok, gain, -np.inf)
        best = int(np.argmax(gain))
        f, t = divmod(best, width - 1)
        if not gain[f, t] > 0:
            return me
        feature[me], threshold[me] = f, t
        go_left = B[idx, f] <= t
        left[me] = rec(idx[go_left], level + 1)
        right[me] = rec(idx[~go_left], level + 1)
        return me

    rec(np.arange(len(B)), 0)
    return Tree(np.asarray(feature, dtype=np.int32), np.asarray(threshold, dtype=np.int32),
                np.asarray(left, dtype=np.int32), np.asarray(right, dtype=np.int32),
                np.asarray(value, dtype=float))


def fit(X, y, hp: Hyperparams = Hyperparams(), seed: int = 0,
        feature_names: Optional[Sequence[str]] = None, min_leaf: int = 64) -> TreeEnsemble:
    """Boost ``hp.iterations`` squared-error trees on quantile-binned features.

    Leaf values are ``sum(residuals) / (count + l2_leaf)``; each tree sees a
    seeded row subsample of fraction ``hp.subsample``. A constant label yields
    an ensemble with no trees.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be 2-D with one row per label")
    if feature_names is None:
        feature_names = tuple(f"f{j}" for j in range(X.shape[1]))
    feature_names = tuple(feature_names)
    if len(feature_names) != X.shape[1]:
        raise ValueError("feature_names does not match X")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DataError("training rows must be finite")
    n = len(y)
    if n < 2 * min_leaf:
        raise DataError(f"need at least {2 * min_leaf} rows to fit, got {n}")

    edges = [quantile_edges(X[:, j], hp.bins) for j in range(X.shape[1])]
    B = np.empty(X.shape, dtype=np.int32)
    for j, e in enumerate(edges):
        B[:, j] = bin_column(X[:, j], e)
    n_bins = np.array([len(e) + 1 for e in edges])

    base = float(y.mean())
    model = TreeEnsemble(base, hp.learning_rate, [], edges, feature_names, hp.to_dict())
    if np.all(y == y[0]):
        model.base_score = float(y[0])
        return model

    rng = np.random.default_rng(seed)
    pred = np.full(n, base)
    n_sub = max(2 * min_leaf, int(round(hp.subsample * n)))
    for _ in range(hp.iterations):
        resid = y - pred
        if hp.subsample < 1.0 and n_sub < n:
            rows = np.sort(rng.choice(n, size=n_sub, replace=False))
        else:
            rows = np.arange(n)
        tree = _grow(B[rows], resid[rows], n_bins, hp.depth, hp.l2_leaf, min_leaf)
        model.trees.append(tree)
        pred = pred + hp.learning_rate * tree.predict_binned(B)
    return model


# ---------------------------------------------------------------------------
# metrics


def gmadl_terms(returns, preds, p: GmadlParams = GmadlParams()) -> np.ndarray:
    """Per-sample -(sigmoid(a R Rhat) - 1/2) |R|^b."""
    r = np.asarray(returns, dtype=float)
    f = np.asarray(preds, dtype=float)
    if r.shape != f.shape:
        raise ValueError(f"length mismatch: {r.shape} vs {f.shape}")
    # sigmoid(z) - 1/2 == tanh(z / 2) / 2, exact at z = 0 and stable for large |z|
    with np.errstate(over="ignore"):
        return -0.5 * np.tanh(0.5 * p.a * r * f) * np.abs(r) ** p.b


def gmadl(returns, preds, p: GmadlParams = GmadlParams()) -> float:
    """Mean of -(sigmoid(a R Rhat) - 1/2) |R|^b; lower is better."""
    terms = gmadl_terms(returns, preds, p)
    if terms.size == 0:
        raise ValueError("gmadl needs at least one sample")
    return float(np.mean(terms))


def r2(returns, preds) -> float:
    """1 - SSE/SST about the evaluation-set mean; NaN when the labels are constant."""
    r = np.asarray(returns, dtype=float)
    f = np.asarray(preds, dtype=float)
    if r.shape != f.shape:
        raise ValueError(f"length mismatch: {r.shape} vs {f.shape}")
    if r.size < 2:
        return math.nan
    sst = float(np.sum((r - r.mean()) ** 2))
    if sst == 0:
        return math.nan
    return 1.0 - float(np.sum((r - f) ** 2)) / sst


def hit_rate(returns, preds) -> float:
    """Share of rows with nonzero label and prediction whose signs agree."""
    r = np.asarray(returns, dtype=float)
    f = np.asarray(preds, dtype=float)
    m = (r != 0) & (f != 0)
    if not m.any():
        return math.nan
    return float(np.mean(np.sign(r[m]) == np.sign(f[m])))
