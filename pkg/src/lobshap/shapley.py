"""Exact path-dependent Shapley attributions for TreeEnsemble, plus global diagnostics.

For one tree the cover-weighted valuation of a coalition S is a sum over
leaves of ``value * prod_j (o_j if j in S else z_j)``, where for each feature
j on the leaf's path ``o_j`` says whether x satisfies every split on j along
the path and ``z_j`` is the product of background cover ratios of those
splits. Each leaf is therefore a product game over at most ``depth`` players,
whose Shapley values come from the coefficients of
``prod_{k != j} (z_k + o_k t)``. Leaves are padded to a common path length
with null players (z = o = 1), which changes no attribution, so the whole tree
is evaluated in a handful of array operations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .gbdt import Tree, TreeEnsemble


@dataclass
class ShapMatrix:
    values: np.ndarray  # [n_rows, n_features]
    base_value: float
    feature_names: tuple

    def __len__(self) -> int:
        return len(self.values)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.feature_names.index(name)]

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.values, columns=list(self.feature_names))
        df["base_value"] = self.base_value
        return df

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        return path

    @classmethod
    def concat(cls, parts: Sequence["ShapMatrix"]) -> "ShapMatrix":
        """Stack explanations of several models; base_value is the row-weighted mean."""
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        names = parts[0].feature_names
        if any(p.feature_names != names for p in parts):
            raise ValueError("feature sets differ")
        n = np.array([len(p) for p in parts], dtype=float)
        base = float(np.dot(n, [p.base_value for p in parts]) / n.sum())
        return cls(np.vstack([p.values for p in parts]), base, names)


def node_covers(tree: Tree, B: np.ndarray) -> np.ndarray:
    """Number of background rows passing through each node."""
    covers = np.zeros(tree.n_nodes, dtype=float)
    node = np.zeros(len(B), dtype=np.int64)
    covers[0] = len(B)
    active = np.full(len(B), tree.feature[0] >= 0)
    while active.any():
        idx = np.flatnonzero(active)
        nd = node[idx]
        go_left = B[idx, tree.feature[nd]] <= tree.threshold[nd]
        node[idx] = np.where(go_left, tree.left[nd], tree.right[nd])
        covers += np.bincount(node[idx], minlength=tree.n_nodes)
        active[idx] = tree.feature[node[idx]] >= 0
    return covers


@dataclass
class _LeafTable:
    value: np.ndarray  # [Lv]
    feats: np.ndarray  # [Lv, P]
    lo: np.ndarray  # [Lv, P]; o = lo < bin <= hi
    hi: np.ndarray
    z: np.ndarray  # [Lv, P]
    depth: int


_BIG = np.iinfo(np.int32).max


def _leaf_table(tree: Tree, covers: np.ndarray) -> _LeafTable:
    leaves = []

    def rec(node, conds):
        if tree.is_leaf(node):
            leaves.append((float(tree.value[node]), conds))
            return
        f, t = int(tree.feature[node]), int(tree.threshold[node])
        for child, is_left in ((tree.left[node], True), (tree.right[node], False)):
            c_par = covers[node]
            ratio = covers[child] / c_par if c_par > 0 else 0.5
            lo, hi = (-1, t) if is_left else (t, _BIG)
            rec(child, conds + [(f, lo, hi, ratio)])

    rec(0, [])
    grouped = []
    for v, conds in leaves:
        per = {}
        for f, lo, hi, ratio in conds:
            plo, phi_, pz = per.get(f, (-1, _BIG, 1.0))
            per[f] = (max(plo, lo), min(phi_, hi), pz * ratio)
        grouped.append((v, sorted(per.items())))
    P = max((len(g) for _, g in grouped), default=0)
    Lv = len(grouped)
    value = np.array([v for v, _ in grouped])
    feats = np.zeros((Lv, P), dtype=np.int64)
    lo = np.full((Lv, P), -1, dtype=np.int64)
    hi = np.full((Lv, P), _BIG, dtype=np.int64)
    z = np.ones((Lv, P))
    for i, (_, g) in enumerate(grouped):
        for j, (f, (l, h, r)) in enumerate(g):
            feats[i, j], lo[i, j], hi[i, j], z[i, j] = f, l, h, r
    return _LeafTable(value, feats, lo, hi, z, P)


def _shapley_weights(P: int) -> np.ndarray:
    return np.array([math.factorial(s) * math.factorial(P - 1 - s) / math.factorial(P)
                     for s in range(P)])


def _tree_shap(table: _LeafTable, B: np.ndarray, n_features: int, chunk_cells: int = 2_000_000):
    """Shapley values of one tree (unscaled), shape [n_rows, n_features]."""
    n = len(B)
    phi = np.zeros((n, n_features))
    P = table.depth
    if P == 0 or n == 0:
        return phi
    Lv = len(table.value)
    w = _shapley_weights(P)
    eye = np.eye(P, dtype=bool)
    # z_k seen by player j's polynomial: 1 for j == k so that factor drops out
    Zk = np.where(eye[None, :, :], 1.0, table.z[:, None, :])  # [Lv, j, k]
    onehot = np.zeros((Lv * P, n_features))
    onehot[np.arange(Lv * P), table.feats.ravel()] = 1.0
    flat_f = table.feats.ravel()
    lo = table.lo.ravel()
    hi = table.hi.ravel()
    step = max(1, chunk_cells // (Lv * P * (P + 1)))
    for r0 in range(0, n, step):
        Bc = B[r0:r0 + step]
        m = len(Bc)
        sel = Bc[:, flat_f]
        O = ((sel > lo) & (sel <= hi)).T.reshape(Lv, P, m).astype(float)
        c = np.zeros((Lv, P, P + 1, m))
        c[:, :, 0, :] = 1.0
        for k in range(P):
            zk = Zk[:, :, k][:, :, None, None]
            ok = np.where(eye[:, k][None, :, None], 0.0, O[:, None, k, :])  # [Lv, j, m]
            new = c * zk
            new[:, :, 1:, :] += c[:, :, :-1, :] * ok[:, :, None, :]
            c = new
        S = np.tensordot(w, c[:, :, :P, :], axes=([0], [2]))  # [Lv, P, m]
        contrib = table.value[:, None, None] * (O - table.z[:, :, None]) * S
        phi[r0:r0 + m] = (onehot.T @ contrib.reshape(Lv * P, m)).T
    return phi


def explain(model: TreeEnsemble, X, background) -> ShapMatrix:
    """Exact path-dependent Shapley values with node covers taken from ``background``."""
    Xm = model._matrix(X)
    Bg = model._matrix(background)
    if len(Xm) == 0:
        raise ValueError("nothing to explain")
    if len(Bg) == 0:
        raise ValueError("background must be non-empty")
    B = model.bin(Xm)
    Bb = model.bin(Bg)
    F = model.n_features
    phi = np.zeros((len(B), F))
    base = 0.0
    for tree in model.trees:
        covers = node_covers(tree, Bb)
        table = _leaf_table(tree, covers)
        phi += model.learning_rate * _tree_shap(table, B, F)
        base += float(np.sum(table.value * np.prod(table.z, axis=1)))
    return ShapMatrix(phi, model.base_score + model.learning_rate * base, model.feature_names)


# ---------------------------------------------------------------------------
# global diagnostics


def global_importance(shap: ShapMatrix) -> list:
    """Features ranked by mean |phi|, descending; ties broken by name."""
    if len(shap) == 0:
        raise ValueError("empty SHAP matrix")
    s = np.mean(np.abs(shap.values), axis=0)
    pairs = [(name, float(v)) for name, v in zip(shap.feature_names, s)]
    return sorted(pairs, key=lambda p: (-p[1], p[0]))


def spearman(a, b) -> float:
    ra, rb = rankdata(a), rankdata(b)
    if np.std(ra) == 0 or np.std(rb) == 0:
        return math.nan
    return float(np.corrcoef(ra, rb)[0, 1])


def rank_correlation(importances_by_asset: Mapping[str, Sequence]) -> pd.DataFrame:
    """Pairwise Spearman correlation of mean-|SHAP| vectors across assets."""
    assets = list(importances_by_asset)
    if len(assets) < 2:
        raise ValueError("need at least two assets")
    vecs = {a: dict(importances_by_asset[a]) for a in assets}
    names = sorted(vecs[assets[0]])
    for a in assets[1:]:
        if sorted(vecs[a]) != names:
            raise ValueError(f"feature set of {a!r} differs from {assets[0]!r}")
    mat = np.eye(len(assets))
    for i, a in enumerate(assets):
        for j in range(i + 1, len(assets)):
            b = assets[j]
            rho = spearman([vecs[a][f] for f in names], [vecs[b][f] for f in names])
            mat[i, j] = mat[j, i] = rho
    return pd.DataFrame(mat, index=assets, columns=assets)


def dependence_export(shap: ShapMatrix, X, feature: str) -> pd.DataFrame:
    """Two-column (feature value, SHAP value) table in input row order."""
    if feature not in shap.feature_names:
        raise KeyError(f"unknown feature {feature!r}")
    j = shap.feature_names.index(feature)
    if hasattr(X, "columns"):
        x = X[feature].to_numpy(dtype=float)
    else:
        x = np.asarray(X, dtype=float)[:, j]
    if len(x) != len(shap):
        raise ValueError("X and SHAP matrix row counts differ")
    return pd.DataFrame({feature: x, f"shap_{feature}": shap.values[:, j]})


def high_quantile_abs(shap: ShapMatrix, feature: str = "l1_imbalance", q: float = 0.95) -> float:
    return float(np.quantile(np.abs(shap.column(feature)), q))


def tick_size_association(per_asset: Sequence) -> float:
    """Spearman correlation of (relative tick, high-quantile |SHAP|) pairs; NaN below 3 points."""
    pts = list(per_asset)
    if len(pts) < 3:
        return math.nan
    ticks, vals = zip(*pts)
    return spearman(ticks, vals)


def summary_json(shap: ShapMatrix) -> str:
    return json.dumps({
        "base_value": shap.base_value,
        "n_rows": len(shap),
        "ranking": [{"feature": f, "mean_abs_shap": s} for f, s in global_importance(shap)],
    }, indent=2)
