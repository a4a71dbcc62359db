"""Purged walk-forward evaluation with training-window-only hyperparameter search."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import LobshapError, NumericError
from .features import FeatureFrame
from .gbdt import GmadlParams, Hyperparams, TreeEnsemble, fit, gmadl, hit_rate, r2

__all__ = [
    "Fold", "FoldPlan", "make_plan", "inner_plan", "SearchSpace", "search",
    "score_candidates", "FoldResult", "OuterResult", "run_outer", "Hyperparams",
]


@dataclass(frozen=True)
class Fold:
    train: tuple  # [t0, t1)
    purge: tuple  # [t1, t1 + gap)
    test: tuple  # [t1 + gap, t2)

    def to_dict(self) -> dict:
        return {"train": list(self.train), "purge": list(self.purge), "test": list(self.test)}


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple
    gap: int
    train_len: int
    test_len: int
    step: int
    n: int

    def __len__(self) -> int:
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    def check(self) -> None:
        prev_end = -1
        for k, f in enumerate(self.folds):
            if not f.train[1] - 1 + self.gap < f.test[0]:
                raise ValueError(f"fold {k}: purge gap violated")
            if f.test[0] < prev_end:
                raise ValueError(f"fold {k}: test range overlaps the previous fold")
            if f.test[1] > self.n:
                raise ValueError(f"fold {k}: test range beyond grid")
            prev_end = f.test[1]

    def test_indices(self) -> np.ndarray:
        if not self.folds:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.arange(*f.test) for f in self.folds])

    def to_dict(self) -> dict:
        return {"n": self.n, "train_len": self.train_len, "test_len": self.test_len,
                "gap": self.gap, "step": self.step,
                "folds": [f.to_dict() for f in self.folds]}


def make_plan(n: int, train_len: int, test_len: int, gap: int, step: int) -> FoldPlan:
    """Rolling folds: fold k trains on [k*step, k*step + train_len), then gap, then test."""
    if train_len < 1 or test_len < 1 or gap < 0:
        raise ValueError("train_len and test_len must be >= 1 and gap >= 0")
    if step < 1:
        raise ValueError("step must be >= 1")
    if step < test_len:
        raise ValueError(f"step={step} < test_len={test_len} would overlap test ranges")
    need = train_len + gap + test_len
    if need > n:
        raise ValueError(f"grid of length {n} too short: need at least {need}")
    folds = []
    start = 0
    while start + need <= n:
        t1 = start + train_len
        folds.append(Fold((start, t1), (t1, t1 + gap), (t1 + gap, t1 + gap + test_len)))
        start += step
    plan = FoldPlan(tuple(folds), gap, train_len, test_len, step, n)
    plan.check()
    return plan


def inner_plan(n_train: int, gap: int, k: int = 3) -> FoldPlan:
    """k rolling folds carved from a training window of length ``n_train``; the last test ends at n_train."""
    test_len = n_train // (k + 2)
    train_len = n_train - gap - k * test_len
    if test_len < 1 or train_len < 1:
        raise ValueError(f"training window of {n_train} too short for {k} inner folds with gap {gap}")
    return make_plan(n_train, train_len, test_len, gap, test_len)


# ---------------------------------------------------------------------------
# search


def _log_uniform(rng, lo, hi):
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


@dataclass(frozen=True)
class SearchSpace:
    depth: tuple = (1, 8)
    iterations: tuple = (10, 1000)  # log-uniform
    learning_rate: tuple = (1e-3, 0.3)  # log-uniform
    l2_leaf: tuple = (0.0, 100.0)
    subsample: tuple = (0.5, 1.0)
    bins: tuple = (32, 64, 128, 256)  # choices

    def __post_init__(self):
        ranges = Hyperparams.RANGES
        for name in ("depth", "iterations", "learning_rate", "l2_leaf", "subsample"):
            lo, hi = getattr(self, name)
            rlo, rhi = ranges[name]
            if not (rlo <= lo <= hi <= rhi):
                raise ValueError(f"search range for {name} must lie inside [{rlo}, {rhi}]")
        if self.subsample[0] <= 0:
            raise ValueError("subsample lower bound must be > 0")
        if not self.bins or any(not 16 <= b <= 512 for b in self.bins):
            raise ValueError("bins choices must lie in [16, 512]")

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown search-space keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) for k, v in d.items()})

    def sample(self, rng: np.random.Generator) -> Hyperparams:
        it = _log_uniform(rng, *self.iterations)
        return Hyperparams(
            depth=int(rng.integers(self.depth[0], self.depth[1] + 1)),
            iterations=int(min(self.iterations[1], max(self.iterations[0], round(it)))),
            learning_rate=_log_uniform(rng, *self.learning_rate),
            l2_leaf=float(rng.uniform(*self.l2_leaf)),
            subsample=float(rng.uniform(*self.subsample)) if self.subsample[0] < self.subsample[1]
            else float(self.subsample[0]),
            bins=int(self.bins[int(rng.integers(len(self.bins)))]),
        )

    def draws(self, budget: int, seed: int) -> list:
        rng = np.random.default_rng(seed)
        return [self.sample(rng) for _ in range(budget)]


def _valid_rows(X, y, lo, hi, valid=None):
    rows = np.arange(lo, hi)
    if valid is not None:
        rows = rows[valid[lo:hi]]
    return X[rows], y[rows]


def score_candidates(X, y, candidates: Sequence[Hyperparams], gap: int, seed: int = 0,
                     inner_folds: int = 3, valid=None, gmadl_params: GmadlParams = GmadlParams(),
                     metric: str = "gmadl", feature_names=None) -> list:
    """Mean inner-fold score per candidate (lower is better; NaN if the candidate failed).

    ``X`` and ``y`` must already be restricted to the outer training window.
    For ``metric="r2"`` the returned score is ``-r2`` so that lower stays better.
    """
    if metric not in ("gmadl", "r2"):
        raise ValueError(f"unknown selection metric {metric!r}")
    plan = inner_plan(len(y), gap, inner_folds)
    scores = []
    for hp in candidates:
        per_fold = []
        try:
            for f in plan:
                Xtr, ytr = _valid_rows(X, y, *f.train, valid)
                Xte, yte = _valid_rows(X, y, *f.test, valid)
                if len(yte) == 0:
                    continue
                model = fit(Xtr, ytr, hp, seed=seed, feature_names=feature_names)
                pred = model.predict(Xte)
                if metric == "gmadl":
                    per_fold.append(gmadl(yte, pred, gmadl_params))
                else:
                    per_fold.append(-r2(yte, pred))
        except LobshapError:
            per_fold = []
        s = float(np.mean(per_fold)) if per_fold else math.nan
        scores.append(s if math.isfinite(s) else math.nan)
    return scores


def search(X, y, space: SearchSpace, budget: int, seed: int, gap: int, inner_folds: int = 3,
           valid=None, gmadl_params: GmadlParams = GmadlParams(), metric: str = "gmadl",
           feature_names=None):
    """Seeded random search; returns (winner, candidates, scores).

    The earliest draw wins ties; failed candidates score NaN and never win.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    candidates = space.draws(budget, seed)
    scores = score_candidates(X, y, candidates, gap, seed, inner_folds, valid,
                              gmadl_params, metric, feature_names)
    best = None
    for i, s in enumerate(scores):
        if not math.isnan(s) and (best is None or s < scores[best]):
            best = i
    if best is None:
        raise NumericError("every search candidate failed to train")
    return candidates[best], candidates, scores


# ---------------------------------------------------------------------------
# outer loop


def _fold_seed(seed: int, fold_id: int) -> int:
    return int(np.random.SeedSequence([seed, fold_id]).generate_state(1)[0])


def _metrics(y, pred, gp):
    m = np.isfinite(pred) & np.isfinite(y)
    if not m.any():
        return {"r2": math.nan, "gmadl": math.nan, "hit_rate": math.nan, "n": 0}
    return {"r2": r2(y[m], pred[m]), "gmadl": gmadl(y[m], pred[m], gp),
            "hit_rate": hit_rate(y[m], pred[m]), "n": int(m.sum())}


@dataclass
class FoldResult:
    fold_id: int
    fold: Fold
    hyperparams: Hyperparams
    model: TreeEnsemble
    test_index: np.ndarray
    pred: np.ndarray  # NaN where the test row is not valid
    metrics: dict
    search_scores: list = field(default_factory=list)

    @property
    def model_id(self) -> str:
        return self.model.model_id


@dataclass
class OuterResult:
    plan: FoldPlan
    folds: list
    oof_index: np.ndarray
    oof_pred: np.ndarray
    oof_label: np.ndarray
    oof_fold: np.ndarray
    grid_ts: np.ndarray
    pooled: dict
    seed: int
    budget: int
    metric: str = "gmadl"

    def oof_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"grid_ts": self.grid_ts[self.oof_index], "label": self.oof_label,
                             "pred": self.oof_pred, "fold_id": self.oof_fold})

    def write_oof_csv(self, path) -> Path:
        path = Path(path)
        self.oof_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n",
                                na_rep="")
        return path

    def manifest(self) -> dict:
        return {
            "plan": self.plan.to_dict(),
            "seed": self.seed,
            "budget": self.budget,
            "selection_metric": self.metric,
            "folds": [{
                "fold_id": r.fold_id,
                "model_id": r.model_id,
                "hyperparams": r.hyperparams.to_dict(),
                "search_scores": [None if math.isnan(s) else s for s in r.search_scores],
                "metrics": _jsonable(r.metrics),
            } for r in self.folds],
            "pooled": _jsonable(self.pooled),
        }

    def write_manifest(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return path


def _jsonable(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def run_outer(frame: FeatureFrame, plan: FoldPlan, budget: int = 30, seed: int = 0,
              space: SearchSpace = SearchSpace(), gmadl_params: GmadlParams = GmadlParams(),
              inner_folds: int = 3, metric: str = "gmadl") -> OuterResult:
    """Search and fit on each fold's training window, predict its test window."""
    if plan.n != len(frame):
        raise ValueError(f"plan built for {plan.n} rows, frame has {len(frame)}")
    plan.check()
    results = []
    for k, f in enumerate(plan):
        try:
            t0, t1 = f.train
            # only rows before the purge start are visible to search and fit
            Xtr, ytr, vtr = frame.X[t0:t1], frame.label[t0:t1], frame.valid[t0:t1]
            fseed = _fold_seed(seed, k)
            hp, _, scores = search(Xtr, ytr, space, budget, fseed, plan.gap, inner_folds,
                                   vtr, gmadl_params, metric, frame.feature_names)
            model = fit(Xtr[vtr], ytr[vtr], hp, seed=fseed, feature_names=frame.feature_names)
        except LobshapError as e:
            raise type(e)(f"fold {k}: {e}") from e
        idx = np.arange(*f.test)
        pred = np.full(len(idx), np.nan)
        ok = frame.valid[idx]
        if ok.any():
            pred[ok] = model.predict(frame.X[idx[ok]])
        results.append(FoldResult(k, f, hp, model, idx, pred,
                                  _metrics(frame.label[idx], pred, gmadl_params), scores))
    oof_index = plan.test_indices()
    oof_pred = np.concatenate([r.pred for r in results]) if results else np.zeros(0)
    oof_fold = np.concatenate([np.full(len(r.test_index), r.fold_id) for r in results]) \
        if results else np.zeros(0, dtype=np.int64)
    oof_label = frame.label[oof_index]
    pooled = _metrics(oof_label, oof_pred, gmadl_params)
    return OuterResult(plan, results, oof_index, oof_pred, oof_label, oof_fold,
                       frame.grid_ts, pooled, seed, budget, metric)
