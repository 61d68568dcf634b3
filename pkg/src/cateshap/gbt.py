"""Gradient-boosted regression trees with exact greedy splits.

Second-order boosting in the XGBoost style: every round fits one tree to the
gradient/hessian pair of the current margin, leaves take the Newton value
``-G / (H + lambda)`` and the ensemble output is
``base_score + eta * sum(tree outputs)`` (passed through the logistic link for
the ``logistic`` loss). Each node records its cover (sum of hessians of the
training rows reaching it) and the loss reduction of its split, which the
TreeSHAP engine and the gain importance rely on.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .core import split_folds

LOSSES = ("squared", "weighted_squared", "logistic")
_MIN_GAIN = 1e-12


@dataclass(frozen=True)
class Hyperparams:
    eta: float = 0.1
    gamma: float = 0.0
    max_depth: int = 3
    colsample: float = 1.0
    subsample: float = 1.0
    min_child_weight: float = 1.0
    n_rounds: int = 100
    reg_lambda: float = 1.0

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if self.gamma < 0 or self.min_child_weight < 0 or self.reg_lambda < 0:
            raise ValueError("gamma, min_child_weight and reg_lambda must be non-negative")
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        if not (0 < self.colsample <= 1 and 0 < self.subsample <= 1):
            raise ValueError("colsample and subsample must lie in (0, 1]")
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be at least 1")


def default_grid(n_rounds: int = 1000) -> list:
    """Grid over the usual boosting knobs; rounds are chosen by early stopping."""
    return [
        Hyperparams(eta=eta, max_depth=d, subsample=ss, colsample=cs, gamma=g,
                    min_child_weight=mcw, n_rounds=n_rounds)
        for eta, d, ss, cs, g, mcw in itertools.product(
            (0.05, 0.1, 0.3), (2, 3, 4), (0.8, 1.0), (0.8, 1.0), (0.0, 1.0), (1.0, 5.0)
        )
    ]


@dataclass(frozen=True)
class RegressionTree:
    feature: np.ndarray      # -1 marks a leaf
    threshold: np.ndarray    # rows with x < threshold go left
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for k in range(self.n_nodes):
            if self.feature[k] >= 0:
                depth[self.left[k]] = depth[self.right[k]] = depth[k] + 1
        return int(depth.max())

    @classmethod
    def leaf(cls, value: float, cover: float = 1.0) -> "RegressionTree":
        return cls.from_nodes([dict(value=value, cover=cover)])

    @classmethod
    def from_nodes(cls, nodes: Sequence[dict]) -> "RegressionTree":
        """Build from dicts with keys feature/threshold/left/right/value/cover/gain."""
        get = lambda key, default, dtype: np.array([nd.get(key, default) for nd in nodes], dtype=dtype)
        return cls(
            feature=get("feature", -1, np.int64),
            threshold=get("threshold", 0.0, float),
            left=get("left", -1, np.int64),
            right=get("right", -1, np.int64),
            value=get("value", 0.0, float),
            cover=get("cover", 0.0, float),
            gain=get("gain", 0.0, float),
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value", "cover", "gain")}


@dataclass(frozen=True)
class TreeEnsemble:
    trees: tuple
    base_score: float
    learning_rate: float
    loss: str
    feature_count: int
    train_loss: tuple = field(default=(), compare=False)

    @cached_property
    def packed(self):
        """Concatenated node arrays with absolute child indices, for the jitted kernels."""
        offsets = np.cumsum([0] + [t.n_nodes for t in self.trees])
        cat = lambda name, dtype: (np.concatenate([getattr(t, name) for t in self.trees]).astype(dtype)
                                   if self.trees else np.zeros(0, dtype=dtype))
        feature = cat("feature", np.int64)
        left = cat("left", np.int64)
        right = cat("right", np.int64)
        for k, t in enumerate(self.trees):
            sl = slice(offsets[k], offsets[k + 1])
            internal = feature[sl] >= 0
            left[sl][internal] += offsets[k]
            right[sl][internal] += offsets[k]
        return dict(
            roots=offsets[:-1].astype(np.int64),
            feature=feature,
            threshold=cat("threshold", float),
            left=left,
            right=right,
            value=cat("value", float),
            cover=cat("cover", float),
        )

    def margin(self, X) -> np.ndarray:
        X = _check_matrix(X, self.feature_count)
        pk = self.packed
        return _predict_margin(X, pk["roots"], pk["feature"], pk["threshold"], pk["left"], pk["right"],
                               pk["value"], self.base_score, self.learning_rate)

    def predict(self, X) -> np.ndarray:
        m = self.margin(X)
        return _sigmoid(m) if self.loss == "logistic" else m

    def truncate(self, n_trees: int) -> "TreeEnsemble":
        return replace(self, trees=self.trees[:n_trees], train_loss=self.train_loss[:n_trees])

    def to_dict(self) -> dict:
        return dict(
            base_score=self.base_score,
            learning_rate=self.learning_rate,
            loss=self.loss,
            feature_count=self.feature_count,
            trees=[t.to_dict() for t in self.trees],
        )

    @classmethod
    def from_dict(cls, d: dict) -> "TreeEnsemble":
        trees = tuple(
            RegressionTree(**{k: np.asarray(v, dtype=np.int64 if k in ("feature", "left", "right") else float)
                              for k, v in t.items()})
            for t in d["trees"]
        )
        return cls(trees=trees, base_score=float(d["base_score"]), learning_rate=float(d["learning_rate"]),
                   loss=d["loss"], feature_count=int(d["feature_count"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TreeEnsemble":
        return cls.from_dict(json.loads(text))


def predict(ensemble: TreeEnsemble, X) -> np.ndarray:
    return ensemble.predict(X)


def _check_matrix(X, p: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != p:
        raise ValueError(f"expected a matrix with {p} columns, got shape {X.shape}")
    return X


def _sigmoid(m):
    return 1.0 / (1.0 + np.exp(-m))


@njit(cache=True)
def _predict_margin(X, roots, feature, threshold, left, right, value, base, eta):
    n = X.shape[0]
    out = np.empty(n)
    for i in range(n):
        s = 0.0
        for r in roots:
            k = r
            while feature[k] >= 0:
                if X[i, feature[k]] < threshold[k]:
                    k = left[k]
                else:
                    k = right[k]
            s += value[k]
        out[i] = base + eta * s
    return out


@njit(cache=True)
def _grow_tree(X, order, g, h, in_sample, features, max_depth, lam, gamma, min_child_weight):
    """Level-wise exact greedy growth. Returns node arrays and the node count."""
    n = X.shape[0]
    max_nodes = 2 ** (max_depth + 1) - 1
    feat = np.full(max_nodes, -1, dtype=np.int64)
    thr = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    G = np.zeros(max_nodes)
    H = np.zeros(max_nodes)
    gain = np.zeros(max_nodes)
    open_ = np.zeros(max_nodes, dtype=np.bool_)

    node_of = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        if in_sample[i]:
            node_of[i] = 0
            G[0] += g[i]
            H[0] += h[i]
    n_nodes = 1
    open_[0] = max_depth > 0

    best_gain = np.zeros(max_nodes)
    best_feat = np.full(max_nodes, -1, dtype=np.int64)
    best_thr = np.zeros(max_nodes)
    best_GL = np.zeros(max_nodes)
    best_HL = np.zeros(max_nodes)
    GL = np.zeros(max_nodes)
    HL = np.zeros(max_nodes)
    last = np.zeros(max_nodes)
    seen = np.zeros(max_nodes, dtype=np.bool_)

    for depth in range(max_depth):
        any_open = False
        for k in range(n_nodes):
            if open_[k]:
                any_open = True
                best_gain[k] = 0.0
                best_feat[k] = -1
        if not any_open:
            break
        for f in features:
            for k in range(n_nodes):
                GL[k] = 0.0
                HL[k] = 0.0
                seen[k] = False
            col = order[f]
            for t in range(n):
                i = col[t]
                k = node_of[i]
                if k < 0 or not open_[k]:
                    continue
                v = X[i, f]
                if seen[k] and v > last[k]:
                    hl = HL[k]
                    hr = H[k] - hl
                    if hl >= min_child_weight and hr >= min_child_weight:
                        gl = GL[k]
                        gr = G[k] - gl
                        gn = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - G[k] * G[k] / (H[k] + lam))
                        if gn > best_gain[k]:
                            best_gain[k] = gn
                            best_feat[k] = f
                            tv = 0.5 * (last[k] + v)
                            if tv <= last[k]:
                                tv = v
                            best_thr[k] = tv
                            best_GL[k] = gl
                            best_HL[k] = hl
                GL[k] += g[i]
                HL[k] += h[i]
                last[k] = v
                seen[k] = True

        level_end = n_nodes
        for k in range(level_end):
            if not open_[k]:
                continue
            open_[k] = False
            if best_feat[k] < 0 or best_gain[k] <= gamma or best_gain[k] <= _MIN_GAIN:
                continue
            lc = n_nodes
            rc = n_nodes + 1
            n_nodes += 2
            feat[k] = best_feat[k]
            thr[k] = best_thr[k]
            gain[k] = best_gain[k]
            left[k] = lc
            right[k] = rc
            G[lc] = best_GL[k]
            H[lc] = best_HL[k]
            G[rc] = G[k] - best_GL[k]
            H[rc] = H[k] - best_HL[k]
            open_[lc] = depth + 1 < max_depth
            open_[rc] = depth + 1 < max_depth
        for i in range(n):
            k = node_of[i]
            if k >= 0 and feat[k] >= 0 and k < level_end:
                if X[i, feat[k]] < thr[k]:
                    node_of[i] = left[k]
                else:
                    node_of[i] = right[k]

    value = np.empty(n_nodes)
    for k in range(n_nodes):
        value[k] = -G[k] / (H[k] + lam)
    return feat[:n_nodes], thr[:n_nodes], left[:n_nodes], right[:n_nodes], value, H[:n_nodes].copy(), gain[:n_nodes], node_of


def _grad_hess(loss, margin, y, w):
    if loss == "logistic":
        prob = _sigmoid(margin)
        return w * (prob - y), np.maximum(w * prob * (1.0 - prob), 1e-16)
    return w * (margin - y), w.copy()


def _loss_value(loss, margin, y, w):
    if loss == "logistic":
        prob = np.clip(_sigmoid(margin), 1e-15, 1 - 1e-15)
        per = -(y * np.log(prob) + (1 - y) * np.log(1 - prob))
    else:
        per = (margin - y) ** 2
    return float(np.sum(w * per) / np.sum(w))


def _base_score(loss, y, w):
    mean = float(np.sum(w * y) / np.sum(w))
    if loss == "logistic":
        mean = min(max(mean, 1e-6), 1 - 1e-6)
        return float(np.log(mean / (1 - mean)))
    return mean


def fit_gbt(
    X,
    y,
    weights=None,
    hp: Hyperparams = Hyperparams(),
    loss: str = "squared",
    rng: Optional[np.random.Generator] = None,
    eval_set=None,
    early_stopping_rounds: Optional[int] = None,
) -> TreeEnsemble:
    """Fit a boosted ensemble.

    ``eval_set`` is an optional ``(X, y[, w])`` tuple; with
    ``early_stopping_rounds`` the ensemble is truncated at the round with the
    lowest evaluation loss once that many rounds pass without improvement.
    Rows of weight zero are dropped before fitting.
    """
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (n, p) with one target per row")
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite target")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature value")
    if loss == "weighted_squared" and weights is None:
        raise ValueError("weighted_squared loss requires weights")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != y.shape or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite, non-negative and one per row")
    if w.sum() <= 0:
        raise ValueError("zero total weight")
    keep = w > 0
    if not keep.all():
        X, y, w = X[keep], y[keep], w[keep]
    n, p = X.shape
    if n < 2:
        raise ValueError("need at least two rows with positive weight")
    if loss == "logistic" and not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic loss needs 0/1 targets")
    rng = rng if rng is not None else np.random.default_rng(0)

    Xc = np.ascontiguousarray(X)
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)
    base = _base_score(loss, y, w)
    margin = np.full(n, base)

    if eval_set is not None:
        Xe = np.asarray(eval_set[0], dtype=float)
        ye = np.asarray(eval_set[1], dtype=float)
        we = np.ones_like(ye) if len(eval_set) < 3 or eval_set[2] is None else np.asarray(eval_set[2], dtype=float)
        margin_e = np.full(len(ye), base)
        eval_curve = []

    n_sub = max(2, int(round(hp.subsample * n)))
    n_col = max(1, int(round(hp.colsample * p)))
    all_rows = np.ones(n, dtype=np.bool_)
    all_cols = np.arange(p, dtype=np.int64)
    trees, train_curve = [], []
    best_round, best_eval, stall = 0, np.inf, 0
    for _ in range(hp.n_rounds):
        g, h = _grad_hess(loss, margin, y, w)
        if n_sub < n:
            in_sample = np.zeros(n, dtype=np.bool_)
            in_sample[rng.choice(n, n_sub, replace=False)] = True
        else:
            in_sample = all_rows
        cols = np.sort(rng.choice(p, n_col, replace=False)).astype(np.int64) if n_col < p else all_cols
        feat, thr, lft, rgt, val, cov, gn, node_of = _grow_tree(
            Xc, order, g, h, in_sample, cols, hp.max_depth, hp.reg_lambda, hp.gamma, hp.min_child_weight)
        tree = RegressionTree(feature=feat, threshold=thr, left=lft, right=rgt, value=val, cover=cov, gain=gn)
        trees.append(tree)
        margin = margin + hp.eta * _tree_outputs(tree, Xc)
        train_curve.append(_loss_value(loss, margin, y, w))
        if eval_set is not None:
            margin_e = margin_e + hp.eta * _tree_outputs(tree, Xe)
            eval_curve.append(_loss_value(loss, margin_e, ye, we))
            if eval_curve[-1] < best_eval - 1e-12:
                best_eval, best_round, stall = eval_curve[-1], len(trees), 0
            else:
                stall += 1
                if early_stopping_rounds is not None and stall >= early_stopping_rounds:
                    break

    ens = TreeEnsemble(trees=tuple(trees), base_score=base, learning_rate=hp.eta, loss=loss,
                       feature_count=p, train_loss=tuple(train_curve))
    if eval_set is not None:
        object.__setattr__(ens, "eval_loss", tuple(eval_curve))
        if early_stopping_rounds is not None:
            ens = ens.truncate(max(best_round, 1))
            object.__setattr__(ens, "eval_loss", tuple(eval_curve))
    return ens


def _tree_outputs(tree: RegressionTree, X) -> np.ndarray:
    return _predict_margin(X, np.zeros(1, dtype=np.int64), tree.feature, tree.threshold, tree.left,
                           tree.right, tree.value, 0.0, 1.0)


def gain_vip(ensemble: TreeEnsemble) -> np.ndarray:
    """Total split gain per feature, normalised to sum to one."""
    vip = np.zeros(ensemble.feature_count)
    for t in ensemble.trees:
        internal = t.feature >= 0
        np.add.at(vip, t.feature[internal], t.gain[internal])
    total = vip.sum()
    return vip / total if total > 0 else vip


def cv_loss(loss: str, y, pred_margin, w=None) -> float:
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    return _loss_value(loss, np.asarray(pred_margin, dtype=float), y, w)


def tune_cv(
    X,
    y,
    weights=None,
    loss: str = "squared",
    grid: Sequence[Hyperparams] = (),
    K: int = 5,
    rng: Optional[np.random.Generator] = None,
    select_rounds: bool = False,
    patience: int = 50,
) -> Hyperparams:
    """Pick the grid element with the lowest mean K-fold validation loss.

    All grid elements share one fold split. With ``select_rounds`` each fold
    is boosted up to ``n_rounds`` with early stopping, the per-round validation
    curves are averaged across folds and the returned element carries the
    round count minimising that mean curve. Ties go to the earliest element.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty hyperparameter grid")
    if K < 2:
        raise ValueError("K must be at least 2")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    rng = rng if rng is not None else np.random.default_rng(0)
    folds = split_folds(len(y), K, rng)
    seeds = rng.integers(0, 2**63 - 1, size=(len(grid), K))

    best_hp, best_score = None, np.inf
    for gi, hp in enumerate(grid):
        curves = []
        for k in range(K):
            tr, va = folds.train_index(k), folds.test_index(k)
            if w[tr].sum() <= 0 or w[va].sum() <= 0:
                continue
            ens = fit_gbt(X[tr], y[tr], w[tr], hp, loss, np.random.default_rng(seeds[gi, k]),
                          eval_set=(X[va], y[va], w[va]),
                          early_stopping_rounds=patience if select_rounds else None)
            curves.append(np.asarray(ens.eval_loss))
        if not curves:
            continue
        if select_rounds:
            length = max(len(c) for c in curves)
            padded = np.vstack([np.pad(c, (0, length - len(c)), mode="edge") for c in curves])
            mean_curve = padded.mean(axis=0)
            r = int(np.argmin(mean_curve))
            score, cand = float(mean_curve[r]), replace(hp, n_rounds=r + 1)
        else:
            score, cand = float(np.mean([c[-1] for c in curves])), hp
        if score < best_score:
            best_hp, best_score = cand, score
    if best_hp is None:
        raise ValueError("no fold had positive weight on both sides")
    return best_hp


def hyperparams_to_dict(hp: Hyperparams) -> dict:
    return asdict(hp)
