"""A simplified honest causal forest.

Each tree draws a subsample, splits it into a split half and an estimation
half, grows greedily on the split half by maximising
``n_L * n_R * (tau_L - tau_R)**2`` (tau = difference of arm means) and fills
its leaves with arm-mean differences from the estimation half only.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from numba import njit

from .core import Dataset, DataError


@dataclass(frozen=True)
class CFParams:
    num_trees: int = 500
    min_per_arm: int = 5
    max_depth: int = 8
    mtry: Optional[int] = None      # None -> ceil(sqrt(p))
    subsample: float = 0.5
    honesty: float = 0.5

    def __post_init__(self):
        if self.num_trees < 1 or self.min_per_arm < 1 or self.max_depth < 1:
            raise ValueError("num_trees, min_per_arm and max_depth must be positive")
        if not (0 < self.subsample <= 1 and 0 < self.honesty < 1):
            raise ValueError("subsample must lie in (0, 1] and honesty in (0, 1)")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be positive")


@dataclass(frozen=True)
class CausalTree:
    feature: np.ndarray      # -1 marks a leaf
    threshold: np.ndarray    # x < threshold goes left
    left: np.ndarray
    right: np.ndarray
    tau: np.ndarray          # estimation-half arm-mean difference
    n_treated: np.ndarray
    n_control: np.ndarray
    depth: np.ndarray        # root has depth 1

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("feature", "threshold", "left", "right", "tau", "n_treated", "n_control", "depth")}

    @classmethod
    def from_dict(cls, d: dict) -> "CausalTree":
        ints = ("feature", "left", "right", "n_treated", "n_control", "depth")
        return cls(**{k: np.asarray(v, dtype=np.int64 if k in ints else float) for k, v in d.items()})


@dataclass(frozen=True)
class CausalForest:
    trees: tuple
    feature_count: int
    params: CFParams
    # per-tree (split rows, estimation rows); kept in memory for audits, not serialised
    samples: Optional[tuple] = None

    def params_dict(self) -> dict:
        return asdict(self.params)

    @cached_property
    def packed(self):
        offs = np.cumsum([0] + [len(t.feature) for t in self.trees])
        cat = lambda name: np.concatenate([getattr(t, name) for t in self.trees])
        shift = np.repeat(offs[:-1], [len(t.feature) for t in self.trees])
        left, right = cat("left"), cat("right")
        internal = left >= 0
        left = np.where(internal, left + shift, -1)
        right = np.where(internal, right + shift, -1)
        return (offs[:-1].astype(np.int64), cat("feature"), cat("threshold"),
                left.astype(np.int64), right.astype(np.int64), cat("tau"))

    def to_dict(self) -> dict:
        return {"feature_count": self.feature_count, "params": self.params_dict(),
                "trees": [t.to_dict() for t in self.trees]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "CausalForest":
        return cls(trees=tuple(CausalTree.from_dict(t) for t in d["trees"]),
                   feature_count=int(d["feature_count"]), params=CFParams(**d["params"]))


@njit(cache=True)
def _arm_stats(rows, y, a):
    s1 = 0.0
    s0 = 0.0
    n1 = 0
    n0 = 0
    for r in rows:
        if a[r] == 1:
            s1 += y[r]
            n1 += 1
        else:
            s0 += y[r]
            n0 += 1
    return s1, s0, n1, n0


@njit(cache=True)
def _partition(buf, lo, hi, X, f, thr, tmp):
    """Stable in-place partition of buf[lo:hi] by X[., f] < thr; returns the split point."""
    m = 0
    for i in range(lo, hi):
        if X[buf[i], f] < thr:
            tmp[m] = buf[i]
            m += 1
    mid = lo + m
    for i in range(lo, hi):
        if not X[buf[i], f] < thr:
            tmp[m] = buf[i]
            m += 1
    buf[lo:hi] = tmp[:m]
    return mid


@njit(cache=True)
def _grow_causal_tree(X, y, a, srows, erows, keys, mtry, min_arm, max_depth):
    max_nodes = 2 ** (max_depth + 1) - 1
    feature = -np.ones(max_nodes, dtype=np.int64)
    threshold = np.zeros(max_nodes)
    left = -np.ones(max_nodes, dtype=np.int64)
    right = -np.ones(max_nodes, dtype=np.int64)
    tau = np.zeros(max_nodes)
    nt = np.zeros(max_nodes, dtype=np.int64)
    nc = np.zeros(max_nodes, dtype=np.int64)
    depth = np.zeros(max_nodes, dtype=np.int64)
    s_lo = np.zeros(max_nodes, dtype=np.int64)
    s_hi = np.zeros(max_nodes, dtype=np.int64)
    e_lo = np.zeros(max_nodes, dtype=np.int64)
    e_hi = np.zeros(max_nodes, dtype=np.int64)
    sbuf = srows.copy()
    ebuf = erows.copy()
    tmp = np.empty(max(len(sbuf), len(ebuf)), dtype=np.int64)
    s_hi[0] = len(sbuf)
    e_hi[0] = len(ebuf)
    depth[0] = 1
    n_nodes = 1
    k = 0
    while k < n_nodes:
        es1, es0, en1, en0 = _arm_stats(ebuf[e_lo[k]:e_hi[k]], y, a)
        tau[k] = es1 / en1 - es0 / en0
        nt[k] = en1
        nc[k] = en0
        if depth[k] > max_depth:
            k += 1
            continue
        srow = sbuf[s_lo[k]:s_hi[k]]
        erow = ebuf[e_lo[k]:e_hi[k]]
        S1, S0, N1, N0 = _arm_stats(srow, y, a)
        feats = np.sort(np.argsort(keys[k])[:mtry])
        best = 0.0
        best_f = -1
        best_t = 0.0
        for f in feats:
            xs = X[srow, f]
            os = np.argsort(xs, kind="mergesort")
            xe = np.sort(X[erow, f])
            ae = a[erow][np.argsort(X[erow, f], kind="mergesort")]
            l1 = 0.0
            l0 = 0.0
            c1 = 0
            c0 = 0
            ep = 0
            d1 = 0
            d0 = 0
            for i in range(len(os) - 1):
                r = srow[os[i]]
                if a[r] == 1:
                    l1 += y[r]
                    c1 += 1
                else:
                    l0 += y[r]
                    c0 += 1
                lo_v = xs[os[i]]
                hi_v = xs[os[i + 1]]
                if not lo_v < hi_v:
                    continue
                if c1 < min_arm or c0 < min_arm or N1 - c1 < min_arm or N0 - c0 < min_arm:
                    continue
                thr = 0.5 * (lo_v + hi_v)
                if not thr > lo_v:
                    thr = hi_v
                while ep < len(xe) and xe[ep] < thr:
                    if ae[ep] == 1:
                        d1 += 1
                    else:
                        d0 += 1
                    ep += 1
                if d1 < min_arm or d0 < min_arm or en1 - d1 < min_arm or en0 - d0 < min_arm:
                    continue
                tl = l1 / c1 - l0 / c0
                tr = (S1 - l1) / (N1 - c1) - (S0 - l0) / (N0 - c0)
                nl = c1 + c0
                nr = N1 + N0 - nl
                crit = nl * nr * (tl - tr) ** 2
                if crit > best:
                    best = crit
                    best_f = f
                    best_t = thr
        if best_f < 0 or n_nodes + 2 > max_nodes:
            k += 1
            continue
        feature[k] = best_f
        threshold[k] = best_t
        s_mid = _partition(sbuf, s_lo[k], s_hi[k], X, best_f, best_t, tmp)
        e_mid = _partition(ebuf, e_lo[k], e_hi[k], X, best_f, best_t, tmp)
        L = n_nodes
        R = n_nodes + 1
        n_nodes += 2
        left[k] = L
        right[k] = R
        depth[L] = depth[k] + 1
        depth[R] = depth[k] + 1
        s_lo[L], s_hi[L], s_lo[R], s_hi[R] = s_lo[k], s_mid, s_mid, s_hi[k]
        e_lo[L], e_hi[L], e_lo[R], e_hi[R] = e_lo[k], e_mid, e_mid, e_hi[k]
        k += 1
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
            tau[:n_nodes], nt[:n_nodes], nc[:n_nodes], depth[:n_nodes])


@njit(cache=True)
def _predict_forest(X, roots, feature, threshold, left, right, tau):
    n = X.shape[0]
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for r in roots:
            k = r
            while feature[k] >= 0:
                k = left[k] if X[i, feature[k]] < threshold[k] else right[k]
            acc += tau[k]
        out[i] = acc / len(roots)
    return out


def fit_causal_forest(ds: Dataset, params: CFParams = CFParams(), rng=None) -> CausalForest:
    rng = rng if rng is not None else np.random.default_rng(0)
    X = np.ascontiguousarray(ds.features)
    y = np.ascontiguousarray(ds.outcome)
    a = np.ascontiguousarray(ds.treatment.astype(np.int64))
    n, p = X.shape
    mtry = min(p, params.mtry or math.ceil(math.sqrt(p)))
    n_sub = max(2, int(round(params.subsample * n)))
    n_split = int(round(params.honesty * n_sub))
    if n_split < 2 or n_sub - n_split < 2:
        raise DataError("subsample too small for an honest split")
    max_nodes = 2 ** (params.max_depth + 1) - 1
    seeds = rng.integers(0, 2**63 - 1, size=params.num_trees)
    trees, samples = [], []
    for t in range(params.num_trees):
        r = np.random.default_rng(seeds[t])
        sub = r.choice(n, n_sub, replace=False)
        srows, erows = np.sort(sub[:n_split]), np.sort(sub[n_split:])
        for rows in (srows, erows):
            n1 = int(a[rows].sum())
            if n1 < params.min_per_arm or len(rows) - n1 < params.min_per_arm:
                raise DataError("cannot satisfy min_per_arm at the root of a causal tree")
        keys = r.random((max_nodes, p))
        parts = _grow_causal_tree(X, y, a, srows, erows, keys, mtry, params.min_per_arm, params.max_depth)
        trees.append(CausalTree(*parts))
        samples.append((srows, erows))
    return CausalForest(trees=tuple(trees), feature_count=p, params=params, samples=tuple(samples))


def predict_cf(forest: CausalForest, X) -> np.ndarray:
    if not forest.trees:
        raise ValueError("cannot predict with an empty forest")
    X = np.ascontiguousarray(np.asarray(X, dtype=float))
    if X.ndim != 2 or X.shape[1] != forest.feature_count:
        raise ValueError(f"expected a matrix with {forest.feature_count} columns")
    return _predict_forest(X, *forest.packed)


def cf_vip(forest: CausalForest, max_depth_counted: int = 4, decay: float = 2.0) -> np.ndarray:
    """Depth-discounted split counts per feature, normalised to sum to one."""
    vip = np.zeros(forest.feature_count)
    for t in forest.trees:
        mask = (t.feature >= 0) & (t.depth <= max_depth_counted)
        np.add.at(vip, t.feature[mask], decay ** (-t.depth[mask].astype(float)))
    total = vip.sum()
    return vip / total if total > 0 else vip
