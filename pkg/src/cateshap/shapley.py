"""Shapley attributions: exact TreeSHAP, KernelSHAP and a brute-force reference.

``tree_shap`` is the path-dependent algorithm: absent features are integrated
out by following both children of a split in proportion to their training
cover. ``kernel_shap`` works for any prediction surface and uses the marginal
(interventional) value function, replacing absent features by background rows.
``brute_force_shap`` enumerates every coalition of an arbitrary game and is
the oracle the other two are tested against.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit

from .gbt import TreeEnsemble, _check_matrix


@dataclass(frozen=True)
class ShapMatrix:
    phi: np.ndarray
    base_value: float
    predictions: np.ndarray
    feature_names: tuple = ()
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "phi", np.atleast_2d(np.asarray(self.phi, dtype=float)))
        object.__setattr__(self, "predictions", np.asarray(self.predictions, dtype=float))
        if not self.feature_names:
            object.__setattr__(self, "feature_names", tuple(f"x{j + 1}" for j in range(self.phi.shape[1])))

    def local_accuracy_gap(self) -> float:
        return float(np.max(np.abs(self.base_value + self.phi.sum(axis=1) - self.predictions)))

    def to_csv(self, path) -> None:
        """Long format ``instance_id,feature,phi`` plus a ``<stem>_base.csv`` sidecar."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["instance_id", "feature", "phi"])
            for i, row in enumerate(self.phi):
                for name, v in zip(self.feature_names, row):
                    w.writerow([i, name, f"{v:.17g}"])
        with path.with_name(path.stem + "_base.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["base_value"])
            w.writerow([f"{self.base_value:.17g}"])

    @classmethod
    def from_csv(cls, path) -> "ShapMatrix":
        path = Path(path)
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        names = list(dict.fromkeys(r["feature"] for r in rows))
        n = len(rows) // len(names)
        phi = np.array([float(r["phi"]) for r in rows]).reshape(n, len(names))
        with path.with_name(path.stem + "_base.csv").open(newline="") as fh:
            base = float(list(csv.DictReader(fh))[0]["base_value"])
        return cls(phi=phi, base_value=base, predictions=base + phi.sum(axis=1), feature_names=tuple(names))


@dataclass(frozen=True)
class SummaryShap:
    importance: np.ndarray
    normalized: np.ndarray
    feature_names: tuple = field(default=())

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "importance", "normalized"])
            for name, imp, nrm in zip(self.feature_names, self.importance, self.normalized):
                w.writerow([name, f"{imp:.17g}", f"{nrm:.17g}"])


def minmax(v) -> np.ndarray:
    """Rescale to [0, 1]; a constant vector maps to all zeros."""
    v = np.asarray(v, dtype=float)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def summary_shap(shap: ShapMatrix) -> SummaryShap:
    if shap.phi.shape[0] < 1:
        raise ValueError("need at least one instance")
    importance = np.mean(np.abs(shap.phi), axis=0)
    return SummaryShap(importance=importance, normalized=minmax(importance), feature_names=shap.feature_names)


# --- brute force -----------------------------------------------------------

def brute_force_shap(value_fn: Callable[[frozenset], float], p: int) -> np.ndarray:
    """Shapley values of a p-player game by enumerating all 2^p coalitions."""
    if p > 16:
        raise ValueError("brute force enumeration is limited to p <= 16")
    if p < 1:
        raise ValueError("need at least one player")
    masks = np.arange(2 ** p)
    values = np.array([value_fn(frozenset(j for j in range(p) if m >> j & 1)) for m in masks], dtype=float)
    size = np.array([bin(m).count("1") for m in masks])
    fact = [math.factorial(k) for k in range(p + 1)]
    weight = np.array([fact[s] * fact[p - s - 1] / fact[p] if s < p else 0.0 for s in range(p + 1)])
    phi = np.zeros(p)
    for j in range(p):
        without = masks[(masks >> j & 1) == 0]
        phi[j] = np.sum(weight[size[without]] * (values[without | (1 << j)] - values[without]))
    return phi


def tree_value_function(ensemble: TreeEnsemble, x) -> Callable[[frozenset], float]:
    """Cover-conditional expectation of the ensemble margin given features in S.

    Features in S follow ``x``'s branch; any other split is averaged over both
    children weighted by training cover. This is the game TreeSHAP solves.
    """
    x = np.asarray(x, dtype=float)

    def expect(tree, k, S):
        f = tree.feature[k]
        if f < 0:
            return tree.value[k]
        l, r = tree.left[k], tree.right[k]
        if f in S:
            return expect(tree, l if x[f] < tree.threshold[k] else r, S)
        c = tree.cover[k]
        return (tree.cover[l] * expect(tree, l, S) + tree.cover[r] * expect(tree, r, S)) / c

    def value(S):
        return ensemble.base_score + ensemble.learning_rate * sum(expect(t, 0, S) for t in ensemble.trees)

    return value


def marginal_value_function(predict_fn, background, x) -> Callable[[frozenset], float]:
    """Mean prediction with features outside S replaced by background rows."""
    background = np.asarray(background, dtype=float)
    x = np.asarray(x, dtype=float)

    def value(S):
        rows = background.copy()
        idx = list(S)
        rows[:, idx] = x[idx]
        return float(np.mean(predict_fn(rows)))

    return value


# --- TreeSHAP --------------------------------------------------------------

@njit(cache=True)
def _extend(pf, pz, po, pw, off, d, zero, one, feat):
    pf[off + d] = feat
    pz[off + d] = zero
    po[off + d] = one
    pw[off + d] = 1.0 if d == 0 else 0.0
    for i in range(d - 1, -1, -1):
        pw[off + i + 1] += one * pw[off + i] * (i + 1) / (d + 1)
        pw[off + i] = zero * pw[off + i] * (d - i) / (d + 1)


@njit(cache=True)
def _unwind(pf, pz, po, pw, off, d, idx):
    one = po[off + idx]
    zero = pz[off + idx]
    nxt = pw[off + d]
    for i in range(d - 1, -1, -1):
        if one != 0.0:
            tmp = pw[off + i]
            pw[off + i] = nxt * (d + 1) / ((i + 1) * one)
            nxt = tmp - pw[off + i] * zero * (d - i) / (d + 1)
        else:
            pw[off + i] = pw[off + i] * (d + 1) / (zero * (d - i))
    for i in range(idx, d):
        pf[off + i] = pf[off + i + 1]
        pz[off + i] = pz[off + i + 1]
        po[off + i] = po[off + i + 1]


@njit(cache=True)
def _unwound_sum(pz, po, pw, off, d, idx):
    one = po[off + idx]
    zero = pz[off + idx]
    nxt = pw[off + d]
    total = 0.0
    for i in range(d - 1, -1, -1):
        if one != 0.0:
            tmp = nxt * (d + 1) / ((i + 1) * one)
            total += tmp
            nxt = pw[off + i] - tmp * zero * (d - i) / (d + 1)
        else:
            total += (pw[off + i] / zero) / ((d - i) / (d + 1))
    return total


# recursive kernels are not cached: numba's on-disk cache mis-links self-calls
@njit
def _recurse(node, x, phi, feature, threshold, left, right, value, cover,
             pf, pz, po, pw, parent_off, d, zero, one, feat):
    off = parent_off + d
    if d > 0:
        for i in range(d):
            pf[off + i] = pf[parent_off + i]
            pz[off + i] = pz[parent_off + i]
            po[off + i] = po[parent_off + i]
            pw[off + i] = pw[parent_off + i]
    _extend(pf, pz, po, pw, off, d, zero, one, feat)

    f = feature[node]
    if f < 0:
        for i in range(1, d + 1):
            w = _unwound_sum(pz, po, pw, off, d, i)
            phi[pf[off + i]] += w * (po[off + i] - pz[off + i]) * value[node]
        return
    if x[f] < threshold[node]:
        hot, cold = left[node], right[node]
    else:
        hot, cold = right[node], left[node]
    c = cover[node]
    hot_zero = cover[hot] / c
    cold_zero = cover[cold] / c
    inc_zero = 1.0
    inc_one = 1.0
    k = 0
    while k <= d:
        if pf[off + k] == f:
            break
        k += 1
    if k != d + 1:
        inc_zero = pz[off + k]
        inc_one = po[off + k]
        _unwind(pf, pz, po, pw, off, d, k)
        d -= 1
    _recurse(hot, x, phi, feature, threshold, left, right, value, cover,
             pf, pz, po, pw, off, d + 1, hot_zero * inc_zero, inc_one, f)
    _recurse(cold, x, phi, feature, threshold, left, right, value, cover,
             pf, pz, po, pw, off, d + 1, cold_zero * inc_zero, 0.0, f)


@njit
def _tree_shap_all(X, roots, feature, threshold, left, right, value, cover, max_depth):
    n, p = X.shape
    phi = np.zeros((n, p))
    size = (max_depth + 2) * (max_depth + 3) // 2 + max_depth + 2
    pf = np.zeros(size, dtype=np.int64)
    pz = np.zeros(size)
    po = np.zeros(size)
    pw = np.zeros(size)
    for i in range(n):
        for r in roots:
            _recurse(r, X[i], phi[i], feature, threshold, left, right, value, cover,
                     pf, pz, po, pw, 0, 0, 1.0, 1.0, -1)
    return phi


def _expected_leaf(tree, k=0) -> float:
    if tree.feature[k] < 0:
        return float(tree.value[k])
    l, r = tree.left[k], tree.right[k]
    return (tree.cover[l] * _expected_leaf(tree, l) + tree.cover[r] * _expected_leaf(tree, r)) / tree.cover[k]


def tree_shap(ensemble: TreeEnsemble, X, feature_names: Sequence[str] = ()) -> ShapMatrix:
    """Exact path-dependent SHAP values of the ensemble margin."""
    X = np.ascontiguousarray(_check_matrix(X, ensemble.feature_count))
    for t in ensemble.trees:
        if t.cover is None or len(t.cover) != t.n_nodes or np.any(t.cover[t.feature >= 0] <= 0):
            raise ValueError("tree_shap needs positive cover counts on every internal node")
    base = ensemble.base_score + ensemble.learning_rate * sum(_expected_leaf(t) for t in ensemble.trees)
    if ensemble.trees:
        pk = ensemble.packed
        depth = max(t.depth() for t in ensemble.trees)
        phi = _tree_shap_all(X, pk["roots"], pk["feature"], pk["threshold"], pk["left"], pk["right"],
                             pk["value"] * ensemble.learning_rate, pk["cover"], depth)
    else:
        phi = np.zeros(X.shape)
    return ShapMatrix(phi=phi, base_value=float(base), predictions=ensemble.margin(X),
                      feature_names=tuple(feature_names))


# --- KernelSHAP ------------------------------------------------------------

EXACT_MAX_P = 12


def _kernel_mass(p: int, s: np.ndarray) -> np.ndarray:
    """Total Shapley-kernel weight carried by all coalitions of size s."""
    return (p - 1) / (s * (p - s))


def _exact_design(p: int):
    masks = np.arange(1, 2 ** p - 1)
    Z = ((masks[:, None] >> np.arange(p)) & 1).astype(float)
    s = Z.sum(axis=1)
    comb = np.array([math.comb(p, int(k)) for k in s])
    return Z, _kernel_mass(p, s) / comb


def _sampled_design(p: int, n_samples: int, rng: np.random.Generator, exact_degree: int):
    """Coalition design: optional exact singleton/complement part plus paired samples."""
    Zs, ws = [], []
    sizes = np.arange(1, p)
    mass = _kernel_mass(p, sizes.astype(float))
    if exact_degree >= 1:
        eye = np.eye(p)
        Zs += [eye, 1.0 - eye]
        w1 = mass[0] / p
        ws += [np.full(p, w1), np.full(p, w1)]
        keep = (sizes > 1) & (sizes < p - 1)
        sizes, mass = sizes[keep], mass[keep]
    if n_samples > 0 and len(sizes):
        n_pairs = (n_samples + 1) // 2
        draw = rng.choice(sizes, size=n_pairs, p=mass / mass.sum())
        Z = np.zeros((2 * n_pairs, p))
        for k, s in enumerate(draw):
            on = rng.choice(p, size=s, replace=False)
            Z[2 * k, on] = 1.0
            Z[2 * k + 1] = 1.0 - Z[2 * k]
        Z = Z[:n_samples]
        Zs.append(Z)
        ws.append(np.full(len(Z), mass.sum() / len(Z)))
    Z = np.vstack(Zs)
    w = np.concatenate(ws)
    uniq, inv = np.unique(Z, axis=0, return_inverse=True)
    wsum = np.zeros(len(uniq))
    np.add.at(wsum, inv.ravel(), w)
    return uniq, wsum


def _constrained_wls(Z, w, Y, delta):
    """Efficiency-constrained weighted least squares, one column of Y per instance.

    Eliminates the last coefficient through sum(phi) = delta and solves the rest.
    """
    p = Z.shape[1]
    A = Z[:, :-1] - Z[:, -1:]
    R = Y - np.outer(Z[:, -1], delta)
    sw = np.sqrt(w)[:, None]
    coef = np.linalg.lstsq(A * sw, R * sw, rcond=None)[0]
    phi = np.empty((Y.shape[1], p))
    phi[:, :-1] = coef.T
    phi[:, -1] = delta - coef.sum(axis=0)
    return phi


def kernel_shap(
    predict_fn: Callable[[np.ndarray], np.ndarray],
    background,
    instances,
    mode: str = "auto",
    n_coalitions: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    exact_degree: int = 0,
    feature_names: Sequence[str] = (),
    max_cells: int = 8_000_000,
) -> ShapMatrix:
    """Model-agnostic SHAP values under the marginal value function.

    ``mode`` is ``"exact"`` (all 2^p - 2 proper coalitions, so the result is
    the exact Shapley value of the marginal game), ``"sampled"`` or
    ``"auto"`` (exact when p <= 12). Sampled mode draws ``n_coalitions``
    coalitions, paired with their complements, with size probabilities given
    by the Shapley kernel; ``exact_degree=1`` additionally enumerates every
    singleton and its complement. The same design is used for all instances.
    """
    background = np.asarray(background, dtype=float)
    X = np.atleast_2d(np.asarray(instances, dtype=float))
    if background.ndim != 2 or len(background) == 0:
        raise ValueError("background must be a non-empty matrix")
    p = X.shape[1]
    if background.shape[1] != p:
        raise ValueError("background and instances disagree on the number of columns")
    if mode == "auto":
        mode = "exact" if p <= EXACT_MAX_P else "sampled"
    if mode == "exact":
        if p > 20:
            raise ValueError("exact mode enumerates 2^p coalitions; use sampled mode")
        Z, w = _exact_design(p)
    elif mode == "sampled":
        rng = rng if rng is not None else np.random.default_rng(0)
        n_c = n_coalitions if n_coalitions is not None else min(2 ** p - 2, 2048)
        total = n_c + (2 * p if exact_degree >= 1 else 0)
        if total < 2 * p + 2:
            raise ValueError(f"sampled mode needs at least {2 * p + 2} coalitions, got {total}")
        Z, w = _sampled_design(p, n_c, rng, exact_degree)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    base = float(np.mean(predict_fn(background)))
    m = len(background)
    n_c = len(Z)
    fx = np.asarray(predict_fn(X), dtype=float)
    V = np.empty((n_c, len(X)))
    chunk = max(1, max_cells // (n_c * m * p))
    onz = Z.astype(bool)
    for start in range(0, len(X), chunk):
        block = X[start:start + chunk]
        rows = np.broadcast_to(background, (len(block), n_c, m, p)).copy()
        mask = np.broadcast_to(onz[None, :, None, :], rows.shape)
        vals = np.broadcast_to(block[:, None, None, :], rows.shape)
        rows[mask] = vals[mask]
        out = np.asarray(predict_fn(rows.reshape(-1, p)), dtype=float).reshape(len(block), n_c, m)
        V[:, start:start + len(block)] = out.mean(axis=2).T

    degenerate = bool(np.ptp(V) == 0 and np.ptp(fx) == 0 and np.all(fx == base))
    if degenerate:
        if mode == "sampled":
            warnings.warn("prediction surface is constant; returning zero attributions", RuntimeWarning)
        phi = np.zeros_like(X)
    else:
        phi = _constrained_wls(Z, w, V - base, fx - base)
    return ShapMatrix(phi=phi, base_value=base, predictions=fx, feature_names=tuple(feature_names),
                      degenerate=degenerate)
