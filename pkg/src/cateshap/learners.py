"""CATE meta-learners (T, S, X, R, DR) on top of the boosting engine.

Each learner returns a :class:`CateModel`. Hyperparameters come from a *tuner*:
a callable ``tuner(stage, X, y, w, loss, rng) -> Hyperparams`` that is asked
once per stage. Passing a plain :class:`Hyperparams` uses it for every stage.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Union

import numpy as np

from .core import Dataset, DataError, FoldAssignment, split_folds
from .gbt import Hyperparams, TreeEnsemble, fit_gbt, hyperparams_to_dict, tune_cv
from .shapley import ShapMatrix, kernel_shap, tree_shap

KINDS = ("T", "S", "X", "R", "DR", "CF")
CLIP = (0.025, 0.975)

Tuner = Callable[..., Hyperparams]


# ---------------------------------------------------------------- tuners

@dataclass(frozen=True)
class FixedTuner:
    """Returns preset hyperparameters; ``per_stage`` entries override ``default``."""
    default: Hyperparams = Hyperparams()
    per_stage: Mapping[str, Hyperparams] = field(default_factory=dict)

    def __call__(self, stage, X, y, w, loss, rng) -> Hyperparams:
        return self.per_stage.get(stage, self.default)


@dataclass(frozen=True)
class CVTuner:
    """K-fold grid search per stage, boosting rounds picked from the mean CV curve."""
    grid: tuple
    K: int = 5
    select_rounds: bool = True
    patience: int = 30

    def __call__(self, stage, X, y, w, loss, rng) -> Hyperparams:
        if len(self.grid) == 1 and not self.select_rounds:
            return self.grid[0]
        return tune_cv(X, y, w, loss=loss, grid=self.grid, K=self.K, rng=rng,
                       select_rounds=self.select_rounds, patience=self.patience)


class RecordingTuner:
    """Wraps a tuner and remembers the choice made for every stage."""

    def __init__(self, inner: Tuner):
        self.inner = inner
        self.chosen: dict = {}

    def __call__(self, stage, X, y, w, loss, rng) -> Hyperparams:
        hp = self.inner(stage, X, y, w, loss, rng)
        self.chosen[stage] = hp
        return hp


def as_tuner(hp: Union[Hyperparams, Tuner, None]) -> Tuner:
    if hp is None:
        return FixedTuner()
    if isinstance(hp, Hyperparams):
        return FixedTuner(hp)
    return hp


# ---------------------------------------------------------------- propensity

@dataclass(frozen=True)
class PropensityModel:
    mode: str                                  # "known_constant" or "estimated"
    clip: tuple = CLIP
    p_rct: Optional[float] = None
    ensemble: Optional[TreeEnsemble] = None
    oof: Optional[np.ndarray] = None           # out-of-fold probabilities of the training rows
    folds: Optional[FoldAssignment] = None

    def __post_init__(self):
        lo, hi = self.clip
        if not 0 < lo < hi < 1:
            raise ValueError("clip bounds must satisfy 0 < lo < hi < 1")
        if self.mode == "known_constant":
            if self.p_rct is None or not 0 < self.p_rct < 1:
                raise ValueError("known_constant propensity needs p_rct in (0, 1)")
        elif self.mode == "estimated":
            if self.ensemble is None:
                raise ValueError("estimated propensity needs a fitted ensemble")
        else:
            raise ValueError(f"unknown propensity mode {self.mode!r}")

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.mode == "known_constant":
            raw = np.full(X.shape[0], self.p_rct)
        else:
            raw = self.ensemble.predict(X)
        return np.clip(raw, *self.clip)

    def training(self, X) -> np.ndarray:
        """Probabilities for the training rows (out-of-fold when estimated)."""
        if self.mode == "estimated" and self.oof is not None:
            return np.clip(self.oof, *self.clip)
        return self.predict(X)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "clip": list(self.clip),
            "p_rct": self.p_rct,
            "ensemble": None if self.ensemble is None else self.ensemble.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PropensityModel":
        ens = d.get("ensemble")
        return cls(mode=d["mode"], clip=tuple(d["clip"]), p_rct=d.get("p_rct"),
                   ensemble=None if ens is None else TreeEnsemble.from_dict(ens))


def _check_arms_per_fold(a, folds: FoldAssignment):
    for k in range(folds.K):
        for idx, part in ((folds.train_index(k), "training part"), (folds.test_index(k), "held-out part")):
            arms = np.unique(a[idx])
            if len(arms) < 2:
                raise DataError(f"fold {k} {part} contains a single treatment arm")


def fit_propensity(
    ds: Dataset,
    mode: str = "estimated",
    K: int = 5,
    rng: Optional[np.random.Generator] = None,
    p_rct: Optional[float] = None,
    hp: Union[Hyperparams, Tuner, None] = None,
    clip: tuple = CLIP,
    folds: Optional[FoldAssignment] = None,
) -> PropensityModel:
    """Known constant (randomized trial) or cross-fitted logistic boosting."""
    if mode == "known_constant":
        p = float(ds.treatment.mean()) if p_rct is None else float(p_rct)
        return PropensityModel(mode=mode, clip=clip, p_rct=p)
    if mode != "estimated":
        raise ValueError(f"unknown propensity mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    tuner = as_tuner(hp)
    X, a = ds.features, ds.treatment.astype(float)
    folds = folds if folds is not None else split_folds(ds.n, K, rng)
    _check_arms_per_fold(ds.treatment, folds)
    hp_p = tuner("propensity", X, a, None, "logistic", rng)
    seeds = rng.integers(0, 2**63 - 1, size=folds.K + 1)
    oof = np.empty(ds.n)
    for k in range(folds.K):
        tr, te = folds.train_index(k), folds.test_index(k)
        ens = fit_gbt(X[tr], a[tr], None, hp_p, "logistic", np.random.default_rng(seeds[k]))
        oof[te] = ens.predict(X[te])
    full = fit_gbt(X, a, None, hp_p, "logistic", np.random.default_rng(seeds[-1]))
    return PropensityModel(mode=mode, clip=clip, ensemble=full, oof=oof, folds=folds)


# ---------------------------------------------------------------- pseudo-outcomes

def _check_prob(p):
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError("propensity values must lie strictly inside (0, 1)")
    return p


def r_pseudo_outcomes(y, a, m_hat, p_hat):
    """Residual-on-residual transform: returns (psi, weights)."""
    p = _check_prob(p_hat)
    resid_a = np.asarray(a, dtype=float) - p
    psi = (np.asarray(y, dtype=float) - np.asarray(m_hat, dtype=float)) / resid_a
    return psi, resid_a ** 2


def dr_pseudo_outcomes(y, a, m0, m1, p_hat):
    """Augmented inverse-probability-weighted scores."""
    p = _check_prob(p_hat)
    y, a = np.asarray(y, dtype=float), np.asarray(a, dtype=float)
    m0, m1 = np.asarray(m0, dtype=float), np.asarray(m1, dtype=float)
    return m1 - m0 + a * (y - m1) / p - (1 - a) * (y - m0) / (1 - p)


def ipw_pseudo_outcomes(y, a, p_hat):
    p = _check_prob(p_hat)
    return np.asarray(y, dtype=float) * (np.asarray(a, dtype=float) - p) / (p * (1 - p))


# ---------------------------------------------------------------- model

@dataclass(frozen=True)
class CateModel:
    kind: str
    stage_models: Mapping[str, object]
    propensity: Optional[PropensityModel] = None
    final_stage: Optional[TreeEnsemble] = None
    metadata: Mapping = field(default_factory=dict)
    folds: Optional[FoldAssignment] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.kind in ("R", "DR") and self.final_stage is None:
            raise ValueError(f"{self.kind}-learner requires a final stage")

    @property
    def feature_count(self) -> int:
        if self.kind == "CF":
            return self.stage_models["forest"].feature_count
        if self.kind == "S":
            return (self.stage_models["m"].feature_count - 1) // 3
        return next(iter(self.stage_models.values())).feature_count

    def predict_cate(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.feature_count:
            raise ValueError(f"expected a matrix with {self.feature_count} columns")
        st = self.stage_models
        if self.kind == "T":
            return st["m1"].predict(X) - st["m0"].predict(X)
        if self.kind == "S":
            n = X.shape[0]
            return (st["m"].predict(build_s_matrix(X, np.ones(n)))
                    - st["m"].predict(build_s_matrix(X, np.zeros(n))))
        if self.kind == "X":
            w = self.propensity.predict(X)
            return w * st["tau0"].predict(X) + (1 - w) * st["tau1"].predict(X)
        if self.kind in ("R", "DR"):
            return self.final_stage.predict(X)
        from .cforest import predict_cf
        return predict_cf(st["forest"], X)

    def to_dict(self) -> dict:
        stages = {name: m.to_dict() for name, m in self.stage_models.items()}
        return {
            "kind": self.kind,
            "stages": stages,
            "final_stage": "final" if self.final_stage is not None else None,
            "propensity": None if self.propensity is None else self.propensity.to_dict(),
            "metadata": dict(self.metadata),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "CateModel":
        if d["kind"] == "CF":
            from .cforest import CausalForest
            stages = {"forest": CausalForest.from_dict(d["stages"]["forest"])}
        else:
            stages = {name: TreeEnsemble.from_dict(v) for name, v in d["stages"].items()}
        prop = d.get("propensity")
        return cls(
            kind=d["kind"],
            stage_models=stages,
            propensity=None if prop is None else PropensityModel.from_dict(prop),
            final_stage=stages.get(d["final_stage"]) if d.get("final_stage") else None,
            metadata=d.get("metadata", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "CateModel":
        return cls.from_dict(json.loads(text))


def save_model(model: CateModel, path) -> None:
    Path(path).write_text(model.to_json(), encoding="utf-8")


def load_model(path) -> CateModel:
    return CateModel.from_json(Path(path).read_text(encoding="utf-8"))


def export_tau_csv(path, tau_hat, oracle_tau=None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["instance_id", "tau_hat"] + ([] if oracle_tau is None else ["oracle_tau"]))
        for i, t in enumerate(tau_hat):
            row = [i, f"{t:.17g}"]
            if oracle_tau is not None:
                row.append(f"{oracle_tau[i]:.17g}")
            w.writerow(row)


# ---------------------------------------------------------------- learners

def _arms(ds: Dataset):
    i0, i1 = np.flatnonzero(ds.treatment == 0), np.flatnonzero(ds.treatment == 1)
    if len(i0) == 0 or len(i1) == 0:
        raise DataError("both treatment arms must be non-empty")
    return i0, i1


def _fit_stage(tuner, name, X, y, w, loss, rng, chosen):
    hp = tuner(name, X, y, w, loss, rng)
    chosen[name] = hyperparams_to_dict(hp)
    return fit_gbt(X, y, w, hp, loss, np.random.default_rng(rng.integers(2**63 - 1)))


def _meta(chosen, **extra):
    return {"hyperparams": chosen, **extra}


def fit_t_learner(ds: Dataset, hp=None, rng=None) -> CateModel:
    rng = rng if rng is not None else np.random.default_rng(0)
    tuner, chosen = as_tuner(hp), {}
    i0, i1 = _arms(ds)
    X, y = ds.features, ds.outcome
    m0 = _fit_stage(tuner, "m0", X[i0], y[i0], None, "squared", rng, chosen)
    m1 = _fit_stage(tuner, "m1", X[i1], y[i1], None, "squared", rng, chosen)
    return CateModel("T", {"m0": m0, "m1": m1}, metadata=_meta(chosen))


def build_s_matrix(X, a) -> np.ndarray:
    """Augmented design (x, A, x*I(A=0), x*I(A=1)) of width 3p+1."""
    X = np.asarray(X, dtype=float)
    a = np.asarray(a, dtype=float).reshape(-1, 1)
    return np.hstack([X, a, X * (1 - a), X * a])


def fit_s_learner(ds: Dataset, hp=None, rng=None) -> CateModel:
    rng = rng if rng is not None else np.random.default_rng(0)
    tuner, chosen = as_tuner(hp), {}
    _arms(ds)
    W = build_s_matrix(ds.features, ds.treatment)
    m = _fit_stage(tuner, "m", W, ds.outcome, None, "squared", rng, chosen)
    return CateModel("S", {"m": m}, metadata=_meta(chosen))


def _default_propensity(ds, propensity, K, rng, tuner, folds=None):
    if propensity is not None:
        return propensity
    return fit_propensity(ds, "estimated", K=K, rng=rng, hp=tuner, folds=folds)


def fit_x_learner(ds: Dataset, hp=None, rng=None, propensity: Optional[PropensityModel] = None,
                  K: int = 5) -> CateModel:
    rng = rng if rng is not None else np.random.default_rng(0)
    tuner, chosen = as_tuner(hp), {}
    i0, i1 = _arms(ds)
    X, y = ds.features, ds.outcome
    m0 = _fit_stage(tuner, "m0", X[i0], y[i0], None, "squared", rng, chosen)
    m1 = _fit_stage(tuner, "m1", X[i1], y[i1], None, "squared", rng, chosen)
    d1 = y[i1] - m0.predict(X[i1])
    d0 = m1.predict(X[i0]) - y[i0]
    tau1 = _fit_stage(tuner, "tau1", X[i1], d1, None, "squared", rng, chosen)
    tau0 = _fit_stage(tuner, "tau0", X[i0], d0, None, "squared", rng, chosen)
    prop = _default_propensity(ds, propensity, K, rng, tuner)
    return CateModel("X", {"m0": m0, "m1": m1, "tau0": tau0, "tau1": tau1}, propensity=prop,
                     metadata=_meta(chosen, propensity=prop.mode))


def _cross_fit(tuner, name, X, y, folds, rng, chosen, rows=None):
    """Out-of-fold predictions of a squared-loss regression of y on X.

    ``rows`` restricts training to a subset (e.g. one treatment arm); predictions
    are still produced for every row of each held-out fold.
    """
    rows = np.arange(len(y)) if rows is None else rows
    in_rows = np.zeros(len(y), dtype=bool)
    in_rows[rows] = True
    hp = tuner(name, X[in_rows], y[in_rows], None, "squared", rng)
    chosen[name] = hyperparams_to_dict(hp)
    seeds = rng.integers(0, 2**63 - 1, size=folds.K)
    out = np.empty(len(y))
    for k in range(folds.K):
        tr = folds.train_index(k)
        tr = tr[in_rows[tr]]
        te = folds.test_index(k)
        ens = fit_gbt(X[tr], y[tr], None, hp, "squared", np.random.default_rng(seeds[k]))
        out[te] = ens.predict(X[te])
    return out


def _nuisance_setup(ds, propensity, K, rng, tuner):
    if K < 2:
        raise ValueError("K must be at least 2")
    folds = split_folds(ds.n, K, rng)
    _check_arms_per_fold(ds.treatment, folds)
    prop = _default_propensity(ds, propensity, K, rng, tuner, folds=folds)
    return folds, prop, prop.training(ds.features)


def fit_r_learner(ds: Dataset, hp=None, K: int = 5, rng=None,
                  propensity: Optional[PropensityModel] = None) -> CateModel:
    rng = rng if rng is not None else np.random.default_rng(0)
    tuner, chosen = as_tuner(hp), {}
    folds, prop, p_hat = _nuisance_setup(ds, propensity, K, rng, tuner)
    X, y = ds.features, ds.outcome
    m_hat = _cross_fit(tuner, "m", X, y, folds, rng, chosen)
    psi, w = r_pseudo_outcomes(y, ds.treatment, m_hat, p_hat)
    final = _fit_stage(tuner, "final", X, psi, w, "weighted_squared", rng, chosen)
    return CateModel("R", {"final": final}, propensity=prop, final_stage=final, folds=folds,
                     metadata=_meta(chosen, propensity=prop.mode, K=K))


def fit_dr_learner(ds: Dataset, hp=None, K: int = 5, rng=None,
                   propensity: Optional[PropensityModel] = None) -> CateModel:
    rng = rng if rng is not None else np.random.default_rng(0)
    tuner, chosen = as_tuner(hp), {}
    folds, prop, p_hat = _nuisance_setup(ds, propensity, K, rng, tuner)
    X, y, a = ds.features, ds.outcome, ds.treatment
    m0 = _cross_fit(tuner, "m0", X, y, folds, rng, chosen, rows=np.flatnonzero(a == 0))
    m1 = _cross_fit(tuner, "m1", X, y, folds, rng, chosen, rows=np.flatnonzero(a == 1))
    psi = dr_pseudo_outcomes(y, a, m0, m1, p_hat)
    final = _fit_stage(tuner, "final", X, psi, None, "squared", rng, chosen)
    return CateModel("DR", {"final": final}, propensity=prop, final_stage=final, folds=folds,
                     metadata=_meta(chosen, propensity=prop.mode, K=K))


def fit_learner(kind: str, ds: Dataset, hp=None, rng=None, K: int = 5,
                propensity: Optional[PropensityModel] = None, cf_params=None) -> CateModel:
    """Dispatch by learner kind."""
    if kind == "T":
        return fit_t_learner(ds, hp, rng)
    if kind == "S":
        return fit_s_learner(ds, hp, rng)
    if kind == "X":
        return fit_x_learner(ds, hp, rng, propensity=propensity, K=K)
    if kind == "R":
        return fit_r_learner(ds, hp, K, rng, propensity=propensity)
    if kind == "DR":
        return fit_dr_learner(ds, hp, K, rng, propensity=propensity)
    if kind == "CF":
        from .cforest import CFParams, fit_causal_forest
        forest = fit_causal_forest(ds, cf_params or CFParams(), rng)
        return CateModel("CF", {"forest": forest}, metadata={"cf_params": forest.params_dict()})
    raise ValueError(f"unknown learner kind {kind!r}")


# ---------------------------------------------------------------- SHAP strategies

def shap_strategy1(model: CateModel, background, instances, rng=None, **kernel_kw) -> ShapMatrix:
    """Model-agnostic attributions of the CATE surface itself."""
    return kernel_shap(model.predict_cate, background, instances, rng=rng, **kernel_kw)


def shap_strategy2(model: CateModel, instances, feature_names=()) -> ShapMatrix:
    """Exact attributions of the final supervised stage (R and DR only)."""
    if model.final_stage is None:
        raise ValueError(f"{model.kind}-learner has no final supervised stage")
    return tree_shap(model.final_stage, instances, feature_names)


def shap_strategy3(model: CateModel, X_train, hp=None, rng=None, instances=None,
                   feature_names=(), tau_hat=None):
    """Fit a boosted surrogate of the estimated CATE on x and explain it exactly.

    Returns ``(surrogate, shap)``; attributions are for ``instances`` (default:
    the training rows).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    tuner = as_tuner(hp)
    X_train = np.asarray(X_train, dtype=float)
    tau = model.predict_cate(X_train) if tau_hat is None else np.asarray(tau_hat, dtype=float)
    hp_s = tuner("surrogate", X_train, tau, None, "squared", rng)
    surrogate = fit_gbt(X_train, tau, None, hp_s, "squared", np.random.default_rng(rng.integers(2**63 - 1)))
    target = X_train if instances is None else instances
    return surrogate, tree_shap(surrogate, target, feature_names)
