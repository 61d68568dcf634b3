"""Seeded Monte Carlo benchmark of CATE learners and SHAP-based biomarker ranking.

One iteration simulates a training draw (shared by every learner and reused
across the beta grid), fits each learner, derives attributions per strategy
and scores the resulting rankings. Iterations are independent and may run in
worker processes; records are always merged in iteration order so output is
identical for any worker count.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cforest import CFParams, cf_vip
from .core import stream
from .gbt import Hyperparams, default_grid, fit_gbt
from .learners import (CVTuner, FixedTuner, RecordingTuner, fit_learner, fit_propensity,
                       shap_strategy1, shap_strategy2, shap_strategy3)
from .metrics import instance_stats, margin, net3, recovery_corr, top1
from .shapley import EXACT_MAX_P, kernel_shap, summary_shap, tree_shap
from .simgen import P_RCT_S2, Scenario, simulate

LEARNERS = ("T", "S", "X", "R", "DR", "CF")
STRATEGIES = (1, 2, 3)
TUNING_MODES = ("every", "once", "fixed")


class ConfigError(ValueError):
    """Invalid benchmark configuration."""


def compact_grid(n_rounds: int = 1000) -> list:
    """Desk-scale grid over learning rate, depth (stumps included) and row subsampling."""
    return [Hyperparams(eta=eta, max_depth=d, subsample=ss, n_rounds=n_rounds)
            for eta in (0.1, 0.3) for d in (1, 2, 3, 4) for ss in (0.8, 1.0)]


@dataclass(frozen=True)
class BenchConfig:
    scenarios: tuple = ("S2",)
    n_values: tuple = (1000,)
    betas: tuple = (1.0,)
    iterations: int = 50
    learners: tuple = LEARNERS
    strategies: tuple = (3,)
    master_seed: int = 20240601
    K: int = 5
    grid: object = "compact"            # "default", "compact" or a list of Hyperparams dicts
    tuning: str = "every"               # every | once | fixed
    fixed_hp: dict = field(default_factory=dict)
    cv_patience: int = 30
    propensity: str = "auto"            # auto | known | estimated
    kernel_background: int = 100
    kernel_instances: int = 100
    kernel_coalitions: Optional[int] = None
    cf_params: dict = field(default_factory=dict)
    cf_vip: bool = True
    normalization: str = "minmax"
    test_n: int = 10000
    workers: int = 1
    out_dir: str = "bench_out"

    def __post_init__(self):
        for name in ("scenarios", "n_values", "betas", "learners", "strategies"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        if not self.scenarios or not self.learners or not self.strategies:
            raise ConfigError("scenarios, learners and strategies must be non-empty")
        bad = set(self.learners) - set(LEARNERS)
        if bad:
            raise ConfigError(f"unknown learners {sorted(bad)}")
        if set(self.strategies) - set(STRATEGIES):
            raise ConfigError(f"strategies must be drawn from {STRATEGIES}")
        if 2 in self.strategies and not set(self.learners) & {"R", "DR"}:
            raise ConfigError("strategy 2 needs an R or DR learner")
        if self.tuning not in TUNING_MODES:
            raise ConfigError(f"tuning must be one of {TUNING_MODES}")
        if self.propensity not in ("auto", "known", "estimated"):
            raise ConfigError("propensity must be auto, known or estimated")
        if any(b < 0 for b in self.betas):
            raise ConfigError("beta values must be non-negative")
        if any(n < 50 for n in self.n_values) or self.test_n < 2:
            raise ConfigError("n must be at least 50 and test_n at least 2")
        if self.workers < 1 or self.K < 2:
            raise ConfigError("workers must be >= 1 and K >= 2")
        try:
            for s in self.scenarios:
                Scenario(s, 50)
            self.hp_grid()
            if self.fixed_hp:
                Hyperparams(**self.fixed_hp)
            CFParams(**self.cf_params)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def hp_grid(self) -> list:
        if self.grid == "default":
            return default_grid()
        if self.grid == "compact":
            return compact_grid()
        if isinstance(self.grid, str):
            raise ConfigError(f"unknown grid {self.grid!r}")
        return [Hyperparams(**g) for g in self.grid]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("scenarios", "n_values", "betas", "learners", "strategies"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


RECORD_FIELDS = ("iteration", "scenario", "n", "beta", "learner", "strategy", "status",
                 "top1", "net3", "margin", "cor_tau_tauhat", "max_P", "max_NP", "p_win",
                 "cor3", "cor4", "error")
METRIC_FIELDS = ("top1", "net3", "margin", "cor_tau_tauhat", "max_P", "max_NP", "p_win", "cor3", "cor4")


@dataclass(frozen=True)
class MetricRecord:
    iteration: int
    scenario: str
    n: int
    beta: float
    learner: str
    strategy: str            # "1", "2", "3" or "vip" (causal forest split importance)
    status: str = "ok"
    top1: float = math.nan
    net3: float = math.nan
    margin: float = math.nan
    cor_tau_tauhat: float = math.nan
    max_P: float = math.nan
    max_NP: float = math.nan
    p_win: float = math.nan
    cor3: float = math.nan
    cor4: float = math.nan
    error: str = ""
    # wall-clock per phase; reported separately so record files stay reproducible
    timings: dict = field(default_factory=dict, compare=False)


def iteration_seed(master_seed: int, i: int) -> int:
    return int(master_seed) ^ int(i)


def _propensity_mode(cfg: BenchConfig, kind: str) -> str:
    if cfg.propensity == "auto":
        return "estimated" if kind == "S3" else "known"
    return cfg.propensity


def _p_rct(kind: str) -> float:
    return P_RCT_S2 if kind == "S2" else 0.5


def _fit(cfg, kind, learner, ds, tuner, rng):
    prop = None
    if learner in ("X", "R", "DR"):
        if _propensity_mode(cfg, kind) == "known":
            prop = fit_propensity(ds, "known_constant", p_rct=_p_rct(kind))
    cf = CFParams(**cfg.cf_params)
    return fit_learner(learner, ds, tuner, rng, K=cfg.K, propensity=prop, cf_params=cf)


def _tuner_for(cfg: BenchConfig, tuned: dict, key):
    if cfg.tuning == "fixed":
        return FixedTuner(Hyperparams(**cfg.fixed_hp))
    if cfg.tuning == "once":
        return FixedTuner(Hyperparams(**cfg.fixed_hp), per_stage=tuned[key])
    return CVTuner(tuple(cfg.hp_grid()), K=cfg.K, patience=cfg.cv_patience)


def tune_once(cfg: BenchConfig) -> dict:
    """Per-stage hyperparameters chosen by CV on a pilot draw, keyed by (scenario, n, beta, learner)."""
    if cfg.tuning != "once":
        return {}
    cv = CVTuner(tuple(cfg.hp_grid()), K=cfg.K, patience=cfg.cv_patience)
    out = {}
    for si, kind in enumerate(cfg.scenarios):
        for n in cfg.n_values:
            for bi, beta in enumerate(cfg.betas):
                ds = simulate(Scenario(kind, n, beta, seed=cfg.master_seed, draw=2))
                for li, learner in enumerate(cfg.learners):
                    if learner == "CF":
                        continue
                    rec = RecordingTuner(cv)
                    rng = stream(cfg.master_seed, 7, si, n, bi, li)
                    model = _fit(cfg, kind, learner, ds, rec, rng)
                    if 3 in cfg.strategies:
                        shap_strategy3(model, ds.features, rec, rng)
                    out[(kind, n, float(beta), learner)] = dict(rec.chosen)
                if "CF" in cfg.learners and 3 in cfg.strategies:
                    rec = RecordingTuner(cv)
                    rng = stream(cfg.master_seed, 7, si, n, bi, LEARNERS.index("CF"))
                    model = _fit(cfg, kind, "CF", ds, rec, rng)
                    shap_strategy3(model, ds.features, rec, rng)
                    out[(kind, n, float(beta), "CF")] = dict(rec.chosen)
    return out


def _pearson(u, v) -> float:
    """Signed correlation of estimated and true effects; 0 when either is constant."""
    if np.ptp(u) == 0 or np.ptp(v) == 0:
        return 0.0
    return float(np.corrcoef(u, v)[0, 1])


def _score(cfg, base, phi_matrix, tau_train, ds, P, test_cor):
    imp = summary_shap(phi_matrix).importance
    st = instance_stats(phi_matrix, tau_train, P)
    c3 = c4 = math.nan
    if base.scenario in ("S2", "S3"):
        c3, c4 = recovery_corr(phi_matrix, ds.features, 3, 4)
    return replace(base, top1=top1(imp, P), net3=net3(imp, P), margin=margin(imp, P, cfg.normalization),
                   cor_tau_tauhat=test_cor, max_P=st.max_P, max_NP=st.max_NP, p_win=st.p_win,
                   cor3=c3, cor4=c4)


def _cell(cfg, i, seed, si, kind, n, bi, beta, li, learner, ds, test, tuner):
    """All records of one (iteration, learner); failures become failed-cell rows."""
    P = sorted(ds.oracle_predictive_set)
    strategies = [s for s in sorted(cfg.strategies) if s != 2 or learner in ("R", "DR")]
    labels = [str(s) for s in strategies] + (["vip"] if learner == "CF" and cfg.cf_vip else [])
    bases = {lab: MetricRecord(i, kind, n, float(beta), learner, lab) for lab in labels}
    rng = stream(seed, 1, si, n, bi, li)
    timings = {}
    try:
        t0 = time.perf_counter()
        model = _fit(cfg, kind, learner, ds, tuner, rng)
        timings["fit"] = 1000 * (time.perf_counter() - t0)
        tau_train = model.predict_cate(ds.features)
        test_cor = _pearson(model.predict_cate(test.features), test.oracle_tau)
    except Exception as exc:  # noqa: BLE001 - any module error aborts this cell only
        return [replace(b, status="failed", error=f"{type(exc).__name__}: {exc}") for b in bases.values()]

    out = []
    for lab in labels:
        t0 = time.perf_counter()
        try:
            if lab == "vip":
                vip = cf_vip(model.stage_models["forest"])
                rec = replace(bases[lab], top1=top1(vip, P), net3=net3(vip, P),
                              margin=margin(vip, P, cfg.normalization), cor_tau_tauhat=test_cor)
            else:
                srng = stream(seed, 2, si, n, bi, li, int(lab))
                if lab == "1":
                    bg = ds.features[srng.choice(ds.n, min(cfg.kernel_background, ds.n), replace=False)]
                    rows = np.sort(srng.choice(ds.n, min(cfg.kernel_instances, ds.n), replace=False))
                    sm = shap_strategy1(model, bg, ds.features[rows], rng=srng, n_coalitions=cfg.kernel_coalitions)
                    rec = _score(cfg, bases[lab], sm, tau_train[rows], ds.subset(rows), P, test_cor)
                elif lab == "2":
                    sm = shap_strategy2(model, ds.features)
                    rec = _score(cfg, bases[lab], sm, tau_train, ds, P, test_cor)
                else:
                    _, sm = shap_strategy3(model, ds.features, tuner, srng, tau_hat=tau_train)
                    rec = _score(cfg, bases[lab], sm, tau_train, ds, P, test_cor)
        except Exception as exc:  # noqa: BLE001
            rec = replace(bases[lab], status="failed", error=f"{type(exc).__name__}: {exc}")
        timings_lab = dict(timings, shap=1000 * (time.perf_counter() - t0))
        out.append(replace(rec, timings=timings_lab))
    return out


def run_iteration(cfg: BenchConfig, i: int, tuned: dict) -> list:
    seed = iteration_seed(cfg.master_seed, i)
    records = []
    for si, kind in enumerate(cfg.scenarios):
        for n in cfg.n_values:
            test = simulate(Scenario(kind, cfg.test_n if cfg.test_n >= 50 else 50, seed=seed, draw=1))
            for bi, beta in enumerate(cfg.betas):
                ds = simulate(Scenario(kind, n, beta, seed=seed, draw=0))
                for li, learner in enumerate(cfg.learners):
                    tuner = _tuner_for(cfg, tuned, (kind, n, float(beta), learner))
                    records += _cell(cfg, i, seed, si, kind, n, bi, beta, li, learner, ds, test, tuner)
    return records


def _run_chunk(args):
    cfg, idx, tuned = args
    return [run_iteration(cfg, i, tuned) for i in idx]


def run_benchmark(cfg: BenchConfig, tuned: Optional[dict] = None) -> list:
    """All records, ordered by iteration, scenario, n, beta, learner, strategy."""
    tuned = tune_once(cfg) if tuned is None else tuned
    its = list(range(cfg.iterations))
    if cfg.workers == 1:
        per_iter = [run_iteration(cfg, i, tuned) for i in its]
    else:
        chunks = [its[w::cfg.workers] for w in range(cfg.workers)]
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_chunk, [(cfg, c, tuned) for c in chunks]))
        per_iter = [None] * cfg.iterations
        for c, res in zip(chunks, results):
            for i, recs in zip(c, res):
                per_iter[i] = recs
    return [r for recs in per_iter for r in recs]


# ---------------------------------------------------------------- aggregation / output

SUMMARY_KEYS = ("scenario", "n", "beta", "learner", "strategy")


def aggregate(records: Sequence[MetricRecord]) -> list:
    """Mean and standard error of every metric per cell.

    The SE is the population sd (ddof=0) over sqrt(count), so {0, 1} gives 0.354.
    """
    groups: dict = {}
    for r in records:
        groups.setdefault(tuple(getattr(r, k) for k in SUMMARY_KEYS), []).append(r)
    rows = []
    for key, recs in groups.items():
        ok = [r for r in recs if r.status == "ok"]
        row = dict(zip(SUMMARY_KEYS, key))
        row["n_ok"] = len(ok)
        row["n_failed"] = len(recs) - len(ok)
        for m in METRIC_FIELDS:
            vals = np.array([getattr(r, m) for r in ok], dtype=float)
            vals = vals[np.isfinite(vals)]
            row[f"{m}_mean"] = float(vals.mean()) if len(vals) else math.nan
            row[f"{m}_se"] = float(vals.std() / math.sqrt(len(vals))) if len(vals) else math.nan
        rows.append(row)
    return rows


def summary_fields() -> list:
    return list(SUMMARY_KEYS) + ["n_ok", "n_failed"] + [f"{m}_{s}" for m in METRIC_FIELDS for s in ("mean", "se")]


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def record_dict(r: MetricRecord) -> dict:
    return {k: getattr(r, k) for k in RECORD_FIELDS}


def emit(rows, path, fmt: Optional[str] = None) -> Path:
    """Write records or summary rows as CSV (fixed column order) or a JSON array."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".") or "csv"
    dicts = [record_dict(r) if isinstance(r, MetricRecord) else dict(r) for r in rows]
    if rows and isinstance(rows[0], MetricRecord):
        cols = list(RECORD_FIELDS)
    else:
        cols = summary_fields()
    if fmt == "json":
        clean = [{k: (None if isinstance(d.get(k), float) and math.isnan(d[k]) else d.get(k)) for k in cols}
                 for d in dicts]
        path.write_text(json.dumps(clean, indent=1) + "\n", encoding="utf-8")
    elif fmt == "csv":
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for d in dicts:
                w.writerow([_fmt(d.get(k)) for k in cols])
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return path


def emit_timings(records: Sequence[MetricRecord], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "scenario", "n", "beta", "learner", "strategy", "fit_ms", "shap_ms"])
        for r in records:
            w.writerow([r.iteration, r.scenario, r.n, r.beta, r.learner, r.strategy,
                        f"{r.timings.get('fit', math.nan):.1f}", f"{r.timings.get('shap', math.nan):.1f}"])
    return path


def write_outputs(cfg: BenchConfig, records, tuned: dict) -> dict:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "records": emit(records, out / "records.csv"),
        "summary": emit(aggregate(records), out / "summary.csv"),
        "timings": emit_timings(records, out / "timings.csv"),
    }
    meta = {
        "config": cfg.to_dict(),
        "tuning": cfg.tuning,
        "tuned_hyperparams": {"|".join(map(str, k)): {s: asdict(h) for s, h in v.items()} for k, v in tuned.items()},
        "record_columns": list(RECORD_FIELDS),
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    paths["metadata"] = out / "metadata.json"
    return paths


# ---------------------------------------------------------------- cost probe

@dataclass(frozen=True)
class CostRow:
    method: str
    n_coalitions: int
    seconds: float
    mode: str


def cost_probe(p: int = 100, n_c_grid: Sequence[int] = (2, 10, 200), n: int = 600, n_explain: int = 50,
               background: int = 50, repeats: int = 5, seed: int = 1, hp: Optional[Hyperparams] = None) -> list:
    """Wall time of KernelSHAP over a coalition grid versus TreeSHAP on one surrogate.

    The surrogate is a boosted model of a sparse CATE-like surface on ``p``
    covariates. Each timing is the minimum over ``repeats`` interleaved runs. When
    ``p`` exceeds the exact-mode limit, every singleton and its complement
    is enumerated and ``n_c`` further coalitions are sampled.
    """
    rng = stream(seed, 0)
    X = rng.normal(size=(n, p))
    y = (X[:, min(6, p - 1)] > 0) * (X[:, min(7, p - 1)] > 0) + 0.5 * X[:, 0] + rng.normal(0, 0.5, n)
    model = fit_gbt(X, y, hp=hp or Hyperparams(eta=0.1, max_depth=3, n_rounds=200), rng=stream(seed, 1))
    Xe = X[:n_explain]
    bg = X[stream(seed, 2).choice(n, min(background, n), replace=False)]

    tree_fn = lambda: tree_shap(model, Xe)
    exact = p <= EXACT_MAX_P
    kernel_fns = []
    for n_c in n_c_grid:
        if exact:
            fn = lambda n_c=n_c: kernel_shap(model.predict, bg, Xe, mode="exact")
        else:
            fn = lambda n_c=n_c: kernel_shap(model.predict, bg, Xe, mode="sampled", n_coalitions=n_c,
                                             rng=stream(seed, 3, n_c), exact_degree=1)
        kernel_fns.append(fn)
    # warm up (numba compilation, allocator), then interleave repeats so slow drift hits every setting
    tree_fn()
    kernel_fns[0]()
    best = np.full(1 + len(kernel_fns), np.inf)
    for _ in range(repeats):
        for k, fn in enumerate([tree_fn] + kernel_fns):
            t0 = time.perf_counter()
            fn()
            best[k] = min(best[k], time.perf_counter() - t0)
    mode = "exact" if exact else "sampled"
    rows = [CostRow("tree_shap", 0, float(best[0]), "exact")]
    rows += [CostRow("kernel_shap", int(n_c), float(t), mode) for n_c, t in zip(n_c_grid, best[1:])]
    return rows
