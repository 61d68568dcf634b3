"""Seeded generators for the benchmark and toy simulation models.

Every draw uses three independent counter-based streams (covariates,
treatment, noise), so changing the prognostic strength ``beta`` reuses the
same covariates, assignments and residuals bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from .core import Dataset, stream

KINDS = ("SIN_TOY", "TLEARN_TOY", "HEAD2HEAD", "S2", "S3")

# numeric codes of the three equiprobable x2 levels inside the prognostic score
X2_CODES = (1.0, 2.0, 3.0)

G1_A, G1_B = 0.625, 5.0
G2_C, G2_D = 0.625, 20.0
P_RCT_S2 = 0.75
S3_INTERCEPT, S3_SLOPE = -2.4, -0.2

_COVARIATES, _TREATMENT, _NOISE = 0, 1, 2


@dataclass(frozen=True)
class Scenario:
    kind: str
    n: int
    beta: float = 1.0
    seed: int = 0
    draw: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.n < 50:
            raise ValueError("n must be at least 50")


@dataclass(frozen=True)
class OracleStats:
    mean_tau: float
    prevalence: float
    subgroup_effect: float
    cor_tau_g1: float
    cor_tau_g2: float
    treated_fraction: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def g1(x):
    x = np.asarray(x, dtype=float)
    flat = G1_A - G1_B * 0.25
    return np.where((x >= 0) & (x <= 1), G1_A - G1_B * (x - 0.5) ** 2, flat)


def g2(x):
    x = np.asarray(x, dtype=float)
    mid = G2_C / (1.0 + np.exp(-G2_D * (np.clip(x, 0, 1) - 0.5)))
    return np.where(x < 0, 0.0, np.where(x > 1, G2_C, mid))


S_FEATURE_NAMES = ("x1", "x2_2", "x2_3") + tuple(f"x{j}" for j in range(3, 20))
S_PREDICTIVE = frozenset({S_FEATURE_NAMES.index("x3"), S_FEATURE_NAMES.index("x4")})


def _s_draw(n, seed, draw):
    """Raw S2/S3 ingredients: continuous covariates x1,x3..x19, x2 level index, uniforms, noise."""
    rc = stream(seed, draw, _COVARIATES)
    cont = np.empty((n, 18))
    cont[:, :8] = rc.normal(0.5, 1.0, size=(n, 8))      # x1, x3..x9
    cont[:, 8:] = rc.normal(0.0, 1.0, size=(n, 10))     # x10..x19
    level = rc.integers(0, 3, size=n)
    u = stream(seed, draw, _TREATMENT).random(n)
    eps = stream(seed, draw, _NOISE).normal(0.0, 1.0, size=n)
    return cont, level, u, eps


def _s_parts(cont, level):
    x = {1: cont[:, 0]}
    for j in range(3, 10):
        x[j] = cont[:, j - 2]
    x2 = np.asarray(X2_CODES)[level]
    k1 = -(x[1] + 5.0 * x2) + 2.0 * (x[5] + x[6] + x[7] + x[8] + x[9])
    k2 = g1(x[3]) + g2(x[4])
    return k1, k2


def s3_propensity(k1):
    return 1.0 / (1.0 + np.exp(-(S3_INTERCEPT + S3_SLOPE * k1)))


def _s_features(cont, level):
    n = len(level)
    X = np.empty((n, 20))
    X[:, 0] = cont[:, 0]
    X[:, 1] = level == 1
    X[:, 2] = level == 2
    X[:, 3:] = cont[:, 1:]
    return X


def _simulate_s(sc: Scenario) -> Dataset:
    cont, level, u, eps = _s_draw(sc.n, sc.seed, sc.draw)
    k1, k2 = _s_parts(cont, level)
    prob = np.full(sc.n, P_RCT_S2) if sc.kind == "S2" else s3_propensity(k1)
    a = (u < prob).astype(np.int8)
    y = 100.0 + sc.beta * k1 + k2 * a + eps
    return Dataset(
        features=_s_features(cont, level),
        feature_names=S_FEATURE_NAMES,
        treatment=a,
        outcome=y,
        categorical_map={"x2": (1, 2)},
        oracle_tau=k2,
        oracle_predictive_set=S_PREDICTIVE,
    )


def _names(p):
    return tuple(f"x{j + 1}" for j in range(p))


def _simulate_toy(sc: Scenario) -> Dataset:
    rc = stream(sc.seed, sc.draw, _COVARIATES)
    u = stream(sc.seed, sc.draw, _TREATMENT).random(sc.n)
    rn = stream(sc.seed, sc.draw, _NOISE)
    if sc.kind == "SIN_TOY":
        X = rc.normal(size=(sc.n, 50))
        a = (u < 0.5).astype(np.int8)
        y = np.sin(np.pi * X[:, 0]) + rn.normal(0.0, 1.0, size=sc.n)
        tau, pred = np.zeros(sc.n), frozenset()
    elif sc.kind == "TLEARN_TOY":
        X = rc.normal(size=(sc.n, 5))
        a = (u < 0.5).astype(np.int8)
        tau = 2.0 * (X[:, 2] > 0)
        y = -1.0 + X[:, 0] + X[:, 1] + tau * a + rn.normal(0.0, 0.1, size=sc.n)
        pred = frozenset({2})
    else:  # HEAD2HEAD
        X = rc.normal(size=(sc.n, 20))
        a = (u < 0.5).astype(np.int8)
        tau = ((X[:, 6] > 0) & (X[:, 7] > 0)).astype(float)
        y = -1.0 + 3.0 * X[:, :5].sum(axis=1) + tau * a + rn.normal(0.0, 0.5, size=sc.n)
        pred = frozenset({6, 7})
    return Dataset(features=X, feature_names=_names(X.shape[1]), treatment=a, outcome=y,
                   oracle_tau=tau, oracle_predictive_set=pred)


def simulate(sc: Scenario) -> Dataset:
    if sc.kind in ("S2", "S3"):
        return _simulate_s(sc)
    return _simulate_toy(sc)


def oracle_stats(sc: Scenario, n_mc: int = 1_000_000, chunk: int = 250_000) -> OracleStats:
    """Monte Carlo summaries of the true CATE surface for S2/S3 scenarios."""
    if sc.kind not in ("S2", "S3"):
        raise ValueError("oracle statistics are defined for S2 and S3")
    sums = np.zeros(12)
    done = 0
    while done < n_mc:
        m = min(chunk, n_mc - done)
        cont, level, u, _ = _s_draw(m, sc.seed, sc.draw * 1_000_003 + done // chunk)
        k1, k2 = _s_parts(cont, level)
        prob = np.full(m, P_RCT_S2) if sc.kind == "S2" else s3_propensity(k1)
        a = u < prob
        a1, a2 = g1(cont[:, 1]), g2(cont[:, 2])
        pos = k2 > 0
        sums += [k2.sum(), pos.sum(), k2[pos].sum(), (k2 * k2).sum(), a1.sum(), (a1 * a1).sum(),
                 (k2 * a1).sum(), a2.sum(), (a2 * a2).sum(), (k2 * a2).sum(), a.sum(), m]
        done += m
    (s_t, s_pos, s_tpos, s_tt, s_1, s_11, s_t1, s_2, s_22, s_t2, s_a, N) = sums

    def cor(s_x, s_xx, s_xt):
        cov = s_xt / N - (s_x / N) * (s_t / N)
        vx = s_xx / N - (s_x / N) ** 2
        vt = s_tt / N - (s_t / N) ** 2
        return float(cov / np.sqrt(vx * vt))

    return OracleStats(
        mean_tau=float(s_t / N),
        prevalence=float(s_pos / N),
        subgroup_effect=float(s_tpos / s_pos),
        cor_tau_g1=cor(s_1, s_11, s_t1),
        cor_tau_g2=cor(s_2, s_22, s_t2),
        treated_fraction=float(s_a / N),
    )


def beta_sweep(sc: Scenario, betas) -> list:
    """One dataset per beta, all sharing covariates, assignments and residuals."""
    return [simulate(replace(sc, beta=float(b))) for b in betas]


def predictive_columns(ds: Dataset) -> Optional[frozenset]:
    return ds.oracle_predictive_set
