"""Discovery-quality metrics for importance vectors and instance-level SHAP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .shapley import ShapMatrix, minmax
from .simgen import g1, g2


def _split(scores, P):
    s = np.abs(np.asarray(scores, dtype=float))
    mask = np.zeros(len(s), dtype=bool)
    mask[list(P)] = True
    if not mask.any() or mask.all():
        raise ValueError("predictive set must be a non-empty proper subset")
    return s, mask


def ranking(scores) -> np.ndarray:
    """Indices by |score| descending; ties keep the lower index first."""
    return np.argsort(-np.abs(np.asarray(scores, dtype=float)), kind="stable")


def top1(scores, P) -> int:
    s, mask = _split(scores, P)
    return int(s[mask].max() >= s[~mask].max())


def net3(scores, P) -> int:
    """1 if any predictive covariate is among the three largest |scores|.

    Candidates tied with the third largest value all count as top-3.
    """
    s, mask = _split(scores, P)
    third = np.sort(s)[::-1][min(2, len(s) - 1)]
    return int(np.any(s[mask] >= third))


def normalize(scores, method: str = "minmax") -> np.ndarray:
    s = np.abs(np.asarray(scores, dtype=float))
    if method == "minmax":
        return minmax(s)
    if method == "max":
        top = s.max()
        return s / top if top > 0 else np.zeros_like(s)
    raise ValueError(f"unknown normalization {method!r}")


def margin(scores, P, method: str = "minmax") -> float:
    s, mask = _split(normalize(scores, method), P)
    return float(s[mask].max() - s[~mask].max())


def abs_cor(u, v) -> float:
    """|Pearson correlation|, 0 when either side is constant."""
    u = np.asarray(u, dtype=float) - np.mean(u)
    v = np.asarray(v, dtype=float) - np.mean(v)
    den = np.sqrt((u @ u) * (v @ v))
    if np.ptp(u) == 0 or np.ptp(v) == 0 or den == 0:
        return 0.0
    return float(min(1.0, abs(u @ v) / den))


@dataclass(frozen=True)
class InstanceLevelStats:
    rho: np.ndarray
    max_P: float
    max_NP: float
    p_win: int


def instance_stats(shap: ShapMatrix, tau_hat, P) -> InstanceLevelStats:
    rho = np.array([abs_cor(shap.phi[:, j], tau_hat) for j in range(shap.phi.shape[1])])
    _, mask = _split(rho, P)
    max_P, max_NP = float(rho[mask].max()), float(rho[~mask].max())
    return InstanceLevelStats(rho=rho, max_P=max_P, max_NP=max_NP, p_win=int(max_P >= max_NP))


def recovery_corr(shap: ShapMatrix, features, x3_col: int, x4_col: int) -> tuple:
    """Correlation of the x3/x4 SHAP columns with the true modifiers g1(x3), g2(x4)."""
    X = np.asarray(features)
    return (abs_cor(shap.phi[:, x3_col], g1(X[:, x3_col])),
            abs_cor(shap.phi[:, x4_col], g2(X[:, x4_col])))
