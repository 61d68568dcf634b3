"""Shared data model: datasets, categorical encoding, fold assignment and CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    feature_names: tuple
    treatment: np.ndarray
    outcome: np.ndarray
    categorical_map: Mapping[str, tuple] = field(default_factory=dict)
    oracle_tau: Optional[np.ndarray] = None
    oracle_predictive_set: Optional[frozenset] = None

    def __post_init__(self):
        X = np.asfortranarray(np.asarray(self.features, dtype=float))
        if X.ndim != 2:
            raise DataError("features must be a 2-d matrix")
        n, p = X.shape
        a = np.asarray(self.treatment)
        y = np.asarray(self.outcome, dtype=float)
        if len(self.feature_names) != p:
            raise DataError(f"{len(self.feature_names)} feature names for {p} columns")
        if a.shape != (n,) or y.shape != (n,):
            raise DataError("treatment and outcome must have one entry per row")
        if not np.all(np.isfinite(X)):
            bad_row, bad_col = np.argwhere(~np.isfinite(X))[0]
            raise DataError(f"non-finite value at row {bad_row}, column {self.feature_names[bad_col]!r}")
        if not np.all(np.isfinite(y)):
            raise DataError(f"non-finite outcome at row {int(np.argmax(~np.isfinite(y)))}")
        if not np.all((a == 0) | (a == 1)):
            raise DataError("non-binary treatment")
        if a.min() == a.max():
            raise DataError("treatment must contain both arms")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "treatment", a.astype(np.int8))
        object.__setattr__(self, "outcome", y)
        if self.oracle_tau is not None:
            tau = np.asarray(self.oracle_tau, dtype=float)
            if tau.shape != (n,):
                raise DataError("oracle_tau length must equal n")
            object.__setattr__(self, "oracle_tau", tau)
        if self.oracle_predictive_set is not None:
            object.__setattr__(self, "oracle_predictive_set", frozenset(int(j) for j in self.oracle_predictive_set))
        for arr in (self.features, self.treatment, self.outcome, self.oracle_tau):
            if arr is not None:
                arr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            features=self.features[rows],
            feature_names=self.feature_names,
            treatment=self.treatment[rows],
            outcome=self.outcome[rows],
            categorical_map=self.categorical_map,
            oracle_tau=None if self.oracle_tau is None else self.oracle_tau[rows],
            oracle_predictive_set=self.oracle_predictive_set,
        )


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: np.ndarray
    K: int

    def __post_init__(self):
        counts = np.bincount(self.fold_of, minlength=self.K)
        if len(counts) != self.K or counts.min() == 0:
            raise ValueError("every fold must be non-empty")
        if counts.max() - counts.min() > 1:
            raise ValueError("fold sizes must differ by at most one")

    def train_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)

    def test_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.K)


def split_folds(n: int, K: int, rng: np.random.Generator) -> FoldAssignment:
    """Balanced random partition of ``range(n)`` into K folds."""
    if K < 2:
        raise ValueError("K must be at least 2")
    if K > n:
        raise ValueError(f"cannot split {n} rows into {K} folds")
    perm = rng.permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[perm] = np.arange(n) % K
    return FoldAssignment(fold_of=fold_of, K=K)


def dummy_encode(levels: Sequence, level_order: Sequence) -> np.ndarray:
    """One-hot encode with the first entry of ``level_order`` as reference.

    Returns an (n, L-1) float matrix; a row of zeros means the reference level.
    """
    level_order = list(level_order)
    if len(level_order) < 2:
        raise DataError("a categorical covariate needs at least two levels")
    if len(set(level_order)) != len(level_order):
        raise DataError("duplicate entries in level_order")
    position = {lvl: i for i, lvl in enumerate(level_order)}
    out = np.zeros((len(levels), len(level_order) - 1))
    for row, value in enumerate(levels):
        try:
            k = position[value]
        except KeyError:
            raise DataError(f"unseen categorical level {value!r}") from None
        if k > 0:
            out[row, k - 1] = 1.0
    return out


def _parse_float(text: str):
    try:
        value = float(text)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def load_csv(
    path,
    outcome_col: str,
    treatment_col: str,
    level_orders: Optional[Mapping[str, Sequence[str]]] = None,
) -> Dataset:
    """Read a comma-separated file with a header row into a Dataset.

    Columns other than outcome and treatment become covariates. A column with
    any non-numeric cell is treated as categorical and dummy coded; its
    reference level is the lexicographically first one unless ``level_orders``
    names an order for it.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if len(set(header)) != len(header):
        dupes = sorted({h for h in header if header.count(h) > 1})
        raise DataError(f"duplicate columns: {dupes}")
    for col in (outcome_col, treatment_col):
        if col not in header:
            raise DataError(f"missing column {col!r}")
    if not body:
        raise DataError(f"{path}: no data rows")
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise DataError(f"row {i + 1}: expected {len(header)} cells, found {len(row)}")
        for j, cell in enumerate(row):
            if cell.strip() == "":
                raise DataError(f"missing value at row {i + 1}, column {header[j]!r}")

    columns = {h: [row[j].strip() for row in body] for j, h in enumerate(header)}

    y = [_parse_float(v) for v in columns[outcome_col]]
    if any(v is None for v in y):
        bad = next(i for i, v in enumerate(y) if v is None)
        raise DataError(f"non-numeric outcome at row {bad + 1}")
    a = [_parse_float(v) for v in columns[treatment_col]]
    for i, v in enumerate(a):
        if v not in (0.0, 1.0):
            raise DataError(f"non-binary treatment at row {i + 1}: {columns[treatment_col][i]!r}")

    level_orders = dict(level_orders or {})
    blocks, names, cat_map = [], [], {}
    for col in header:
        if col in (outcome_col, treatment_col):
            continue
        parsed = [_parse_float(v) for v in columns[col]]
        if all(v is not None for v in parsed):
            blocks.append(np.asarray(parsed)[:, None])
            names.append(col)
            continue
        order = list(level_orders.get(col, sorted(set(columns[col]))))
        enc = dummy_encode(columns[col], order)
        start = len(names)
        names.extend(f"{col}_{lvl}" for lvl in order[1:])
        cat_map[col] = tuple(range(start, start + enc.shape[1]))
        blocks.append(enc)

    if not blocks:
        raise DataError("no covariate columns")
    return Dataset(
        features=np.hstack(blocks),
        feature_names=tuple(names),
        treatment=np.asarray(a, dtype=np.int8),
        outcome=np.asarray(y),
        categorical_map=cat_map,
    )


def write_csv(ds: Dataset, path, outcome_col: str = "y", treatment_col: str = "a") -> None:
    """Write covariates, treatment and outcome with 17 significant digits."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([outcome_col, treatment_col, *ds.feature_names])
        for i in range(ds.n):
            w.writerow(
                [f"{ds.outcome[i]:.17g}", str(int(ds.treatment[i]))]
                + [f"{v:.17g}" for v in ds.features[i]]
            )


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator keyed by ``seed`` and a tuple of stream ids.

    Distinct key tuples give statistically independent streams, so a caller can
    draw e.g. covariates and noise separately and reuse either across runs.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))
