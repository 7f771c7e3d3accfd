"""Sample representation, heterogeneity column selection and fold partitions.

Every downstream module consumes an :class:`ObservationTable`. The table is
immutable: its arrays are flagged read-only at construction so that parallel
workers can share it without copies.
"""

from __future__ import annotations

import csv
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

OVERLAP_FLOOR = 0.01


class DataError(ValueError):
    """Base class for input validation failures."""


class SchemaError(DataError):
    """A required column or schema key is missing."""


class OverlapError(DataError):
    """Propensity values violate the overlap floor."""


class RowError(DataError):
    """One or more rows failed validation; ``rows`` lists their indices."""

    def __init__(self, message: str, rows: Sequence[int]):
        super().__init__(message)
        self.rows = list(rows)


class ConfigError(ValueError):
    """Invalid run configuration (fold counts, replication counts, ...)."""


def _frozen(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ObservationTable:
    """Observed sample ``(X, D, S, Y*S)`` plus known design propensities.

    ``y_obs`` is sanitized to ``0.0`` wherever ``s_select == 0`` so that no
    computation can pick up a value that was never observed.
    """

    x: np.ndarray
    d_treat: np.ndarray
    s_select: np.ndarray
    y_obs: np.ndarray
    propensity: np.ndarray
    columns: tuple[str, ...] = ()
    overlap_floor: float = OVERLAP_FLOOR

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        n = x.shape[0]
        d = np.asarray(self.d_treat)
        s = np.asarray(self.s_select)
        y = np.asarray(self.y_obs, dtype=float)
        e = np.asarray(self.propensity, dtype=float)
        if e.ndim == 0:
            e = np.full(n, float(e))
        for name, arr in (("d_treat", d), ("s_select", s), ("y_obs", y), ("propensity", e)):
            if arr.shape != (n,):
                raise DataError(f"{name} has shape {arr.shape}, expected ({n},)")
        for name, arr in (("d_treat", d), ("s_select", s)):
            bad = np.flatnonzero(~np.isin(arr, (0, 1)))
            if bad.size:
                raise RowError(f"{name} must be 0/1; invalid rows {bad[:10].tolist()}", bad)
        if not np.all(np.isfinite(x)):
            bad = np.flatnonzero(~np.all(np.isfinite(x), axis=1))
            raise RowError(f"non-finite covariates in rows {bad[:10].tolist()}", bad)
        lo, hi = self.overlap_floor, 1.0 - self.overlap_floor
        bad = np.flatnonzero(~((e >= lo) & (e <= hi)))
        if bad.size:
            raise OverlapError(
                f"propensity outside [{lo}, {hi}] in rows {bad[:10].tolist()}"
            )
        s = s.astype(np.int8)
        y_clean = np.where(s == 1, y, 0.0)
        bad = np.flatnonzero((s == 1) & ~np.isfinite(y_clean))
        if bad.size:
            raise RowError(f"missing outcome for selected rows {bad[:10].tolist()}", bad)
        cols = tuple(self.columns) if self.columns else tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(cols) != x.shape[1]:
            raise DataError("column names do not match covariate count")
        object.__setattr__(self, "x", _frozen(x, float))
        object.__setattr__(self, "d_treat", _frozen(d, np.int8))
        object.__setattr__(self, "s_select", _frozen(s, np.int8))
        object.__setattr__(self, "y_obs", _frozen(y_clean, float))
        object.__setattr__(self, "propensity", _frozen(e, float))
        object.__setattr__(self, "columns", cols)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "ObservationTable":
        idx = np.asarray(idx)
        return ObservationTable(
            x=self.x[idx],
            d_treat=self.d_treat[idx],
            s_select=self.s_select[idx],
            y_obs=self.y_obs[idx],
            propensity=self.propensity[idx],
            columns=self.columns,
            overlap_floor=self.overlap_floor,
        )


@dataclass(frozen=True)
class HeterogeneitySpec:
    """Columns of ``x`` that define the heterogeneity variable ``Z``.

    ``kinds`` holds ``"continuous"`` or ``"categorical"`` per column. A
    categorical column is expected to hold a small set of numeric codes.
    """

    columns: tuple[int, ...]
    kinds: tuple[str, ...] = ()

    def __post_init__(self):
        cols = tuple(int(c) for c in self.columns)
        if not cols:
            raise ConfigError("heterogeneity spec needs at least one column")
        kinds = tuple(self.kinds) if self.kinds else ("continuous",) * len(cols)
        if len(kinds) != len(cols):
            raise ConfigError("one kind per heterogeneity column is required")
        for k in kinds:
            if k not in ("continuous", "categorical"):
                raise ConfigError(f"unknown heterogeneity kind {k!r}")
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "kinds", kinds)

    def validate(self, table: ObservationTable) -> None:
        for c in self.columns:
            if c < 0 or c >= table.p:
                raise ConfigError(f"heterogeneity column {c} out of range for {table.p} covariates")

    def values(self, table: ObservationTable) -> np.ndarray:
        self.validate(table)
        return table.x[:, list(self.columns)]


@dataclass(frozen=True)
class FoldAssignment:
    """Balanced K-fold partition; ``fold_of`` holds values ``0..k-1``."""

    k: int
    fold_of: np.ndarray
    seed: int

    def indices(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == f)

    def complement(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != f)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.k)


def make_folds(n: int, k: int, seed: int) -> FoldAssignment:
    """Random balanced partition of ``n`` units into ``k`` folds.

    The assignment depends on ``(seed, n, k)`` only. Fold sizes differ by at
    most one; the first ``n mod k`` folds receive the extra unit.
    """
    if k < 2:
        raise ConfigError(f"fold count must be at least 2, got {k}")
    if n < 2 * k:
        raise ConfigError(f"need n >= 2k for cross-fitting (n={n}, k={k})")
    labels = np.arange(n) % k
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), n, k])).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[perm] = labels
    return FoldAssignment(k=k, fold_of=_frozen(fold_of, np.int64), seed=int(seed))


_REQUIRED_KEYS = ("treatment", "selection", "outcome")


def load_csv(path, schema: Mapping, delimiter: str = ",") -> ObservationTable:
    """Read a CSV file into a validated :class:`ObservationTable`.

    ``schema`` keys: ``treatment``, ``selection``, ``outcome``, ``covariates``
    (list of column names), optional ``categorical`` (subset of covariates to
    one-hot encode), and exactly one of ``propensity`` (column name) or
    ``propensity_value`` (constant).
    """
    for key in _REQUIRED_KEYS:
        if key not in schema:
            raise SchemaError(f"schema lacks the {key!r} column")
    if ("propensity" in schema) == ("propensity_value" in schema):
        raise SchemaError("schema needs exactly one of 'propensity' or 'propensity_value'")
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file {path} does not exist")
    frame = pd.read_csv(path, sep=delimiter, float_precision="round_trip")
    covs = list(schema.get("covariates", []))
    cats = list(schema.get("categorical", []))
    needed = [schema[k] for k in _REQUIRED_KEYS] + covs
    if "propensity" in schema:
        needed.append(schema["propensity"])
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise SchemaError(f"columns missing from {path.name}: {missing}")
    unknown_cats = [c for c in cats if c not in covs]
    if unknown_cats:
        raise SchemaError(f"categorical columns not among covariates: {unknown_cats}")

    bad_rows: list[int] = []
    if covs:
        bad_rows += np.flatnonzero(frame[covs].isna().any(axis=1).to_numpy()).tolist()
    for role in ("treatment", "selection"):
        col = pd.to_numeric(frame[schema[role]], errors="coerce")
        bad_rows += np.flatnonzero(~col.isin([0, 1]).to_numpy()).tolist()
    if bad_rows:
        rows = sorted(set(bad_rows))
        for r in rows[:20]:
            print(f"[load_csv] rejected row {r}", file=sys.stderr)
        raise RowError(f"invalid rows (missing covariates or non-binary D/S): {rows[:20]}", rows)

    d = frame[schema["treatment"]].to_numpy(dtype=float).astype(int)
    s = frame[schema["selection"]].to_numpy(dtype=float).astype(int)
    y = pd.to_numeric(frame[schema["outcome"]], errors="coerce").to_numpy(dtype=float)
    y = np.where(s == 1, y, 0.0)
    if "propensity" in schema:
        e = pd.to_numeric(frame[schema["propensity"]], errors="coerce").to_numpy(dtype=float)
    else:
        e = np.full(len(frame), float(schema["propensity_value"]))
    bad = np.flatnonzero(~((e > 0) & (e < 1)))
    if bad.size:
        raise OverlapError(f"propensity outside (0,1) in rows {bad[:20].tolist()}")

    blocks, names = [], []
    for c in covs:
        if c in cats:
            levels = sorted(frame[c].unique().tolist(), key=str)
            for lev in levels:
                blocks.append((frame[c] == lev).to_numpy(dtype=float))
                names.append(f"{c}={lev}")
        else:
            blocks.append(pd.to_numeric(frame[c], errors="coerce").to_numpy(dtype=float))
            names.append(c)
    x = np.column_stack(blocks) if blocks else np.zeros((len(frame), 0))
    return ObservationTable(
        x=x, d_treat=d, s_select=s, y_obs=y, propensity=e, columns=tuple(names),
        overlap_floor=float(schema.get("overlap_floor", OVERLAP_FLOOR)),
    )


def write_csv(table: ObservationTable, path, delimiter: str = ",") -> dict:
    """Write ``table`` so that :func:`load_csv` with the returned schema
    reproduces it exactly (floats are written with ``repr``)."""
    path = Path(path)
    header = list(table.columns) + ["D", "S", "Y", "e"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        for i in range(table.n):
            row = [repr(float(v)) for v in table.x[i]]
            row += [int(table.d_treat[i]), int(table.s_select[i])]
            row += [repr(float(table.y_obs[i])) if table.s_select[i] else "", repr(float(table.propensity[i]))]
            w.writerow(row)
    return {
        "treatment": "D", "selection": "S", "outcome": "Y", "propensity": "e",
        "covariates": list(table.columns),
    }
