"""Observational data containers, CSV ingestion and the M schedule."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateGroupError, InfeasibleMError, SchemaError, ValidationError


@dataclass(frozen=True)
class ObservedUnit:
    x: tuple
    d_treat: int
    y: float


@dataclass(frozen=True, eq=False)
class Dataset:
    """Covariates ``x`` (n, d), treatment ``d_treat`` (n,) in {0, 1}, outcome ``y`` (n,).

    Arrays are copied on construction and made read-only. Unit ``i`` is row ``i``
    (0-based internally; reports and error messages use 1-based rows).
    """

    x: np.ndarray
    d_treat: np.ndarray
    y: np.ndarray
    parent: np.ndarray | None = None

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        d_treat = np.array(self.d_treat)
        y = np.array(self.y, dtype=float).reshape(-1)
        if x.ndim != 2:
            raise ValidationError("covariates must be a 2-D array")
        n = x.shape[0]
        if d_treat.shape != (n,) or y.shape != (n,):
            raise ValidationError("x, d_treat and y must have the same number of rows")
        bad = ~np.isin(d_treat, (0, 1))
        if bad.any():
            raise ValidationError("treatment must be 0 or 1", row=int(np.argmax(bad)) + 1)
        bad = ~(np.isfinite(x).all(axis=1) & np.isfinite(y))
        if bad.any():
            raise ValidationError("non-finite value", row=int(np.argmax(bad)) + 1)
        d_treat = d_treat.astype(np.int8)
        n1 = int(d_treat.sum())
        if n1 == 0 or n1 == n:
            raise DegenerateGroupError(
                f"need at least one treated and one control unit (n0={n - n1}, n1={n1})"
            )
        for name, arr in (("x", x), ("d_treat", d_treat), ("y", y)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.parent is not None:
            parent = np.array(self.parent, dtype=np.intp)
            parent.setflags(write=False)
            object.__setattr__(self, "parent", parent)

    @classmethod
    def from_units(cls, units: Sequence[ObservedUnit]) -> "Dataset":
        if not units:
            raise DegenerateGroupError("empty dataset")
        dims = {len(u.x) for u in units}
        if len(dims) != 1:
            raise ValidationError("units have differing covariate dimension")
        return cls(
            x=np.array([u.x for u in units], dtype=float),
            d_treat=np.array([u.d_treat for u in units]),
            y=np.array([u.y for u in units], dtype=float),
        )

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def n1(self) -> int:
        return int(self.d_treat.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    def units(self) -> list[ObservedUnit]:
        return [
            ObservedUnit(tuple(float(v) for v in self.x[i]), int(self.d_treat[i]), float(self.y[i]))
            for i in range(self.n)
        ]

    def group(self, w: int) -> np.ndarray:
        """Row indices of group ``w`` in ascending order."""
        return np.flatnonzero(self.d_treat == w)

    def with_outcome(self, y) -> "Dataset":
        return Dataset(self.x, self.d_treat, y, self.parent)

    def summary(self) -> dict:
        cols = {
            f"x{k + 1}": [float(self.x[:, k].min()), float(self.x[:, k].max())]
            for k in range(self.d)
        }
        cols["y"] = [float(self.y.min()), float(self.y.max())]
        return {"n": self.n, "n0": self.n0, "n1": self.n1, "d": self.d, "ranges": cols}


@dataclass(frozen=True)
class ColumnSchema:
    """Column mapping for CSV input. ``x_cols=None`` means every other column."""

    x_cols: tuple | None = None
    d_col: str = "d"
    y_col: str = "y"


def load_dataset(path, schema: ColumnSchema | None = None) -> Dataset:
    schema = schema or ColumnSchema()
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DegenerateGroupError(f"{path}: empty file")
        header = [h.strip() for h in header]
        rows = [r for r in reader if r and any(c.strip() for c in r)]

    def col(name):
        try:
            return header.index(name)
        except ValueError:
            raise SchemaError(f"{path}: missing column {name!r} (have {header})") from None

    d_idx, y_idx = col(schema.d_col), col(schema.y_col)
    if schema.x_cols is None:
        x_idx = [k for k in range(len(header)) if k not in (d_idx, y_idx)]
    else:
        x_idx = [col(c) for c in schema.x_cols]
    if not x_idx:
        raise SchemaError(f"{path}: no covariate columns")

    x = np.empty((len(rows), len(x_idx)))
    d_treat = np.empty(len(rows), dtype=np.int8)
    y = np.empty(len(rows))
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ValidationError(f"expected {len(header)} fields, got {len(row)}", row=r)
        try:
            vals = [float(row[k]) for k in x_idx]
            yv = float(row[y_idx])
        except ValueError as exc:
            raise ValidationError(str(exc), row=r) from None
        if not (all(map(math.isfinite, vals)) and math.isfinite(yv)):
            raise ValidationError("non-finite value", row=r)
        dv = row[d_idx].strip()
        if dv not in ("0", "1"):
            raise ValidationError(f"treatment must be 0 or 1, got {dv!r}", row=r)
        x[r - 1] = vals
        d_treat[r - 1] = int(dv)
        y[r - 1] = yv
    if len(rows) == 0:
        raise DegenerateGroupError(f"{path}: no data rows")
    return Dataset(x, d_treat, y)


def write_dataset(dataset: Dataset, path, schema: ColumnSchema | None = None) -> None:
    schema = schema or ColumnSchema()
    x_cols = schema.x_cols or tuple(f"x{k + 1}" for k in range(dataset.d))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*x_cols, schema.d_col, schema.y_col])
        for i in range(dataset.n):
            w.writerow([*map(repr, dataset.x[i].tolist()), int(dataset.d_treat[i]), repr(float(dataset.y[i]))])


def gamma_exponent(d: int, gamma_ells: dict) -> float:
    """Upper limit for the growth exponent of M under bias correction.

    ``gamma_ells`` maps each derivative order ``l = 1..floor(d/2)`` to the
    uniform convergence rate exponent of the fitted regression's l-th
    derivatives. For ``d = 1`` no rates are needed and the limit is 1/2.
    """
    half = d // 2
    missing = [l for l in range(1, half + 1) if l not in gamma_ells]
    if missing:
        raise ValidationError(f"missing rate exponents for derivative orders {missing}")
    terms = [1.0 - (0.5 - gamma_ells[l]) * d / l for l in range(1, half + 1)]
    return min([*terms, 1.0 - (d / 2) / (half + 1)])


@dataclass(frozen=True)
class MSchedule:
    mode: str = "power-rule"
    fixed_m: int | None = None
    exponent: float = 0.4
    gamma_inputs: dict | None = field(default=None)

    def __post_init__(self):
        if self.mode == "fixed":
            if self.fixed_m is None or int(self.fixed_m) < 1:
                raise ValidationError("fixed schedule needs a positive fixed_m")
        elif self.mode == "power-rule":
            if not 0.0 < self.exponent < 1.0:
                raise ValidationError(f"exponent must lie in (0, 1), got {self.exponent}")
        else:
            raise ValidationError(f"unknown schedule mode {self.mode!r}")

    @classmethod
    def fixed(cls, m: int) -> "MSchedule":
        return cls(mode="fixed", fixed_m=int(m))

    @classmethod
    def power(cls, exponent: float = 0.4, gamma_inputs=None) -> "MSchedule":
        return cls(mode="power-rule", exponent=float(exponent), gamma_inputs=gamma_inputs)

    def power_m(self, n: int) -> int:
        return max(2, math.floor(n ** self.exponent + 0.5))

    def describe(self) -> str:
        if self.mode == "fixed":
            return f"fixed:{self.fixed_m}"
        return f"power:{self.exponent:g}"


def resolve_m(schedule: MSchedule, dataset: Dataset) -> int:
    smallest = min(dataset.n0, dataset.n1)
    if schedule.mode == "fixed":
        if schedule.fixed_m > smallest:
            raise InfeasibleMError(
                f"M={schedule.fixed_m} exceeds the smaller group size {smallest}"
            )
        return int(schedule.fixed_m)
    if schedule.gamma_inputs:
        gamma = gamma_exponent(dataset.d, {int(k): float(v) for k, v in schedule.gamma_inputs.items()})
        if schedule.exponent >= gamma:
            warnings.warn(
                f"M exponent {schedule.exponent} is not below the bias-correction limit {gamma:.4f}",
                stacklevel=2,
            )
    return max(1, min(schedule.power_m(dataset.n), smallest - 1))
