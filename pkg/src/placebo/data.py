"""Observed-data container, CSV ingestion and positivity diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MISSING_COLUMN = "missing_column"
NON_BINARY = "non_binary"
NON_NUMERIC = "non_numeric"
MISSING_VALUE = "missing_value"
NON_FINITE = "non_finite"
EMPTY_FILE = "empty_file"
EMPTY_CELL = "empty_cell"
BAD_WEIGHT = "bad_weight"
SHAPE_MISMATCH = "shape_mismatch"

CELLS = ((1, 1), (1, 0), (0, 1), (0, 0))


class DataError(ValueError):
    """Validation failure; ``code`` is one of the module-level error codes.

    ``row`` is the 1-based data row (header excluded) when the failure is tied to one.
    """

    def __init__(self, code: str, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.code = code
        self.row = row
        self.column = column


def _as_vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != 1:
        raise DataError(SHAPE_MISMATCH, f"{name} must be one-dimensional", column=name)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Rows of (Y, A, S, X) with optional frequency weights.

    ``s == 1`` marks the primary sample, ``s == 0`` the placebo sample. Arrays are
    copied and made read-only on construction.
    """

    y: np.ndarray
    a: np.ndarray
    s: np.ndarray
    x: np.ndarray
    covariate_names: tuple[str, ...]
    weights: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        y = _as_vector(self.y, "y")
        a = _as_vector(self.a, "a")
        s = _as_vector(self.s, "s")
        x = np.array(self.x, dtype=np.float64, copy=True)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        n = y.shape[0]
        names = tuple(str(c) for c in self.covariate_names)
        if a.shape[0] != n or s.shape[0] != n or x.shape[0] != n:
            raise DataError(SHAPE_MISMATCH, "y, a, s and x must have the same number of rows")
        if x.shape[1] != len(names):
            raise DataError(SHAPE_MISMATCH, f"x has {x.shape[1]} columns but {len(names)} names were given")
        if len(set(names)) != len(names):
            raise DataError(SHAPE_MISMATCH, "covariate names must be unique")
        for bad in ("S", "A", "1"):
            if bad in names:
                raise DataError(SHAPE_MISMATCH, f"covariate name {bad!r} is reserved", column=bad)
        if self.weights is None:
            w = np.ones(n)
        else:
            w = _as_vector(self.weights, "weights")
            if w.shape[0] != n:
                raise DataError(SHAPE_MISMATCH, "weights must have one entry per row")
        for name, arr in (("y", y), ("a", a), ("s", s), ("weights", w)):
            bad_rows = np.flatnonzero(~np.isfinite(arr))
            if bad_rows.size:
                raise DataError(NON_FINITE, f"non-finite {name} at row {bad_rows[0] + 1}",
                                row=int(bad_rows[0]) + 1, column=name)
        if x.size and not np.all(np.isfinite(x)):
            r, c = np.argwhere(~np.isfinite(x))[0]
            raise DataError(NON_FINITE, f"non-finite covariate {names[c]} at row {r + 1}",
                            row=int(r) + 1, column=names[c])
        for name, label, arr in (("a", "treatment", a), ("s", "sample indicator", s)):
            bad_rows = np.flatnonzero((arr != 0.0) & (arr != 1.0))
            if bad_rows.size:
                raise DataError(NON_BINARY, f"non-binary {label} at row {bad_rows[0] + 1}",
                                row=int(bad_rows[0]) + 1, column=name)
        bad_rows = np.flatnonzero(w <= 0.0)
        if bad_rows.size:
            raise DataError(BAD_WEIGHT, f"non-positive weight at row {bad_rows[0] + 1}",
                            row=int(bad_rows[0]) + 1, column="weights")
        for sv, av in CELLS:
            if not np.any((s == sv) & (a == av)):
                raise DataError(EMPTY_CELL, f"empty cell ({sv},{av})")
        for arr in (y, a, s, x, w):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n_rows(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.x.shape[1])

    @property
    def n(self) -> float:
        """Total frequency weight (the row count when unweighted)."""
        return float(np.sum(self.weights))

    @property
    def n11(self) -> float:
        return float(np.sum(self.weights * self.s * self.a))

    @property
    def lambda_hat(self) -> float:
        return self.n11 / self.n

    def cell_mask(self, s: int, a: int) -> np.ndarray:
        return (self.s == s) & (self.a == a)

    def cell_counts(self) -> dict[tuple[int, int], int]:
        return {cell: int(np.count_nonzero(self.cell_mask(*cell))) for cell in CELLS}

    def column(self, name: str) -> np.ndarray:
        try:
            return self.x[:, self.covariate_names.index(name)]
        except ValueError:
            raise DataError(MISSING_COLUMN, f"unknown covariate {name!r}", column=name) from None

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.y[rows], self.a[rows], self.s[rows], self.x[rows],
                       self.covariate_names, self.weights[rows])

    def with_outcome(self, y) -> "Dataset":
        return Dataset(y, self.a, self.s, self.x, self.covariate_names, self.weights)


def _parse_float(text: str, row: int, column: str) -> float:
    if text.strip() == "":
        raise DataError(MISSING_VALUE, f"missing value in column {column!r} at row {row}", row=row, column=column)
    try:
        value = float(text)
    except ValueError:
        raise DataError(NON_NUMERIC, f"non-numeric value {text!r} in column {column!r} at row {row}",
                        row=row, column=column) from None
    if not math.isfinite(value):
        raise DataError(NON_FINITE, f"non-finite value in column {column!r} at row {row}", row=row, column=column)
    return value


def load_csv(path, outcome: str = "Y", treatment: str = "A", sample: str = "S",
             covariates: Sequence[str] | None = None, weights: str | None = None) -> Dataset:
    """Read a header-first, comma-separated UTF-8 file into a validated :class:`Dataset`.

    ``covariates`` defaults to every column not otherwise assigned, in file order.
    Row numbers in errors are 1-based and exclude the header.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(EMPTY_FILE, f"{path} is empty") from None
        rows = [r for r in reader if r]
    if not rows:
        raise DataError(EMPTY_FILE, f"{path} has a header but no data rows")
    roles = [outcome, treatment, sample] + ([weights] if weights else [])
    if covariates is None:
        covariates = [h for h in header if h not in roles]
    for name in list(roles) + list(covariates):
        if name not in header:
            raise DataError(MISSING_COLUMN, f"missing column {name!r}", column=name)
    index = {h: i for i, h in enumerate(header)}
    wanted = list(roles) + list(covariates)
    table = np.empty((len(rows), len(wanted)))
    for r, raw in enumerate(rows, start=1):
        if len(raw) != len(header):
            raise DataError(SHAPE_MISMATCH, f"row {r} has {len(raw)} fields, expected {len(header)}", row=r)
        for c, name in enumerate(wanted):
            table[r - 1, c] = _parse_float(raw[index[name]], r, name)
    k = len(roles)
    return Dataset(
        y=table[:, 0],
        a=table[:, 1],
        s=table[:, 2],
        x=table[:, k:],
        covariate_names=tuple(covariates),
        weights=table[:, 3] if weights else None,
    )


def write_csv(d: Dataset, path, outcome: str = "Y", treatment: str = "A", sample: str = "S",
              weights: str | None = None) -> None:
    """Write ``d`` so that :func:`load_csv` with the same column names reproduces it exactly."""
    header = [outcome, treatment, sample] + ([weights] if weights else []) + list(d.covariate_names)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for i in range(d.n_rows):
            vals = [d.y[i], d.a[i], d.s[i]] + ([d.weights[i]] if weights else []) + list(d.x[i])
            out.writerow([format(float(v), ".17g") for v in vals])


@dataclass(frozen=True)
class PositivityReport:
    """Cell counts and the range of diagnostic propensity fits.

    Flagged rows follow the one-sided positivity conditions: ``pi_s(x) >= 1 - eps``,
    ``pi_a(x, 1) >= 1 - eps`` or ``pi_a(x, 0)`` outside ``(eps, 1 - eps)``.
    """

    cell_counts: dict
    epsilon: float
    pi_s_range: tuple[float, float] | None
    pi_a_range: dict | None
    flagged_rows: tuple[int, ...]
    diagnostic_available: bool
    note: str = ""


def positivity_check(d: Dataset, epsilon: float = 0.01) -> PositivityReport:
    """Fit main-effect logistic models for P(S=1|X) and P(A=1|X,S) and report extremes.

    Never raises on near-violations; a failed diagnostic fit sets
    ``diagnostic_available=False``.
    """
    from placebo.design import DesignSpec
    from placebo.nuisance import fit_logistic, predict_pi

    if not 0.0 < epsilon < 0.5:
        raise ValueError("epsilon must lie in (0, 0.5)")
    counts = d.cell_counts()
    names = list(d.covariate_names)
    spec_s = DesignSpec.from_terms([()] + [(c,) for c in names], link="logit")
    spec_a = DesignSpec.from_terms([()] + [(c,) for c in names] + [("S",)], link="logit")
    try:
        fit_s = fit_logistic(d, spec_s, "s")
        fit_a = fit_logistic(d, spec_a, "a")
    except ValueError as exc:
        return PositivityReport(counts, epsilon, None, None, (), False, f"diagnostic unavailable: {exc}")
    if not (fit_s.converged and fit_a.converged):
        return PositivityReport(counts, epsilon, None, None, (), False,
                                "diagnostic unavailable: logistic fit did not converge (separation?)")
    ps = predict_pi(fit_s, d)
    pa1 = predict_pi(fit_a, d, s=1)
    pa0 = predict_pi(fit_a, d, s=0)
    flagged = (ps >= 1.0 - epsilon) | (pa1 >= 1.0 - epsilon) | (pa0 <= epsilon) | (pa0 >= 1.0 - epsilon)
    return PositivityReport(
        cell_counts=counts,
        epsilon=epsilon,
        pi_s_range=(float(ps.min()), float(ps.max())),
        pi_a_range={1: (float(pa1.min()), float(pa1.max())), 0: (float(pa0.min()), float(pa0.max()))},
        flagged_rows=tuple(int(i) for i in np.flatnonzero(flagged)),
        diagnostic_available=True,
    )
