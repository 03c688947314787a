"""Observed-data records, dataset container, and CSV ingestion.

A record carries an optional chart-review label (a grade k/K), the
labeling indicator, surrogate features x, and risk-factor features g.
The dataset holds column arrays internally; records are materialized
on demand. Arrays are frozen after construction so a dataset can be
shared across workers without copying.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError, ParseError, SchemaError

MAX_GRADES = 1000


@dataclass(frozen=True)
class ObservedRecord:
    label: Optional[float]
    labeled: bool
    surrogates: np.ndarray
    risk_factors: np.ndarray


@dataclass(frozen=True)
class CsvSchema:
    """Column naming for dataset files.

    label_col may be empty per row (unlabeled record). x_cols and g_cols
    default to x1..xp / g1..gq discovered from the header. grades
    overrides the inferred label granularity K.
    """

    label_col: str = "y_star"
    x_cols: Optional[tuple] = None
    g_cols: Optional[tuple] = None
    grades: Optional[int] = None


class Dataset:
    """Immutable column-oriented container.

    Attributes
    ----------
    labels : (N,) float array, NaN on unlabeled rows
    labeled : (N,) bool array
    surrogates : (N, p) float array
    risk_factors : (N, q) float array
    grades : int
        Labels take values k/grades for integer k in [0, grades].
    label_index : (N,) int array, k for labeled rows, -1 otherwise
    """

    def __init__(self, labels, labeled, surrogates, risk_factors, grades):
        labels = np.asarray(labels, dtype=float).copy()
        labeled = np.asarray(labeled, dtype=bool).copy()
        surrogates = np.atleast_2d(np.asarray(surrogates, dtype=float)).copy()
        risk_factors = np.atleast_2d(np.asarray(risk_factors, dtype=float)).copy()
        n_records = labels.shape[0]
        if labeled.shape != (n_records,):
            raise SchemaError("labeled flag length mismatch")
        if surrogates.shape[0] != n_records or risk_factors.shape[0] != n_records:
            raise SchemaError("feature row counts do not match label count")
        if not (np.all(np.isfinite(surrogates)) and np.all(np.isfinite(risk_factors))):
            raise DataError("missing or non-finite feature cells are rejected")
        if int(grades) < 1:
            raise DataError("grades must be >= 1")
        obs = labels[labeled]
        if obs.size == 0:
            raise DataError("dataset must contain at least one labeled record")
        if np.any(~np.isfinite(obs)) or np.any((obs < 0) | (obs > 1)):
            raise DataError("labels must lie in [0, 1]")
        if np.any(np.isfinite(labels[~labeled])):
            raise DataError("unlabeled rows must not carry labels")
        k = obs * grades
        if np.any(np.abs(k - np.round(k)) > 1e-9):
            raise DataError(f"labels are not multiples of 1/{int(grades)}")
        self.labels = labels
        self.labeled = labeled
        self.surrogates = surrogates
        self.risk_factors = risk_factors
        self.grades = int(grades)
        idx = np.full(n_records, -1, dtype=int)
        idx[labeled] = np.round(obs * grades).astype(int)
        self.label_index = idx
        for arr in (self.labels, self.labeled, self.surrogates, self.risk_factors, self.label_index):
            arr.setflags(write=False)

    @property
    def num_records(self) -> int:
        return self.labels.shape[0]

    @property
    def num_labeled(self) -> int:
        return int(np.sum(self.labeled))

    @property
    def num_surrogates(self) -> int:
        return self.surrogates.shape[1]

    @property
    def num_risk_factors(self) -> int:
        return self.risk_factors.shape[1]

    @property
    def records(self) -> tuple:
        return tuple(
            ObservedRecord(
                label=float(self.labels[i]) if self.labeled[i] else None,
                labeled=bool(self.labeled[i]),
                surrogates=self.surrogates[i],
                risk_factors=self.risk_factors[i],
            )
            for i in range(self.num_records)
        )

    def take(self, indices) -> "Dataset":
        """Row subset (used by bootstrap resampling)."""
        indices = np.asarray(indices, dtype=int)
        return Dataset(
            self.labels[indices],
            self.labeled[indices],
            self.surrogates[indices],
            self.risk_factors[indices],
            self.grades,
        )


def infer_grades(values) -> int:
    """Least K >= 1 such that every value equals k/K for integer k."""
    values = np.unique(np.asarray(values, dtype=float))
    for k in range(1, MAX_GRADES + 1):
        scaled = values * k
        if np.all(np.abs(scaled - np.round(scaled)) <= 1e-9):
            return k
    raise DataError("could not infer label granularity (K up to 1000)")


def _feature_cols(header, prefix):
    found = []
    for name in header:
        if name.startswith(prefix) and name[len(prefix):].isdigit():
            found.append((int(name[len(prefix):]), name))
    found.sort()
    if found and [i for i, _ in found] != list(range(1, len(found) + 1)):
        raise SchemaError(f"{prefix}-columns must be numbered {prefix}1..{prefix}{len(found)}")
    return tuple(name for _, name in found)


def load_csv(path, schema: Optional[CsvSchema] = None) -> Dataset:
    """Read a dataset file.

    Rows with an empty label cell become unlabeled records. Numeric
    parse failures report the offending row and column. Extra columns
    outside the schema are ignored.
    """
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file: header row required") from None
        header = [h.strip() for h in header]
        if schema.label_col not in header:
            raise SchemaError(f"missing label column {schema.label_col!r}")
        x_cols = schema.x_cols or _feature_cols(header, "x")
        g_cols = schema.g_cols or _feature_cols(header, "g")
        if not x_cols or not g_cols:
            raise SchemaError("need at least one x-column and one g-column")
        missing = [c for c in (*x_cols, *g_cols) if c not in header]
        if missing:
            raise SchemaError(f"missing columns: {missing}")
        pos = {name: header.index(name) for name in (schema.label_col, *x_cols, *g_cols)}

        labels, labeled, xs, gs = [], [], [], []
        for row_num, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise SchemaError(f"row {row_num}: expected {len(header)} cells, got {len(row)}")

            def cell(col):
                raw = row[pos[col]].strip()
                if raw == "":
                    raise DataError(f"row {row_num}: missing value in column {col!r}")
                try:
                    return float(raw)
                except ValueError:
                    raise ParseError(f"row {row_num}, column {col!r}: cannot parse {raw!r}") from None

            raw_label = row[pos[schema.label_col]].strip()
            if raw_label == "":
                labels.append(np.nan)
                labeled.append(False)
            else:
                try:
                    value = float(raw_label)
                except ValueError:
                    raise ParseError(
                        f"row {row_num}, column {schema.label_col!r}: cannot parse {raw_label!r}"
                    ) from None
                if not 0.0 <= value <= 1.0:
                    raise DataError(f"row {row_num}: label {value} outside [0, 1]")
                labels.append(value)
                labeled.append(True)
            xs.append([cell(c) for c in x_cols])
            gs.append([cell(c) for c in g_cols])

    if not labels:
        raise DataError("file contains no data rows")
    labels = np.array(labels)
    labeled = np.array(labeled)
    grades = schema.grades if schema.grades is not None else infer_grades(labels[labeled])
    return Dataset(labels, labeled, np.array(xs), np.array(gs), grades)


def write_csv(dataset: Dataset, path, schema: Optional[CsvSchema] = None) -> None:
    """Write a dataset; floats use repr so a reload round-trips exactly."""
    schema = schema or CsvSchema()
    p, q = dataset.num_surrogates, dataset.num_risk_factors
    x_cols = schema.x_cols or tuple(f"x{j}" for j in range(1, p + 1))
    g_cols = schema.g_cols or tuple(f"g{j}" for j in range(1, q + 1))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([schema.label_col, *x_cols, *g_cols])
        for i in range(dataset.num_records):
            label = repr(float(dataset.labels[i])) if dataset.labeled[i] else ""
            writer.writerow(
                [label]
                + [repr(float(v)) for v in dataset.surrogates[i]]
                + [repr(float(v)) for v in dataset.risk_factors[i]]
            )
