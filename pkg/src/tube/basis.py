"""Basis expansions for the nonparametric components.

Natural cubic splines (truncated-power construction, linear beyond the
boundary knots), dummy indicators, joint SNP-combination indicators,
and a raw linear passthrough. Every expansion returned here carries an
intercept as its first column; callers concatenating several blocks
drop the duplicates (see `combined_design`).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, DegenerateInputError

logger = logging.getLogger(__name__)

SNP_COMBINATION_CAP = 81


def sieve_dimension(num_records: int) -> int:
    """Default growth rule for the basis dimension: ceil(N^(1/3)).

    Satisfies N^(1/4) <= J <= N^(1/2) for N >= 16. Exact cube roots are
    recognized despite floating-point representation (1e6 -> 100).
    """
    if num_records < 1:
        raise DataError("record count must be positive")
    root = num_records ** (1.0 / 3.0)
    nearest = round(root)
    if abs(root - nearest) < 1e-9:
        return int(nearest)
    return int(math.ceil(root))


@dataclass(frozen=True)
class BasisSpec:
    """Recipe for one basis block.

    kind: natural_spline | dummy | snp_category | linear.
    df: total column count including the intercept (natural_spline only).
    knots: resolved knot vector (natural_spline), boundary knots included.
    levels: resolved level values (dummy) or dosage combinations
    (snp_category, tuples). Unresolved specs carry None and are filled
    from data by `resolve_spec`.
    """

    kind: str
    df: Optional[int] = None
    knots: Optional[tuple] = None
    levels: Optional[tuple] = None

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.df is not None:
            out["df"] = self.df
        if self.knots is not None:
            out["knots"] = list(self.knots)
        if self.levels is not None:
            out["levels"] = [list(lv) if isinstance(lv, tuple) else lv for lv in self.levels]
        return out

    @staticmethod
    def from_dict(d: dict) -> "BasisSpec":
        kind = d.get("kind")
        if kind not in ("natural_spline", "dummy", "snp_category", "linear"):
            raise ConfigError(f"unknown basis kind: {kind!r}")
        knots = d.get("knots")
        levels = d.get("levels")
        return BasisSpec(
            kind=kind,
            df=d.get("df"),
            knots=tuple(knots) if knots is not None else None,
            levels=tuple(tuple(lv) if isinstance(lv, list) else lv for lv in levels)
            if levels is not None
            else None,
        )


def _spline_knots(x: np.ndarray, df: int) -> tuple:
    """Boundary knots at min/max, df-2 interior knots at equally spaced
    quantiles. Duplicate knots collapse with a logged warning (df drops)."""
    if df < 2:
        raise ConfigError("natural_spline needs df >= 2")
    lo, hi = float(np.min(x)), float(np.max(x))
    if lo == hi:
        raise DegenerateInputError("constant column cannot support a spline")
    probs = np.linspace(0.0, 1.0, df)
    knots = np.quantile(x, probs)
    knots[0], knots[-1] = lo, hi
    unique = np.unique(knots)
    if unique.size < knots.size:
        logger.warning(
            "collapsed %d tied knots; spline df reduced %d -> %d",
            knots.size - unique.size,
            df,
            unique.size,
        )
    if unique.size < 2:
        raise DegenerateInputError("fewer than 2 distinct knots")
    return tuple(float(k) for k in unique)


def natural_spline_basis(x, spec: BasisSpec) -> np.ndarray:
    """Natural cubic spline design, first column intercept, second raw x.

    Uses the truncated-power representation
        d_k(x) = [(x - t_k)_+^3 - (x - t_K)_+^3] / (t_K - t_k)
        N_k(x) = d_k(x) - d_{K-1}(x),   k = 1..K-2,
    which is twice continuously differentiable and exactly linear
    outside [t_1, t_K]. With K knots the space has dimension K, so a
    resolved df-4 spec yields 4 columns.
    """
    x = np.asarray(x, dtype=float).ravel()
    if spec.kind != "natural_spline":
        raise ConfigError("spec.kind must be natural_spline")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite values in spline input")
    if spec.knots is not None:
        knots = np.asarray(spec.knots, dtype=float)
        if knots.ndim != 1 or knots.size < 2 or np.any(np.diff(knots) <= 0):
            raise ConfigError("knots must be strictly increasing, length >= 2")
    else:
        if np.unique(x).size < 2:
            raise DegenerateInputError("fewer than 2 distinct values")
        knots = np.asarray(_spline_knots(x, spec.df if spec.df is not None else 4))
    K = knots.size
    cols = [np.ones_like(x), x]
    if K > 2:
        cubed = np.maximum(x[:, None] - knots[None, :], 0.0) ** 3
        d = (cubed[:, :-1] - cubed[:, -1:]) / (knots[-1] - knots[:-1])[None, :]
        last = d[:, -1]
        for k in range(K - 2):
            cols.append(d[:, k] - last)
    return np.column_stack(cols)


def dummy_basis(x, spec: BasisSpec) -> np.ndarray:
    """Intercept plus one indicator per non-reference level.

    Reference level is the smallest observed level. Evaluation at a
    level absent from the resolved spec is an error.
    """
    x = np.asarray(x, dtype=float).ravel()
    if spec.kind != "dummy":
        raise ConfigError("spec.kind must be dummy")
    if spec.levels is not None:
        levels = [float(lv) for lv in spec.levels]
    else:
        levels = sorted(float(v) for v in np.unique(x))
        if len(levels) < 2:
            raise DegenerateInputError("single-level column")
    known = np.isin(x, levels)
    if not np.all(known):
        bad = x[~known][0]
        raise DataError(f"unseen level at evaluation time: {bad!r}")
    cols = [np.ones_like(x)]
    for lv in levels[1:]:
        cols.append((x == lv).astype(float))
    return np.column_stack(cols)


def snp_category_basis(g, spec: Optional[BasisSpec] = None, cap: int = SNP_COMBINATION_CAP) -> np.ndarray:
    """Joint indicators over observed SNP dosage combinations.

    One column per observed combination except the most frequent, which
    is the reference, plus an intercept. A single column reduces to a
    dummy expansion on its dosage levels.
    """
    g = np.asarray(g, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    if not np.all(np.isin(g, (0.0, 1.0, 2.0))):
        raise DataError("SNP dosages must be in {0, 1, 2}")
    if 3 ** g.shape[1] > cap:
        raise ConfigError(f"combination count 3^{g.shape[1]} exceeds cap {cap}")
    rows = [tuple(row) for row in g]
    if spec is not None and spec.levels is not None:
        combos = [tuple(float(v) for v in lv) for lv in spec.levels]
    else:
        counts: dict = {}
        for r in rows:
            counts[r] = counts.get(r, 0) + 1
        reference = max(sorted(counts), key=lambda r: counts[r])
        combos = [reference] + sorted(c for c in counts if c != reference)
    index = {c: i for i, c in enumerate(combos)}
    out = np.zeros((g.shape[0], len(combos)))
    out[:, 0] = 1.0
    for i, r in enumerate(rows):
        j = index.get(r)
        if j is None:
            raise DataError(f"unseen dosage combination at evaluation time: {r}")
        if j > 0:
            out[i, j] = 1.0
    return out


def linear_basis(x, spec: Optional[BasisSpec] = None) -> np.ndarray:
    """Intercept plus the raw column."""
    x = np.asarray(x, dtype=float).ravel()
    return np.column_stack([np.ones_like(x), x])


def resolve_spec(spec: BasisSpec, x) -> BasisSpec:
    """Fill data-derived fields (knots, levels) so the spec can be
    serialized and later evaluated on new data."""
    x = np.asarray(x, dtype=float)
    if spec.kind == "natural_spline":
        if spec.knots is not None:
            return spec
        if np.unique(x).size < 2:
            raise DegenerateInputError("fewer than 2 distinct values")
        return replace(spec, knots=_spline_knots(x.ravel(), spec.df if spec.df is not None else 4))
    if spec.kind == "dummy":
        if spec.levels is not None:
            return spec
        levels = tuple(sorted(float(v) for v in np.unique(x)))
        if len(levels) < 2:
            raise DegenerateInputError("single-level column")
        return replace(spec, levels=levels)
    if spec.kind == "snp_category":
        if spec.levels is not None:
            return spec
        m = x if x.ndim == 2 else x[:, None]
        if not np.all(np.isin(m, (0.0, 1.0, 2.0))):
            raise DataError("SNP dosages must be in {0, 1, 2}")
        rows = [tuple(row) for row in m]
        counts: dict = {}
        for r in rows:
            counts[r] = counts.get(r, 0) + 1
        reference = max(sorted(counts), key=lambda r: counts[r])
        combos = (reference, *sorted(c for c in counts if c != reference))
        return replace(spec, levels=combos)
    if spec.kind == "linear":
        return spec
    raise ConfigError(f"unknown basis kind: {spec.kind!r}")


def evaluate_spec(spec: BasisSpec, x) -> np.ndarray:
    """Evaluate a resolved (or resolvable) spec on a column or block."""
    if spec.kind == "natural_spline":
        return natural_spline_basis(x, spec)
    if spec.kind == "dummy":
        return dummy_basis(x, spec)
    if spec.kind == "snp_category":
        return snp_category_basis(x, spec)
    if spec.kind == "linear":
        return linear_basis(x, spec)
    raise ConfigError(f"unknown basis kind: {spec.kind!r}")


def combined_design(columns: np.ndarray, specs: list[BasisSpec]) -> np.ndarray:
    """Concatenate per-column expansions keeping a single intercept.

    The first block keeps its intercept; later blocks contribute their
    non-intercept columns only.
    """
    columns = np.asarray(columns, dtype=float)
    if columns.ndim == 1:
        columns = columns[:, None]
    if len(specs) != columns.shape[1]:
        raise ConfigError("one spec per column required")
    blocks = [evaluate_spec(s, columns[:, j]) for j, s in enumerate(specs)]
    return np.concatenate([blocks[0]] + [b[:, 1:] for b in blocks[1:]], axis=1)


@dataclass
class PreparedBases:
    """Evaluated designs for one dataset.

    g_design: risk-factor expansion psi(G), single global intercept.
    x_designs: one expansion per surrogate, each with its own intercept.
    Resolved specs ride along for serialization and re-evaluation.
    """

    g_design: np.ndarray
    x_designs: list
    g_specs: list = field(default_factory=list)
    x_specs: list = field(default_factory=list)
