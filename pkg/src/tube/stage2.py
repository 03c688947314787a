"""Stage II: nonparametric EM on the condensed phenotyping score.

The surrogates are condensed into one score per record (additive sum
of the Stage-I per-surrogate linear predictors, or their first
principal component). The objective is

    sum_labeled log sum_y P(grade | y) g_y(psi' g_coef)
  + sum_all     log sum_y jump_y(score_i) g_y(psi' g_coef)

where jump_y are per-class step survival functions of the score,
jumping only at observed score values.

Refitting the jump masses from their own posteriors inside the EM loop
is unusable: with distinct scores every record owns a private atom, so
the unconstrained maximizer is a hard 0/1 partition of the cohort and
the iteration provably collapses into it (each pass multiplies every
record's posterior odds by its own risk-factor odds again). The loop
here therefore freezes the survival atoms at their initialization (the
labeled-set class survivals under the top-grade proxy) and keeps the
risk-factor coefficients at their Stage-I values as well, because
refitting them against the frozen labeled atoms regresses them toward
the grade-noise-attenuated proxy signal (the atoms pin each labeled
record's class posterior to its proxy value, and the proxy rate is an
affine flattening of the class probability). Only the label-error
matrix is iterated, a standard convergent EM for that restricted
likelihood.

The survival pair reported for ROC validation is recovered from the
risk-factor channel instead of from any posterior-weighted refit: for
every threshold, the exceedance indicator has conditional mean
pi*S1 + (1-pi)*S0 given the risk factors, so least squares across
records identifies both curves wherever the class prior varies. This
needs the score to be independent of the risk factors within class,
but not independence from the chart grades; weighting by grade or
class posteriors is avoided because any within-class coupling between
the grade mechanism and the surrogates tilts the weighted curves (and
soft weights mix the classes outright). The grade-side refit of the
pair is still performed internally, only to evaluate the imputations:
it leaves every unlabeled record's class posterior equal to its prior,
which keeps the downstream projection calibrated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import isotonic_regression

from .basis import PreparedBases
from .data import Dataset
from .errors import DataError, DegenerateInputError, TubeError
from .glm import expit
from .stage1 import (
    DENOM_FLOOR,
    EM_MAX_ITER,
    EM_REL_TOL,
    EmTrace,
    Stage1Params,
    _check_ascent,
    update_label_probs,
)

logger = logging.getLogger(__name__)

JUMP_FLOOR = 1e-8


@dataclass
class StepSurvival:
    """Right-continuous survival function S(c) = sum of jump sizes at
    points strictly greater than c. Jump points are the deduplicated
    observed scores; sizes are nonnegative and sum to one."""

    jump_points: np.ndarray
    jump_sizes: np.ndarray

    def __post_init__(self):
        self.jump_points = np.asarray(self.jump_points, dtype=float)
        self.jump_sizes = np.asarray(self.jump_sizes, dtype=float)
        if self.jump_points.ndim != 1 or self.jump_points.shape != self.jump_sizes.shape:
            raise DataError("jump points and sizes must be matching vectors")
        if np.any(np.diff(self.jump_points) <= 0):
            raise DataError("jump points must be strictly increasing")
        if np.any(self.jump_sizes < 0):
            raise DataError("jump sizes must be nonnegative")

    def survival(self, c):
        """S(c), vectorized over thresholds."""
        c = np.asarray(c, dtype=float)
        below = np.searchsorted(self.jump_points, c, side="right")
        tail = np.concatenate([np.cumsum(self.jump_sizes[::-1])[::-1], [0.0]])
        out = tail[below]
        return float(out) if out.ndim == 0 else out

    def jump_at(self, scores):
        """Jump size at each score; scores must be jump points."""
        scores = np.asarray(scores, dtype=float)
        idx = np.searchsorted(self.jump_points, scores)
        ok = (idx < self.jump_points.size) & (self.jump_points[np.minimum(idx, self.jump_points.size - 1)] == scores)
        if not np.all(ok):
            raise TubeError("score is not a jump point (internal grid mismatch)")
        return self.jump_sizes[idx]


@dataclass
class Stage2Params:
    s0: StepSurvival
    s1: StepSurvival
    label_probs: np.ndarray
    g_coef: np.ndarray


@dataclass
class Stage2Imputations:
    """label_posterior: (N,), NaN on unlabeled rows; class_posterior: (N,)."""

    label_posterior: np.ndarray
    class_posterior: np.ndarray


def additive_score(bases: PreparedBases, x_coefs) -> np.ndarray:
    """Sum of per-surrogate linear predictors, intercepts included (any
    constant shift is absorbed by the step functions)."""
    total = np.zeros(bases.x_designs[0].shape[0])
    for design, coef in zip(bases.x_designs, x_coefs):
        total += design @ coef
    return total


def pca_score(bases: PreparedBases, x_coefs) -> np.ndarray:
    """First principal component of the per-surrogate predictors.

    Orientation: the leading eigenvector is first made
    first-coordinate-positive, then the score is flipped if it
    correlates negatively with the additive score.
    """
    columns = np.column_stack([d @ c for d, c in zip(bases.x_designs, x_coefs)])
    if columns.shape[1] < 2:
        raise DegenerateInputError("PCA score needs at least 2 surrogates")
    centered = columns - columns.mean(axis=0)
    variances = np.var(centered, axis=0)
    if np.any(variances <= 0):
        raise DegenerateInputError("zero-variance surrogate predictor")
    cov = (centered.T @ centered) / (columns.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    lead = eigvecs[:, -1]
    if lead[0] < 0:
        lead = -lead
    score = centered @ lead
    additive = columns.sum(axis=1)
    spread = additive - additive.mean()
    corr_num = float(score @ spread)
    if corr_num < 0:
        score = -score
    return score


def step_survival_mle(scores, class_weights, y: int, grid=None, floor: float = JUMP_FLOOR) -> StepSurvival:
    """Weighted step-function MLE of the class-y score survival.

    Record i contributes mass w_i (y=1) or 1-w_i (y=0). With a default
    grid the jump points are the distinct scores carrying positive
    mass, so binary weights reproduce the empirical class survival
    exactly. An explicit shared grid (the EM path) may leave some
    points massless; those are floored at 1e-8 and the sizes
    renormalized.
    """
    scores = np.asarray(scores, dtype=float)
    w = np.asarray(class_weights, dtype=float)
    if np.any((w < 0) | (w > 1)):
        raise DataError("class weights must lie in [0, 1]")
    mass = w if y == 1 else 1.0 - w
    total = float(np.sum(mass))
    if total <= 0.0:
        raise DegenerateInputError(f"no mass in class {y}")
    if grid is None:
        points = np.unique(scores[mass > 0])
    else:
        points = np.asarray(grid, dtype=float)
    slot = np.searchsorted(points, scores)
    inside = (slot < points.size) & (points[np.minimum(slot, points.size - 1)] == scores)
    if grid is None:
        keep = mass > 0
    else:
        keep = np.ones_like(mass, dtype=bool)
    if not np.all(inside[keep]):
        raise DataError("scores with mass fall outside the jump grid")
    sizes = np.bincount(slot[keep], weights=mass[keep], minlength=points.size) / total
    if np.any(sizes < floor):
        sizes = np.maximum(sizes, floor)
        sizes = sizes / sizes.sum()
    return StepSurvival(jump_points=points, jump_sizes=sizes)


def stage2_loglik(eta: Stage2Params, data: Dataset, scores, bases: PreparedBases) -> float:
    """Step-function-constrained objective; floors as in stage 1."""
    p1 = expit(bases.g_design @ eta.g_coef)
    p0 = 1.0 - p1
    lab = data.labeled
    k = data.label_index[lab]
    lam = eta.label_probs
    mix = lam[1, k] * p1[lab] + lam[0, k] * p0[lab]
    total = float(np.sum(np.log(np.maximum(mix, DENOM_FLOOR))))
    jump1 = eta.s1.jump_at(scores)
    jump0 = eta.s0.jump_at(scores)
    mix_all = jump1 * p1 + jump0 * p0
    total += float(np.sum(np.log(np.maximum(mix_all, DENOM_FLOOR))))
    return total


def _initial_steps(data: Dataset, scores, grid) -> tuple:
    """Empirical class survivals of the score using grade == K as the
    class proxy, laid on the full grid then floored (massless points
    would otherwise zero out the E-step at unlabeled scores)."""
    lab = data.labeled
    proxy = (data.label_index[lab] == data.grades).astype(float)
    if proxy.sum() == 0 or proxy.sum() == proxy.size:
        raise DegenerateInputError("proxy labels are constant on the labeled set")
    s1 = step_survival_mle(scores[lab], proxy, 1, grid=grid)
    s0 = step_survival_mle(scores[lab], proxy, 0, grid=grid)
    return s0, s1


def deconvolved_survivals(scores, class_prior, grid=None, floor: float = JUMP_FLOOR) -> tuple:
    """Per-class score survivals solved from the class-prior regression.

    At each threshold c the exceedance indicator satisfies
    E[I(score > c) | prior] = prior*S1(c) + (1-prior)*S0(c) when the
    score is independent of the prior's covariates within class. The
    least-squares normal matrix is the same at every threshold, so the
    whole curve family reduces to two cumulative sums over the sorted
    grid. Each solved curve is isotonized (pool adjacent violators),
    clipped to [0,1], and converted to floored, renormalized jumps.
    """
    scores = np.asarray(scores, dtype=float)
    prior = np.asarray(class_prior, dtype=float)
    if np.any((prior < 0) | (prior > 1)):
        raise DataError("class prior must lie in [0, 1]")
    if float(np.var(prior)) <= 1e-12:
        raise DegenerateInputError("constant class prior cannot identify the survival pair")
    if grid is None:
        grid = np.unique(scores)
    else:
        grid = np.asarray(grid, dtype=float)
    slot = np.searchsorted(grid, scores)
    if np.any(slot >= grid.size) or np.any(grid[slot] != scores):
        raise DataError("scores fall outside the jump grid")
    n = scores.size
    other = 1.0 - prior
    gram = np.array(
        [
            [np.sum(prior * prior), np.sum(prior * other)],
            [np.sum(prior * other), np.sum(other * other)],
        ]
    )
    mass1 = np.bincount(slot, weights=prior, minlength=grid.size)
    mass0 = np.bincount(slot, weights=other, minlength=grid.size)
    # survival at a grid point counts the mass strictly above it
    rhs = np.vstack([mass1.sum() - np.cumsum(mass1), mass0.sum() - np.cumsum(mass0)])
    curves = np.linalg.solve(gram / n, rhs / n)
    out = []
    for row in curves:
        iso = np.clip(isotonic_regression(row, increasing=False).x, 0.0, 1.0)
        sizes = -np.diff(np.concatenate([[1.0], iso]))
        if np.any(sizes < floor):
            sizes = np.maximum(sizes, floor)
            sizes = sizes / sizes.sum()
        out.append(StepSurvival(jump_points=grid, jump_sizes=sizes))
    return out[1], out[0]


def _stage2_e_step(eta: Stage2Params, data: Dataset, scores, bases: PreparedBases, slot=None) -> Stage2Imputations:
    p1 = expit(bases.g_design @ eta.g_coef)
    p0 = 1.0 - p1
    lab = data.labeled
    k = data.label_index[lab]
    lam = eta.label_probs
    num = lam[1, k] * p1[lab]
    den = np.maximum(num + lam[0, k] * p0[lab], DENOM_FLOOR)
    label_post = np.full(data.num_records, np.nan)
    label_post[lab] = num / den

    if slot is None:
        jump1 = eta.s1.jump_at(scores)
        jump0 = eta.s0.jump_at(scores)
    else:
        jump1 = eta.s1.jump_sizes[slot]
        jump0 = eta.s0.jump_sizes[slot]
    num_all = jump1 * p1
    den_all = np.maximum(num_all + jump0 * p0, DENOM_FLOOR)
    return Stage2Imputations(label_posterior=label_post, class_posterior=num_all / den_all)


def fit_stage2(
    data: Dataset,
    scores,
    stage1_params: Stage1Params,
    bases: PreparedBases,
    rel_tol: float = EM_REL_TOL,
    max_iter: int = EM_MAX_ITER,
):
    """EM for the step-function model, seeded from the Stage-I fit.

    The survival atoms and the risk-factor coefficients stay frozen at
    their initialization throughout the loop (see the module
    docstring); each iteration refreshes only the label-error matrix.
    The returned imputations are the E-step evaluated at the final
    label-error matrix with the survival pair refit from the labeled
    grade-side posteriors, while the returned Stage2Params carry the
    deconvolved survival pair, which is what ROC validation should
    consume.
    """
    scores = np.asarray(scores, dtype=float)
    grid = np.unique(scores)
    slot = np.searchsorted(grid, scores)
    s0, s1 = _initial_steps(data, scores, grid)
    eta = Stage2Params(
        s0=s0,
        s1=s1,
        label_probs=stage1_params.label_probs.copy(),
        g_coef=stage1_params.g_coef.copy(),
    )
    lab = data.labeled
    objective = stage2_loglik(eta, data, scores, bases)
    trace = [objective]
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        imputations = _stage2_e_step(eta, data, scores, bases, slot=slot)
        post0 = imputations.label_posterior[lab]

        lam = update_label_probs(data.label_index[lab], post0, data.grades)
        eta = Stage2Params(s0=s0, s1=s1, label_probs=lam, g_coef=eta.g_coef)

        new_objective = stage2_loglik(eta, data, scores, bases)
        _check_ascent(objective, new_objective, "stage-2 step-function objective")
        trace.append(new_objective)
        if abs(new_objective - objective) < rel_tol * max(abs(objective), 1.0):
            objective = new_objective
            converged = True
            break
        objective = new_objective
    if not converged:
        logger.warning("stage-2 EM hit the %d-iteration cap", max_iter)
    imputations = _stage2_e_step(eta, data, scores, bases, slot=slot)
    post0 = imputations.label_posterior[lab]
    s1 = step_survival_mle(scores[lab], post0, 1, grid=grid)
    s0 = step_survival_mle(scores[lab], post0, 0, grid=grid)
    soft = Stage2Params(s0=s0, s1=s1, label_probs=eta.label_probs, g_coef=eta.g_coef)
    imputations = _stage2_e_step(soft, data, scores, bases, slot=slot)
    s0, s1 = deconvolved_survivals(scores, expit(bases.g_design @ eta.g_coef), grid=grid)
    eta = Stage2Params(s0=s0, s1=s1, label_probs=eta.label_probs, g_coef=eta.g_coef)
    return (
        eta,
        EmTrace(objectives=np.array(trace), iterations=iterations, converged=converged),
        imputations,
    )
