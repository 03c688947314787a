"""Stage I: composite-likelihood EM over the latent phenotype.

The observed pieces are the noisy chart-review grade (on labeled rows)
and each surrogate feature; every piece is tied to the latent binary
phenotype through the risk-factor model expit(psi(G)' g_coef). The
composite objective sums one log-mixture term per labeled grade and
one per (record, surrogate) pair:

    sum_labeled log sum_y P(grade | y) * g_y(psi' g_coef)
  + sum_all sum_j log sum_y prevalence_y^{-1} g_y(phi_j' x_coef_j) * g_y(psi' g_coef)

with g_1(w) = expit(w), g_0(w) = 1 - expit(w). The EM treats the
latent class separately per component, which is what makes each
M-step a closed form or a single fractional-logistic fit.

Two geometric facts about the objective shape the solvers below.
First, the prevalence is a self-consistency coordinate, not a
maximized one: through the 1/prevalence_y factors the objective
falls, not rises, along the prevalence slice toward the posterior
mean where the update sends it. Along ordinary trajectories that
move is tiny and the other coordinates dominate, so the iteration
ascends; at a transplanted or extrapolated point the stale prevalence
can make the next update register as a descent, and the objective
there overstates what the trajectory sustains, which is why the
accelerated solver re-pins the prevalence of its starting point and
of every candidate before trusting it. Second, the objective is
unbounded above on a degenerate ridge where both channels call every
record class 0 while the prevalence stays interior: each surrogate
term then contributes log(1/(1-prevalence)) > 0. That ridge is not a
fixed point of the iteration (the prevalence update pulls away from
it), so fixed-point-seeking dynamics avoid it even though greedy
objective ascent would not. Any step policy added here must preserve
the self-consistent prevalence coupling; never hold the prevalence
while accepting objective increases.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .basis import PreparedBases
from .data import Dataset
from .errors import AscentViolationError, DegenerateInputError
from .glm import expit, fit_fractional_logistic

logger = logging.getLogger(__name__)

DENOM_FLOOR = 1e-300
LABEL_PROB_CLAMP = 1e-6
EM_REL_TOL = 1e-6
EM_MAX_ITER = 500
ASCENT_SLACK = 1e-8

INIT_TOP_MASS = 0.85
INIT_SPREAD_MASS = 0.15


@dataclass
class Stage1Params:
    """Parameters of the composite model.

    g_coef: coefficients on the risk-factor expansion psi(G).
    x_coefs: per-surrogate coefficient vectors on phi_j(X_j).
    label_probs: 2 x (K+1); row y gives Pr(grade = k/K | class y).
    prevalence: Pr(class 1).
    """

    g_coef: np.ndarray
    x_coefs: list
    label_probs: np.ndarray
    prevalence: float

    def validate(self):
        if not 0.0 < self.prevalence < 1.0:
            raise DegenerateInputError("prevalence must be inside (0, 1)")
        rows = np.sum(self.label_probs, axis=1)
        if self.label_probs.shape[0] != 2 or np.any(np.abs(rows - 1.0) > 1e-8):
            raise DegenerateInputError("label_probs rows must sum to 1")
        if np.any((self.label_probs < 0) | (self.label_probs > 1)):
            raise DegenerateInputError("label_probs entries must lie in [0, 1]")


@dataclass
class Stage1Imputations:
    """Posterior class-1 probabilities from the E-step.

    label_posterior: (N,) from the grade component, NaN on unlabeled rows.
    surrogate_posterior: (N, p), one column per surrogate component.
    """

    label_posterior: np.ndarray
    surrogate_posterior: np.ndarray


@dataclass
class EmTrace:
    objectives: np.ndarray
    iterations: int
    converged: bool


def _require_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise AscentViolationError(f"{what} is not finite: {value!r}")


def _check_ascent(prev: float, new: float, what: str) -> None:
    _require_finite(new, what)
    if new < prev - ASCENT_SLACK * abs(prev):
        raise AscentViolationError(f"{what} decreased: {prev!r} -> {new!r}")


def _class_probs(design: np.ndarray, coef: np.ndarray):
    p1 = expit(design @ coef)
    return p1, 1.0 - p1


def composite_loglik(params: Stage1Params, data: Dataset, bases: PreparedBases) -> float:
    """Evaluate the composite objective; inner mixture sums are floored
    at 1e-300 before the log."""
    p1, p0 = _class_probs(bases.g_design, params.g_coef)
    lab = data.labeled
    k = data.label_index[lab]
    lam = params.label_probs
    mix = lam[1, k] * p1[lab] + lam[0, k] * p0[lab]
    total = float(np.sum(np.log(np.maximum(mix, DENOM_FLOOR))))
    mu = params.prevalence
    for j, design in enumerate(bases.x_designs):
        q1, q0 = _class_probs(design, params.x_coefs[j])
        mix_j = (q1 * p1) / mu + (q0 * p0) / (1.0 - mu)
        total += float(np.sum(np.log(np.maximum(mix_j, DENOM_FLOOR))))
    return total


def initial_stage1_params(data: Dataset, bases: PreparedBases) -> Stage1Params:
    """Start values: treat grade == 1 as the true class on labeled rows,
    fit every component against that proxy, and seed an informative
    label-error matrix (0.85 mass on the agreeing grade)."""
    lab = data.labeled
    proxy = (data.label_index[lab] == data.grades).astype(float)
    if proxy.sum() == 0 or proxy.sum() == proxy.size:
        raise DegenerateInputError("proxy labels are constant on the labeled set")
    g_fit = fit_fractional_logistic(proxy, bases.g_design[lab])
    x_fits = [fit_fractional_logistic(proxy, d[lab]) for d in bases.x_designs]
    grades = data.grades
    lam = np.empty((2, grades + 1))
    lam[1, :] = INIT_SPREAD_MASS / grades
    lam[1, grades] = INIT_TOP_MASS
    lam[0, :] = INIT_SPREAD_MASS / grades
    lam[0, 0] = INIT_TOP_MASS
    return Stage1Params(
        g_coef=g_fit.coefficients,
        x_coefs=[f.coefficients for f in x_fits],
        label_probs=lam,
        prevalence=float(proxy.mean()),
    )


def stage1_e_step(params: Stage1Params, data: Dataset, bases: PreparedBases) -> Stage1Imputations:
    """Posterior class-1 probability per component.

    Grade component (labeled rows):
        lam[1,k] p1 / (lam[1,k] p1 + lam[0,k] p0)
    Surrogate component j (all rows):
        (q1 p1 / mu) / (q1 p1 / mu + q0 p0 / (1 - mu))
    """
    p1, p0 = _class_probs(bases.g_design, params.g_coef)
    lab = data.labeled
    k = data.label_index[lab]
    lam = params.label_probs
    num = lam[1, k] * p1[lab]
    den = np.maximum(num + lam[0, k] * p0[lab], DENOM_FLOOR)
    label_post = np.full(data.num_records, np.nan)
    label_post[lab] = num / den

    mu = params.prevalence
    sur = np.empty((data.num_records, data.num_surrogates))
    for j, design in enumerate(bases.x_designs):
        q1, q0 = _class_probs(design, params.x_coefs[j])
        num_j = (q1 * p1) / mu
        den_j = np.maximum(num_j + (q0 * p0) / (1.0 - mu), DENOM_FLOOR)
        sur[:, j] = num_j / den_j
    return Stage1Imputations(label_posterior=label_post, surrogate_posterior=sur)


def update_label_probs(label_index_labeled, posterior_labeled, grades: int) -> np.ndarray:
    """Closed-form label-error update from labeled posteriors, clamped to
    [1e-6, 1-1e-6] and renormalized per row."""
    w1 = posterior_labeled
    w0 = 1.0 - posterior_labeled
    den1, den0 = float(np.sum(w1)), float(np.sum(w0))
    if den1 <= 0.0 or den0 <= 0.0:
        raise DegenerateInputError("posterior mass vanished for one class")
    lam = np.empty((2, grades + 1))
    lam[1, :] = np.bincount(label_index_labeled, weights=w1, minlength=grades + 1) / den1
    lam[0, :] = np.bincount(label_index_labeled, weights=w0, minlength=grades + 1) / den0
    lam = np.clip(lam, LABEL_PROB_CLAMP, 1.0 - LABEL_PROB_CLAMP)
    lam /= lam.sum(axis=1, keepdims=True)
    return lam


def stage1_m_step(
    imputations: Stage1Imputations,
    data: Dataset,
    bases: PreparedBases,
    previous: Stage1Params,
) -> Stage1Params:
    """Exact maximizers of the expected complete-data objective.

    The pooled g_coef fit exploits linearity of the log-likelihood in
    the outcome: all components sharing record i collapse into one row
    with weight (labeled_i + p) and the mean posterior as outcome.
    """
    lab = data.labeled
    post0 = imputations.label_posterior[lab]
    sur = imputations.surrogate_posterior
    n_sur = data.num_surrogates

    prevalence = (float(np.sum(post0)) + float(np.sum(sur))) / (
        data.num_records * n_sur + data.num_labeled
    )
    lam = update_label_probs(data.label_index[lab], post0, data.grades)

    pooled_weight = np.full(data.num_records, float(n_sur))
    pooled_weight[lab] += 1.0
    pooled_outcome = np.sum(sur, axis=1)
    pooled_outcome[lab] += post0
    pooled_outcome /= pooled_weight
    g_fit = fit_fractional_logistic(
        pooled_outcome, bases.g_design, weights=pooled_weight, start=previous.g_coef
    )
    x_coefs = [
        fit_fractional_logistic(sur[:, j], bases.x_designs[j], start=previous.x_coefs[j]).coefficients
        for j in range(n_sur)
    ]
    return Stage1Params(
        g_coef=g_fit.coefficients,
        x_coefs=x_coefs,
        label_probs=lam,
        prevalence=prevalence,
    )


def fit_stage1(
    data: Dataset,
    bases: PreparedBases,
    rel_tol: float = EM_REL_TOL,
    max_iter: int = EM_MAX_ITER,
):
    """Run the EM to convergence of the composite objective.

    Returns (Stage1Params, EmTrace). The trace records the objective at
    initialization and after every M-step; any decrease beyond the
    1e-8 relative slack raises AscentViolationError.
    """
    params = initial_stage1_params(data, bases)
    objective = composite_loglik(params, data, bases)
    trace = [objective]
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        imputations = stage1_e_step(params, data, bases)
        params = stage1_m_step(imputations, data, bases, params)
        new_objective = composite_loglik(params, data, bases)
        _check_ascent(objective, new_objective, "stage-1 composite objective")
        trace.append(new_objective)
        if abs(new_objective - objective) < rel_tol * max(abs(objective), 1.0):
            objective = new_objective
            converged = True
            break
        objective = new_objective
    if not converged:
        logger.warning("stage-1 EM hit the %d-iteration cap", max_iter)
    return params, EmTrace(
        objectives=np.array(trace), iterations=iterations, converged=converged
    )


PREVALENCE_CLIP = 1e-3
SQUAREM_BACKTRACKS = 2
RECOVERY_SWEEP_CAP = 25


def _params_vector(params: Stage1Params) -> np.ndarray:
    return np.concatenate(
        [params.g_coef, *params.x_coefs, params.label_probs.ravel(), [params.prevalence]]
    )


def _params_from_vector(vector: np.ndarray, template: Stage1Params) -> Stage1Params:
    pos = template.g_coef.size
    g_coef = vector[:pos].copy()
    x_coefs = []
    for coef in template.x_coefs:
        x_coefs.append(vector[pos:pos + coef.size].copy())
        pos += coef.size
    lam = vector[pos:pos + template.label_probs.size].reshape(template.label_probs.shape)
    lam = np.clip(lam, LABEL_PROB_CLAMP, 1.0 - LABEL_PROB_CLAMP)
    lam = lam / lam.sum(axis=1, keepdims=True)
    mu = float(vector[pos + template.label_probs.size])
    return Stage1Params(
        g_coef=g_coef,
        x_coefs=x_coefs,
        label_probs=lam,
        prevalence=min(max(mu, PREVALENCE_CLIP), 1.0 - PREVALENCE_CLIP),
    )


def _self_consistent_prevalence(
    params: Stage1Params, data: Dataset, bases: PreparedBases, max_passes: int = 8
) -> Stage1Params:
    """Re-pin the prevalence to the fixed point of its own update with
    the other coordinates held. Needed at arbitrary starting points: a
    stale prevalence makes the first joint update register as a descent
    (see module docstring)."""
    denom = data.num_records * data.num_surrogates + data.num_labeled
    lab = data.labeled
    for _ in range(max_passes):
        imputations = stage1_e_step(params, data, bases)
        mu = (
            float(np.sum(imputations.label_posterior[lab]))
            + float(np.sum(imputations.surrogate_posterior))
        ) / denom
        mu = min(max(mu, PREVALENCE_CLIP), 1.0 - PREVALENCE_CLIP)
        if abs(mu - params.prevalence) < 1e-10:
            break
        params = Stage1Params(
            g_coef=params.g_coef,
            x_coefs=params.x_coefs,
            label_probs=params.label_probs,
            prevalence=mu,
        )
    return params


def _em_sweep(params: Stage1Params, data: Dataset, bases: PreparedBases):
    candidate = stage1_m_step(
        stage1_e_step(params, data, bases), data, bases, params
    )
    return candidate, composite_loglik(candidate, data, bases)


def _squarem_cycles(
    data: Dataset,
    bases: PreparedBases,
    rel_tol: float,
    max_iter: int,
):
    params = _self_consistent_prevalence(
        initial_stage1_params(data, bases), data, bases
    )
    objective = composite_loglik(params, data, bases)
    sweeps = 0
    trace = [objective]
    converged = False
    while not converged and sweeps + 2 <= max_iter:
        p1, c1 = _em_sweep(params, data, bases)
        p2, c2 = _em_sweep(p1, data, bases)
        sweeps += 2
        _require_finite(c1, "stage-1 composite objective")
        _require_finite(c2, "stage-1 composite objective")
        converged = abs(c2 - c1) < rel_tol * max(abs(c1), 1.0)
        point, value = p2, c2
        base = _params_vector(params)
        leap = _params_vector(p1) - base
        curve = _params_vector(p2) - _params_vector(p1) - leap
        leap_norm = float(np.linalg.norm(leap))
        curve_norm = float(np.linalg.norm(curve))
        residual = float(np.linalg.norm(_params_vector(p2) - _params_vector(p1)))
        if not converged and leap_norm > 1e-14 and curve_norm > 1e-14 and sweeps < max_iter:
            alpha = min(-leap_norm / curve_norm, -1.0)
            for _ in range(SQUAREM_BACKTRACKS):
                jump = _params_from_vector(
                    base - 2.0 * alpha * leap + alpha * alpha * curve, params
                )
                jump = _self_consistent_prevalence(jump, data, bases)
                stabilized, _ = _em_sweep(jump, data, bases)
                sweeps += 1
                jump_residual = float(
                    np.linalg.norm(_params_vector(stabilized) - _params_vector(jump))
                )
                candidate = _self_consistent_prevalence(stabilized, data, bases)
                cand_value = composite_loglik(candidate, data, bases)
                if (
                    np.isfinite(cand_value)
                    and cand_value >= c2
                    and jump_residual <= residual
                ):
                    point, value = candidate, cand_value
                    break
                if alpha >= -1.0 or sweeps >= max_iter:
                    break
                alpha = (alpha - 1.0) / 2.0
        recovery = 0
        while (
            value < objective - ASCENT_SLACK * abs(objective)
            and sweeps < max_iter
            and recovery < RECOVERY_SWEEP_CAP
        ):
            point, value = _em_sweep(point, data, bases)
            sweeps += 1
            recovery += 1
            _require_finite(value, "stage-1 composite objective")
        _check_ascent(objective, value, "stage-1 composite objective")
        params, objective = point, value
        trace.append(objective)
    if not converged:
        logger.warning("stage-1 EM hit the %d-sweep cap", max_iter)
    final = stage1_e_step(params, data, bases)
    mean_posterior = (
        float(np.sum(final.label_posterior[data.labeled]))
        + float(np.sum(final.surrogate_posterior))
    ) / (data.num_records * data.num_surrogates + data.num_labeled)
    if not PREVALENCE_CLIP < mean_posterior < 1.0 - PREVALENCE_CLIP:
        raise DegenerateInputError(
            f"stage-1 fit collapsed to a single class (mean posterior {mean_posterior:.2e})"
        )
    return params, EmTrace(
        objectives=np.array(trace), iterations=sweeps, converged=converged
    )


def fit_stage1_accelerated(
    data: Dataset,
    bases: PreparedBases,
    rel_tol: float = EM_REL_TOL,
    max_iter: int = EM_MAX_ITER,
):
    """fit_stage1 with safeguarded squared-extrapolation (SQUAREM).

    Each cycle takes two plain E/M sweeps, extrapolates the secant
    pair quadratically, re-pins the prevalence, stabilizes the jump
    with one more sweep, re-pins again, and keeps the jump only when
    the pinned candidate both beats the plain two-step objective and
    shrinks the fixed-point residual (the step length backs off toward
    plain EM otherwise). Both gates counter the geometry in the module
    docstring: the objective at a non-equilibrium prevalence is
    inflated and bleeds away as the prevalence re-equilibrates, so
    candidates are scored only after pinning; and greedy ascent alone
    would ride the degenerate ridge, which repels the fixed-point map,
    so requiring the update step to shrink vetoes every jump toward
    it. Same fixed points as fit_stage1, fewer sweeps on slow runs;
    convergence is judged on the plain residual so the stopping rule
    matches fit_stage1.

    The returned trace records one objective value per accepted point
    and never decreases beyond the ascent slack: a cycle that ends
    below the last accepted value keeps sweeping (up to a small cap)
    until the objective recovers, and if it cannot, or the final point
    is single-class degenerate, the whole accelerated attempt is
    discarded and the plain fit_stage1 result is returned instead.
    `iterations` counts all E/M sweeps, recorded or not.
    """
    try:
        return _squarem_cycles(data, bases, rel_tol, max_iter)
    except (AscentViolationError, DegenerateInputError) as exc:
        logger.info("accelerated stage-1 fit discarded (%s); rerunning plain", exc)
        return fit_stage1(data, bases, rel_tol, max_iter)
