"""Stage III: parametric projection, combination, and validation.

The Stage-II imputations are projected onto the parametric risk model
(plain logistic regression of the imputed outcomes on the raw
risk-factor design). Two estimates result: one from the labeled-grade
posteriors, one from the score posteriors over all records. A
stratified bootstrap supplies their joint covariance; the final
estimate is the per-coefficient variance-optimal convex combination.
The Stage-II step functions double as ROC/AUC estimates.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .errors import BootstrapInstabilityError, DataError, DegenerateInputError, TubeError
from .glm import LogisticFit, expit, fit_fractional_logistic
from .stage2 import Stage2Params, StepSurvival, _stage2_e_step

logger = logging.getLogger(__name__)

ANCHOR_EPS = 1e-8
OMEGA_DENOM_EPS = 1e-12
MAX_DROP_FRACTION = 0.10


@dataclass
class RiskModel:
    """Final coefficient estimates on (1, G).

    omega holds the per-coefficient combination weight (a constant
    vector in scalar mode). cov_joint is the bootstrap covariance of
    the stacked (beta0, beta1) vector.
    """

    beta0: np.ndarray
    se0: np.ndarray
    beta1: np.ndarray
    se1: np.ndarray
    omega: np.ndarray
    beta_combined: np.ndarray
    se_combined: np.ndarray
    cov_joint: np.ndarray
    sign_flipped: tuple


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def final_imputations(stage2_params: Stage2Params, data: Dataset, scores, bases):
    """Re-evaluate the Stage-II E-step at the final parameters."""
    return _stage2_e_step(stage2_params, data, scores, bases)


def fit_risk_projections(imputations, g_raw_design, labeled):
    """Logistic projections of the imputed outcomes.

    beta0: labeled rows, grade-component posteriors.
    beta1: all rows, score-component posteriors.
    The design is the raw (1, G) matrix, not the sieve expansion.
    """
    labeled = np.asarray(labeled, dtype=bool)
    beta0 = fit_fractional_logistic(imputations.label_posterior[labeled], g_raw_design[labeled])
    beta1 = fit_fractional_logistic(imputations.class_posterior, g_raw_design)
    return beta0, beta1


def sign_align(
    fit: LogisticFit,
    policy: str = "anchor",
    anchor_index: int = 1,
    design: Optional[np.ndarray] = None,
) -> LogisticFit:
    """Resolve the latent-class labeling ambiguity.

    anchor policy: flip when the anchor coefficient is negative.
    prevalence policy: flip when the mean predicted probability
    exceeds 0.5 (requires the fit's design).

    Flipping refits on complemented outcomes; by the exact symmetry
    ell(1-y, -w) = ell(y, w) that refit is the negated coefficient
    vector, so it is applied algebraically.
    """
    coef = fit.coefficients
    if policy == "anchor":
        anchor = float(coef[anchor_index])
        if abs(anchor) <= ANCHOR_EPS:
            warnings.warn("anchor coefficient indistinguishable from 0; no sign flip applied")
            return fit
        flip = anchor < 0
    elif policy == "prevalence":
        if design is None:
            raise DataError("prevalence policy needs the fit design")
        flip = float(np.mean(expit(design @ coef))) > 0.5
    else:
        raise DataError(f"unknown sign policy: {policy!r}")
    if not flip:
        return fit
    return LogisticFit(
        coefficients=-coef,
        converged=fit.converged,
        iterations=fit.iterations,
        final_gradient_norm=fit.final_gradient_norm,
        sign_flipped=not fit.sign_flipped,
    )


def bootstrap_covariance(data: Dataset, fit_fn, num_replicates: int, seed_key, threads: int = 1):
    """Stratified bootstrap covariance of the stacked (beta0, beta1).

    Labeled and unlabeled rows are resampled independently (the
    labeled count is fixed by design). fit_fn(dataset) must return the
    sign-aligned (beta0, beta1) coefficient pair; failed replicates
    are dropped, and more than 10% drops aborts.

    Replicate RNG streams derive from (seed_key..., replicate index),
    so any execution order or worker count gives identical output.
    """
    if num_replicates < 2:
        raise DataError("bootstrap needs at least 2 replicates")
    labeled_idx = np.flatnonzero(data.labeled)
    unlabeled_idx = np.flatnonzero(~data.labeled)
    key = tuple(int(s) for s in np.atleast_1d(seed_key))

    draws = []
    dropped = 0
    for b in range(num_replicates):
        rng = np.random.default_rng((*key, b))
        take_lab = labeled_idx[rng.integers(0, labeled_idx.size, labeled_idx.size)]
        if unlabeled_idx.size:
            take_unl = unlabeled_idx[rng.integers(0, unlabeled_idx.size, unlabeled_idx.size)]
            take = np.concatenate([take_lab, take_unl])
        else:
            take = take_lab
        try:
            beta0, beta1 = fit_fn(data.take(take))
        except (TubeError, np.linalg.LinAlgError) as exc:
            dropped += 1
            logger.warning("bootstrap replicate %d dropped: %s", b, exc)
            continue
        draws.append(np.concatenate([beta0, beta1]))
    if dropped > MAX_DROP_FRACTION * num_replicates:
        raise BootstrapInstabilityError(
            f"{dropped}/{num_replicates} bootstrap replicates failed"
        )
    stacked = np.array(draws)
    cov = np.cov(stacked, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    d = stacked.shape[1] // 2
    se = np.sqrt(np.diag(cov))
    return cov, se[:d], se[d:]


def combine_estimates(
    beta0_fit: LogisticFit,
    beta1_fit: LogisticFit,
    cov_joint: np.ndarray,
    mode: str = "per_coefficient",
) -> RiskModel:
    """Variance-optimal convex combination of the two projections.

    Per coefficient k with 2x2 block (v00, v01; v01, v11):
        omega_k = (v11 - v01) / (v00 + v11 - 2 v01), clipped to [0, 1].
    A vanishing denominator falls back to 0.5 with a warning. Scalar
    mode applies the first non-intercept coefficient's omega to all.
    """
    beta0 = beta0_fit.coefficients
    beta1 = beta1_fit.coefficients
    d = beta0.shape[0]
    if cov_joint.shape != (2 * d, 2 * d):
        raise DataError("covariance size does not match coefficient length")

    def omega_for(k: int) -> float:
        v00 = cov_joint[k, k]
        v11 = cov_joint[d + k, d + k]
        v01 = cov_joint[k, d + k]
        denom = v00 + v11 - 2.0 * v01
        if denom <= OMEGA_DENOM_EPS:
            warnings.warn(f"combination weight ill-defined for coefficient {k}; using 0.5")
            return 0.5
        return float(np.clip((v11 - v01) / denom, 0.0, 1.0))

    if mode == "per_coefficient":
        omega = np.array([omega_for(k) for k in range(d)])
    elif mode == "scalar":
        pick = 1 if d > 1 else 0
        omega = np.full(d, omega_for(pick))
    else:
        raise DataError(f"unknown combination mode: {mode!r}")

    combined = omega * beta0 + (1.0 - omega) * beta1
    var = np.empty(d)
    for k in range(d):
        w = np.array([omega[k], 1.0 - omega[k]])
        block = np.array(
            [
                [cov_joint[k, k], cov_joint[k, d + k]],
                [cov_joint[d + k, k], cov_joint[d + k, d + k]],
            ]
        )
        var[k] = float(w @ block @ w)
    se = np.sqrt(np.diag(cov_joint))
    return RiskModel(
        beta0=beta0,
        se0=se[:d],
        beta1=beta1,
        se1=se[d:],
        omega=omega,
        beta_combined=combined,
        se_combined=np.sqrt(np.maximum(var, 0.0)),
        cov_joint=cov_joint,
        sign_flipped=(beta0_fit.sign_flipped, beta1_fit.sign_flipped),
    )


def roc_curve(step0: StepSurvival, step1: StepSurvival) -> RocCurve:
    """ROC of the class-1 survival against the class-0 survival.

    Thresholds sweep the shared jump grid from above; the curve starts
    at (0,0) and ends at (1,1). The AUC is the mass-weighted
    concordance sum m1(a) m0(b) [I(a>b) + I(a=b)/2], which equals the
    trapezoid area of the step curve.
    """
    if not np.array_equal(step0.jump_points, step1.jump_points):
        raise DataError("step functions must share one jump grid")
    m0 = step0.jump_sizes
    m1 = step1.jump_sizes
    fpr = np.concatenate([[0.0], np.cumsum(m0[::-1])])
    tpr = np.concatenate([[0.0], np.cumsum(m1[::-1])])
    fpr[-1] = 1.0
    tpr[-1] = 1.0
    below0 = np.concatenate([[0.0], np.cumsum(m0)])[:-1]
    auc = float(np.sum(m1 * (below0 + 0.5 * m0)))
    total0 = float(np.sum(m0))
    total1 = float(np.sum(m1))
    auc /= total0 * total1
    return RocCurve(fpr=fpr, tpr=tpr, auc=auc)


def score_auc(scores, class1_weights) -> float:
    """Weighted concordance of a score against soft class weights.

    Each record contributes weight w to class 1 and 1-w to class 0;
    tied scores count one half.
    """
    scores = np.asarray(scores, dtype=float)
    w = np.asarray(class1_weights, dtype=float)
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    if np.any((w < 0) | (w > 1)):
        raise DataError("class weights must lie in [0, 1]")
    points, inverse = np.unique(scores, return_inverse=True)
    w1 = np.bincount(inverse, weights=w, minlength=points.size)
    w0 = np.bincount(inverse, weights=1.0 - w, minlength=points.size)
    t1 = float(np.sum(w1))
    t0 = float(np.sum(w0))
    if t1 <= 0.0 or t0 <= 0.0:
        raise DegenerateInputError("one class carries no weight")
    below0 = np.concatenate([[0.0], np.cumsum(w0)])[:-1]
    return float(np.sum(w1 * (below0 + 0.5 * w0)) / (t1 * t0))
