"""Fractional-outcome logistic regression primitives.

Every M-step in the package maximizes a weighted sum of Bernoulli
log-likelihood terms whose outcomes are posterior probabilities rather
than 0/1 labels. The log-likelihood is linear in the outcome, so a
fractional target behaves exactly like grouped binary data and the
usual Newton iteration applies unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, SingularDesignError

# Probability floor 1e-12, applied on the log scale so the saturated
# tail keeps full precision (log g(40) stays ~ -4.25e-18, not -1e-12).
_LOG_FLOOR = float(np.log(1e-12))

GRADIENT_TOL = 1e-8
REL_OBJECTIVE_TOL = 1e-10
MAX_NEWTON_ITER = 100
HESSIAN_RIDGE = 1e-8
SEPARATION_NORM = 1e3
MAX_HALVINGS = 30


def expit(w):
    """Logistic link g(w) = 1 / (1 + exp(-w)), overflow-safe for any w.

    Scalar input returns a float; array input returns an array.
    """
    w = np.asarray(w, dtype=float)
    z = np.exp(-np.abs(w))
    out = np.where(w >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return float(out) if out.ndim == 0 else out


def bernoulli_loglik(y, w):
    """Elementwise y*log g(w) + (1-y)*log(1-g(w)).

    Each log term is computed stably via logaddexp and floored at
    log(1e-12), so the result is finite for every input. Outcomes may
    be fractional.
    """
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    # log1p(exp(-|w|)) is the shared core of both logaddexp(0, +-w);
    # computing it once halves the transcendental work.
    u = np.log1p(np.exp(-np.abs(w)))
    log_p = np.maximum(np.minimum(w, 0.0) - u, _LOG_FLOOR)
    log_q = np.maximum(-np.maximum(w, 0.0) - u, _LOG_FLOOR)
    out = y * log_p + (1.0 - y) * log_q
    return float(out) if out.ndim == 0 else out


@dataclass
class LogisticFit:
    """Result of a fractional-logistic maximization.

    Attributes
    ----------
    coefficients : ndarray
        Maximizer of the weighted log-likelihood.
    converged : bool
        False on divergence, separation, or hitting the iteration cap.
    iterations : int
        Newton iterations performed.
    final_gradient_norm : float
        Max-abs gradient at the returned coefficients.
    sign_flipped : bool
        Set by downstream sign alignment, never by the solver.
    """

    coefficients: np.ndarray
    converged: bool
    iterations: int
    final_gradient_norm: float
    sign_flipped: bool = field(default=False)


def _objective(y, design, weights, beta):
    return float(np.dot(weights, bernoulli_loglik(y, design @ beta)))


def fit_fractional_logistic(y, design, weights=None, start=None):
    """Maximize sum_i w_i * ell(y_i, design_i' beta) by damped Newton.

    Parameters
    ----------
    y : array_like in [0, 1]
        Outcomes, possibly fractional.
    design : ndarray (n, d)
        Covariate matrix; caller includes any intercept column.
    weights : array_like, optional
        Nonnegative row weights, default all ones.
    start : array_like, optional
        Warm-start coefficients, default zeros.

    Returns
    -------
    LogisticFit

    Notes
    -----
    The Hessian carries a 1e-8 ridge (the objective does not, so the
    argmax is the unpenalized MLE to numerical precision). Convergence
    is declared when the max-abs gradient drops below 1e-8 or the
    relative objective change falls below 1e-10; hard cap 100
    iterations. Perfect separation is flagged once the coefficient
    norm passes 1e3, returning the capped iterate with converged=False.
    """
    y = np.asarray(y, dtype=float)
    design = np.asarray(design, dtype=float)
    if design.ndim != 2 or y.shape[0] != design.shape[0]:
        raise DataError("outcome and design shapes do not match")
    if not (np.all(np.isfinite(design)) and np.all(np.isfinite(y))):
        raise DataError("non-finite values in design or outcome")
    if np.any((y < 0) | (y > 1)):
        raise DataError("outcomes must lie in [0, 1]")
    n, d = design.shape
    if weights is None:
        weights = np.ones(n)
    else:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (n,) or np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise DataError("weights must be nonnegative, finite, one per row")

    beta = np.zeros(d) if start is None else np.asarray(start, dtype=float).copy()
    if beta.shape != (d,):
        raise DataError("start vector length does not match design columns")

    obj = _objective(y, design, weights, beta)
    converged = False
    iterations = 0
    ridge = HESSIAN_RIDGE * np.eye(d)

    for iterations in range(1, MAX_NEWTON_ITER + 1):
        eta = design @ beta
        p = expit(eta)
        grad = design.T @ (weights * (y - p))
        gnorm = float(np.max(np.abs(grad))) if d else 0.0
        if gnorm < GRADIENT_TOL:
            converged = True
            iterations -= 1
            break
        curv = weights * p * (1.0 - p)
        hess = design.T @ (design * curv[:, None]) + ridge
        try:
            delta = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            raise SingularDesignError("Newton system unsolvable") from exc
        if not np.all(np.isfinite(delta)):
            raise SingularDesignError("Newton step is not finite")

        step = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            candidate = beta + step * delta
            cand_obj = _objective(y, design, weights, candidate)
            if cand_obj >= obj:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # objective still lower after 30 halvings: treat as divergence
            converged = False
            break
        rel_change = abs(cand_obj - obj) / max(abs(obj), 1.0)
        beta = candidate
        obj = cand_obj
        if np.linalg.norm(beta) > SEPARATION_NORM:
            converged = False
            break
        if rel_change < REL_OBJECTIVE_TOL:
            converged = True
            break

    final_grad = design.T @ (weights * (y - expit(design @ beta)))
    final_gnorm = float(np.max(np.abs(final_grad))) if d else 0.0
    return LogisticFit(
        coefficients=beta,
        converged=converged,
        iterations=iterations,
        final_gradient_norm=final_gnorm,
    )
