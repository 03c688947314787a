"""End-to-end estimator: basis preparation, Stages I-III, uncertainty.

This is the programmatic entry point behind the `fit` command. All
randomness flows from the config seed; repeated runs with the same
config and data are bit-identical regardless of thread count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .basis import BasisSpec, PreparedBases, combined_design, evaluate_spec, resolve_spec, sieve_dimension
from .data import Dataset
from .errors import ConfigError
from .glm import LogisticFit
from .stage1 import EmTrace, Stage1Params, fit_stage1, fit_stage1_accelerated
from .stage2 import Stage2Params, additive_score, fit_stage2, pca_score
from .stage3 import (
    RiskModel,
    RocCurve,
    bootstrap_covariance,
    combine_estimates,
    fit_risk_projections,
    roc_curve,
    sign_align,
)

AUTO_DUMMY_MAX_LEVELS = 10
BOOTSTRAP_STREAM = 3

BUNDLE_VERSION = 1

SCORE_MODES = ("additive", "pca")
SIGN_POLICIES = ("anchor", "prevalence")
OMEGA_MODES = ("per_coefficient", "scalar")
EM_SOLVERS = ("em", "squarem")


@dataclass(frozen=True)
class RunConfig:
    """Resolved run settings; JSON round-trippable.

    bootstrap_replicates = 0 disables uncertainty estimation entirely
    (point estimates only); otherwise at least 2 replicates.
    basis entries are per input column, None meaning data-driven
    defaults (dummy coding up to 10 distinct values, else a natural
    spline with df = max(4, cube-root rule)).
    """

    seed: int | tuple = 0
    threads: int = 1
    em_rel_tol: float = 1e-6
    em_max_iter: int = 500
    em_solver: str = "em"
    score_mode: str = "additive"
    sign_policy: str = "anchor"
    anchor_index: int = 1
    omega_mode: str = "per_coefficient"
    bootstrap_replicates: int = 200
    g_basis: Optional[tuple] = None
    x_basis: Optional[tuple] = None

    def validate(self) -> "RunConfig":
        if self.em_rel_tol <= 0:
            raise ConfigError("em_rel_tol must be positive")
        if self.em_max_iter < 1:
            raise ConfigError("em_max_iter must be at least 1")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.em_solver not in EM_SOLVERS:
            raise ConfigError(f"em_solver must be one of {EM_SOLVERS}")
        if self.score_mode not in SCORE_MODES:
            raise ConfigError(f"score_mode must be one of {SCORE_MODES}")
        if self.sign_policy not in SIGN_POLICIES:
            raise ConfigError(f"sign_policy must be one of {SIGN_POLICIES}")
        if self.omega_mode not in OMEGA_MODES:
            raise ConfigError(f"omega_mode must be one of {OMEGA_MODES}")
        if self.bootstrap_replicates != 0 and self.bootstrap_replicates < 2:
            raise ConfigError("bootstrap_replicates must be 0 (disabled) or >= 2")
        if self.anchor_index < 0:
            raise ConfigError("anchor_index must be nonnegative")
        return self

    @property
    def seed_key(self) -> tuple:
        if isinstance(self.seed, (tuple, list)):
            return tuple(int(s) for s in self.seed)
        return (int(self.seed),)

    def to_dict(self) -> dict:
        d = {
            "seed": list(self.seed_key) if isinstance(self.seed, (tuple, list)) else int(self.seed),
            "threads": self.threads,
            "em_rel_tol": self.em_rel_tol,
            "em_max_iter": self.em_max_iter,
            "em_solver": self.em_solver,
            "score_mode": self.score_mode,
            "sign_policy": self.sign_policy,
            "anchor_index": self.anchor_index,
            "omega_mode": self.omega_mode,
            "bootstrap_replicates": self.bootstrap_replicates,
            "g_basis": None if self.g_basis is None else [s.to_dict() for s in self.g_basis],
            "x_basis": None if self.x_basis is None else [s.to_dict() for s in self.x_basis],
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {
            "seed",
            "threads",
            "em_rel_tol",
            "em_max_iter",
            "em_solver",
            "score_mode",
            "sign_policy",
            "anchor_index",
            "omega_mode",
            "bootstrap_replicates",
            "g_basis",
            "x_basis",
        }
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        for key in ("g_basis", "x_basis"):
            if d.get(key) is not None:
                d[key] = tuple(BasisSpec.from_dict(s) for s in d[key])
        if isinstance(d.get("seed"), list):
            d["seed"] = tuple(int(s) for s in d["seed"])
        return RunConfig(**d).validate()


def auto_basis_spec(column, num_records: int) -> BasisSpec:
    """Default coding for one input column."""
    distinct = np.unique(np.asarray(column, dtype=float))
    if distinct.size <= AUTO_DUMMY_MAX_LEVELS:
        return BasisSpec(kind="dummy")
    return BasisSpec(kind="natural_spline", df=max(4, sieve_dimension(num_records)))


def prepare_bases(data: Dataset, config: RunConfig) -> PreparedBases:
    """Resolve per-column specs on this dataset and evaluate them."""
    n_obs = data.num_records
    g_cols = data.risk_factors
    x_cols = data.surrogates
    g_specs = config.g_basis
    if g_specs is None:
        g_specs = tuple(auto_basis_spec(g_cols[:, j], n_obs) for j in range(g_cols.shape[1]))
    if len(g_specs) != g_cols.shape[1]:
        raise ConfigError("g_basis must list one spec per risk-factor column")
    x_specs = config.x_basis
    if x_specs is None:
        x_specs = tuple(auto_basis_spec(x_cols[:, j], n_obs) for j in range(x_cols.shape[1]))
    if len(x_specs) != x_cols.shape[1]:
        raise ConfigError("x_basis must list one spec per surrogate column")
    g_specs = [resolve_spec(s, g_cols[:, j]) for j, s in enumerate(g_specs)]
    x_specs = [resolve_spec(s, x_cols[:, j]) for j, s in enumerate(x_specs)]
    g_design = combined_design(g_cols, g_specs)
    x_designs = [evaluate_spec(s, x_cols[:, j]) for j, s in enumerate(x_specs)]
    return PreparedBases(
        g_design=g_design, x_designs=x_designs, g_specs=g_specs, x_specs=x_specs
    )


@dataclass
class PipelineFit:
    """Point-estimate output of Stages I-III."""

    config: RunConfig
    stage1: Stage1Params
    stage1_trace: EmTrace
    stage2: Stage2Params
    stage2_trace: EmTrace
    scores: np.ndarray
    imputations: object
    beta0_fit: LogisticFit
    beta1_fit: LogisticFit
    roc: RocCurve
    bases: PreparedBases


@dataclass
class PipelineResult:
    fit: PipelineFit
    risk: Optional[RiskModel]


def raw_g_design(data: Dataset) -> np.ndarray:
    return np.column_stack([np.ones(data.num_records), data.risk_factors])


def fit_pipeline(data: Dataset, config: RunConfig) -> PipelineFit:
    """Stages I-III point estimates (no bootstrap)."""
    config.validate()
    bases = prepare_bases(data, config)
    if config.em_solver == "squarem":
        theta, trace1 = fit_stage1_accelerated(
            data, bases, config.em_rel_tol, config.em_max_iter
        )
    else:
        theta, trace1 = fit_stage1(data, bases, config.em_rel_tol, config.em_max_iter)
    if config.score_mode == "additive":
        scores = additive_score(bases, theta.x_coefs)
    else:
        scores = pca_score(bases, theta.x_coefs)
    eta, trace2, imputations = fit_stage2(
        data, scores, theta, bases, config.em_rel_tol, config.em_max_iter
    )
    g_raw = raw_g_design(data)
    beta0_fit, beta1_fit = fit_risk_projections(imputations, g_raw, data.labeled)
    beta0_fit = sign_align(
        beta0_fit, config.sign_policy, config.anchor_index, g_raw[data.labeled]
    )
    beta1_fit = sign_align(beta1_fit, config.sign_policy, config.anchor_index, g_raw)
    roc = roc_curve(eta.s0, eta.s1)
    return PipelineFit(
        config=config,
        stage1=theta,
        stage1_trace=trace1,
        stage2=eta,
        stage2_trace=trace2,
        scores=scores,
        imputations=imputations,
        beta0_fit=beta0_fit,
        beta1_fit=beta1_fit,
        roc=roc,
        bases=bases,
    )


def _replicate_projections(data: Dataset, config: RunConfig):
    fit = fit_pipeline(data, config)
    return fit.beta0_fit.coefficients, fit.beta1_fit.coefficients


def fit_with_uncertainty(data: Dataset, config: RunConfig) -> PipelineResult:
    """Full estimator: point fit plus bootstrap combination.

    Replicate refits are cold-started on purpose: the full-data
    estimates whose sampling spread the bootstrap mimics are cold fits
    themselves, and warm-started replicates cluster around the seeding
    solution, understating the spread.
    """
    fit = fit_pipeline(data, config)
    if config.bootstrap_replicates == 0:
        return PipelineResult(fit=fit, risk=None)
    cov, _, _ = bootstrap_covariance(
        data,
        lambda d: _replicate_projections(d, config),
        config.bootstrap_replicates,
        (*config.seed_key, BOOTSTRAP_STREAM),
        threads=config.threads,
    )
    risk = combine_estimates(fit.beta0_fit, fit.beta1_fit, cov, config.omega_mode)
    return PipelineResult(fit=fit, risk=risk)


def _floats(values) -> list:
    return [float(v) for v in np.asarray(values, dtype=float).ravel()]


def bundle_from_result(result: PipelineResult) -> dict:
    """Serializable parameter bundle for reports and revalidation."""
    fit = result.fit
    config = replace(
        fit.config,
        g_basis=tuple(fit.bases.g_specs),
        x_basis=tuple(fit.bases.x_specs),
    )
    theta = fit.stage1
    eta = fit.stage2
    bundle = {
        "version": BUNDLE_VERSION,
        "config": config.to_dict(),
        "stage1": {
            "g_coef": _floats(theta.g_coef),
            "x_coefs": [_floats(z) for z in theta.x_coefs],
            "label_probs": [_floats(row) for row in theta.label_probs],
            "prevalence": float(theta.prevalence),
            "iterations": int(fit.stage1_trace.iterations),
            "converged": bool(fit.stage1_trace.converged),
            "objective": float(fit.stage1_trace.objectives[-1]),
        },
        "stage2": {
            "label_probs": [_floats(row) for row in eta.label_probs],
            "g_coef": _floats(eta.g_coef),
            "s0": {"points": _floats(eta.s0.jump_points), "sizes": _floats(eta.s0.jump_sizes)},
            "s1": {"points": _floats(eta.s1.jump_points), "sizes": _floats(eta.s1.jump_sizes)},
            "iterations": int(fit.stage2_trace.iterations),
            "converged": bool(fit.stage2_trace.converged),
            "objective": float(fit.stage2_trace.objectives[-1]),
        },
        "risk": {
            "beta0": _floats(fit.beta0_fit.coefficients),
            "beta1": _floats(fit.beta1_fit.coefficients),
            "sign_flipped": [bool(fit.beta0_fit.sign_flipped), bool(fit.beta1_fit.sign_flipped)],
        },
        "roc": {
            "fpr": _floats(fit.roc.fpr),
            "tpr": _floats(fit.roc.tpr),
            "auc": float(fit.roc.auc),
        },
    }
    if result.risk is not None:
        rm = result.risk
        bundle["risk"].update(
            {
                "beta_combined": _floats(rm.beta_combined),
                "omega": _floats(rm.omega),
                "se0": _floats(rm.se0),
                "se1": _floats(rm.se1),
                "se_combined": _floats(rm.se_combined),
                "cov_joint": [_floats(row) for row in rm.cov_joint],
            }
        )
        bundle["risk"]["beta_final"] = _floats(rm.beta_combined)
    else:
        bundle["risk"]["beta_final"] = _floats(fit.beta1_fit.coefficients)
    return bundle


def bundle_to_json(bundle: dict) -> str:
    return json.dumps(bundle, sort_keys=True, indent=2) + "\n"


def final_beta(bundle: dict) -> np.ndarray:
    try:
        return np.asarray(bundle["risk"]["beta_final"], dtype=float)
    except KeyError as exc:
        raise ConfigError(f"parameter bundle missing field: {exc}") from exc
