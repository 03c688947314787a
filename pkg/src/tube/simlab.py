"""Synthetic cohort generators, population oracles, and replication studies.

Three generative settings are provided. Each draws four risk factors
(one standard normal, three Binomial(2, 0.6) dosage counts), a hidden
binary phenotype from a setting-specific link, three Gaussian
surrogates whose means shift with the phenotype, and a three-grade
chart-review label revealed on the first n rows. The hidden phenotype
never enters the estimator; it is returned for oracle scoring only.

Replication studies fit any of {tube, parametric_baseline,
naive_logistic} per generated cohort and aggregate bias, MSE, percent
bias, and bootstrap-CI coverage against a large-sample oracle. All
per-replicate randomness derives from (seed, stream, replicate), so a
study is reproducible at any worker count.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .basis import BasisSpec
from .data import Dataset
from .errors import ConfigError, TubeError
from .glm import LogisticFit, bernoulli_loglik, expit, fit_fractional_logistic
from .pipeline import PipelineResult, RunConfig, fit_pipeline, fit_with_uncertainty, raw_g_design
from .stage3 import score_auc

logger = logging.getLogger(__name__)

SETTINGS = ("a", "b", "c")
METHODS = ("tube", "parametric_baseline", "naive_logistic")

GENERATOR_STREAM = 1
PIPELINE_STREAM = 2
ORACLE_STREAM = 9

# Surrogate mean shifts between phenotype classes; X_j | Y=y is
# N(loc_j + shift_j * y, 1) for loc = (0.5, 0.5, 0.25).
SURROGATE_LOC = np.array([0.5, 0.5, 0.25])
SURROGATE_SHIFT = np.array([0.5, 0.5, 0.25])

CI_Z = 1.96


@dataclass(frozen=True)
class SimSetting:
    name: str
    num_records: int = 10000
    num_labeled: int = 500
    seed: int = 0
    replications: int = 100

    def validate(self) -> "SimSetting":
        if self.name not in SETTINGS:
            raise ConfigError(f"setting name must be one of {SETTINGS}")
        if not 0 < self.num_labeled < self.num_records:
            raise ConfigError("need 0 < labeled count < cohort size")
        if self.replications < 0:
            raise ConfigError("replications must be nonnegative")
        return self


def _phenotype_logit(name: str, g: np.ndarray) -> np.ndarray:
    g1, g2, g3, g4 = (g[:, j] for j in range(4))
    if name == "a":
        return -4.6 + 1.6 * (g1 + g2 + g3 + g4)
    if name == "b":
        return g1 + g1**2 - np.cos(g1) - g2 - g3 - g4 + 2.0
    if name == "c":
        return -g1 + g1**2 + np.sin(g1) - g2 - g3 - g4 + 1.0
    raise ConfigError(f"setting name must be one of {SETTINGS}")


def _draw_cohort(rng: np.random.Generator, name: str, num_records: int):
    """Fixed draw order: G block, Y, surrogate noise, label counts."""
    n_obs = num_records
    g1 = rng.standard_normal(n_obs)
    snps = rng.binomial(2, 0.6, size=(n_obs, 3)).astype(float)
    g = np.column_stack([g1, snps])
    y = (rng.random(n_obs) < expit(_phenotype_logit(name, g))).astype(float)
    base = SURROGATE_LOC + SURROGATE_SHIFT * y[:, None]
    x = base + rng.standard_normal((n_obs, 3))
    if name == "c":
        x = x + 0.005 * g1[:, None]
    label_prob = expit(-2.0 + 4.0 * y + 0.1 * x.sum(axis=1))
    counts = rng.binomial(2, label_prob)
    return g, y, x, counts / 2.0


def generate_dataset(setting: SimSetting, replicate: int = 0):
    """One synthetic cohort; returns (Dataset, hidden phenotype)."""
    setting.validate()
    rng = np.random.default_rng((setting.seed, GENERATOR_STREAM, replicate))
    g, y, x, grades = _draw_cohort(rng, setting.name, setting.num_records)
    labeled = np.zeros(setting.num_records, dtype=bool)
    labeled[: setting.num_labeled] = True
    labels = np.where(labeled, grades, np.nan)
    data = Dataset(labels=labels, labeled=labeled, surrogates=x, risk_factors=g, grades=2)
    return data, y


@dataclass(frozen=True)
class OracleValues:
    """Large-sample targets for one setting."""

    beta_bar: tuple
    auc_bar: float
    lambda_bar: tuple
    prevalence: float

    def to_dict(self) -> dict:
        return {
            "beta_bar": list(self.beta_bar),
            "auc_bar": self.auc_bar,
            "lambda_bar": [list(r) for r in self.lambda_bar],
            "prevalence": self.prevalence,
        }


def population_oracle(name: str, num_draws: int = 1_000_000, seed: int = 0) -> OracleValues:
    """Monte-Carlo population targets.

    beta_bar is the working-logistic projection of the hidden phenotype
    on (1, G). auc_bar is the concordance of the additive population
    score sum_j logit Pr(Y=1 | X_j) against the phenotype, using the
    known Gaussian mixture of each surrogate. lambda_bar holds the
    empirical grade rates per phenotype class.
    """
    if num_draws < 1_000_000:
        raise ConfigError("population oracle needs at least 1e6 draws")
    rng = np.random.default_rng((seed, ORACLE_STREAM))
    g, y, x, grades = _draw_cohort(rng, name, num_draws)
    design = np.column_stack([np.ones(num_draws), g])
    beta = fit_fractional_logistic(y, design).coefficients

    mu = float(np.mean(y))
    prior = np.log(mu / (1.0 - mu))
    offset = (SURROGATE_SHIFT**2 + 2.0 * SURROGATE_LOC * SURROGATE_SHIFT) / 2.0
    score = (prior - offset + SURROGATE_SHIFT * x).sum(axis=1)
    auc = score_auc(score, y)

    lam = np.empty((2, 3))
    k = np.round(grades * 2).astype(int)
    for cls in (0, 1):
        rows = k[y == cls]
        lam[cls] = np.bincount(rows, minlength=3) / rows.size
    return OracleValues(
        beta_bar=tuple(float(b) for b in beta),
        auc_bar=float(auc),
        lambda_bar=tuple(tuple(float(v) for v in row) for row in lam),
        prevalence=mu,
    )


def naive_logistic(data: Dataset) -> LogisticFit:
    """Fractional-logistic fit of the raw chart grades on (1, G)."""
    lab = data.labeled
    design = raw_g_design(data)[lab]
    return fit_fractional_logistic(data.labels[lab], design)


def linear_config(config: RunConfig, num_risk_factors: int, num_surrogates: int) -> RunConfig:
    """Parametric degeneration: every basis forced to the raw column."""
    lin = BasisSpec(kind="linear")
    return replace(
        config,
        g_basis=tuple(lin for _ in range(num_risk_factors)),
        x_basis=tuple(lin for _ in range(num_surrogates)),
    )


SIM_SPLINE_DF = 4
SIM_DUMMY_MAX_LEVELS = 10


def simulation_config(config: RunConfig, data: Dataset) -> RunConfig:
    """Simulation-protocol bases: df-4 splines on continuous columns,
    dummies on discrete ones. Explicit bases in `config` win; only the
    unset case is filled (the real-data auto rule would instead grow
    the spline dimension with the cohort size)."""
    if config.g_basis is not None or config.x_basis is not None:
        return config
    spline = BasisSpec(kind="natural_spline", df=SIM_SPLINE_DF)
    g_specs = tuple(
        BasisSpec(kind="dummy")
        if np.unique(data.risk_factors[:, j]).size <= SIM_DUMMY_MAX_LEVELS
        else spline
        for j in range(data.num_risk_factors)
    )
    x_specs = tuple(spline for _ in range(data.num_surrogates))
    return replace(config, g_basis=g_specs, x_basis=x_specs)


def parametric_baseline(data: Dataset, config: RunConfig) -> PipelineResult:
    """Identical pipeline with all-linear bases (approximate baseline)."""
    cfg = linear_config(config, data.num_risk_factors, data.num_surrogates)
    return fit_with_uncertainty(data, cfg)


def _combined_beta(result: PipelineResult) -> tuple:
    """(coefficients, SEs or None). Without bootstrap the two
    projections are averaged with equal weight."""
    if result.risk is not None:
        return result.risk.beta_combined, result.risk.se_combined
    fit = result.fit
    beta = 0.5 * fit.beta0_fit.coefficients + 0.5 * fit.beta1_fit.coefficients
    return beta, None


def _replicate_estimates(setting: SimSetting, methods, config: RunConfig, replicate: int) -> dict:
    """Fit every requested method on one generated cohort.

    Returns per method either {'beta': list, 'se': list | None,
    'auc': float | None} or {'error': message}.
    """
    data, _ = generate_dataset(setting, replicate)
    out: dict = {}
    for method in methods:
        try:
            if method == "tube":
                cfg = simulation_config(
                    replace(config, seed=(setting.seed, PIPELINE_STREAM, replicate)), data
                )
                result = fit_with_uncertainty(data, cfg)
                beta, se = _combined_beta(result)
                auc = result.fit.roc.auc
            elif method == "parametric_baseline":
                cfg = replace(config, seed=(setting.seed, PIPELINE_STREAM, replicate))
                result = parametric_baseline(data, cfg)
                beta, se = _combined_beta(result)
                auc = result.fit.roc.auc
            elif method == "naive_logistic":
                fit = naive_logistic(data)
                beta, se, auc = fit.coefficients, None, None
            else:
                raise ConfigError(f"unknown method: {method!r}")
        except (TubeError, np.linalg.LinAlgError) as exc:
            logger.warning("replicate %d, method %s failed: %s", replicate, method, exc)
            out[method] = {"error": str(exc)}
            continue
        out[method] = {
            "beta": [float(b) for b in beta],
            "se": None if se is None else [float(s) for s in se],
            "auc": None if auc is None else float(auc),
        }
    return out


def _replicate_worker(args):
    return _replicate_estimates(*args)


@dataclass
class MethodTable:
    """Aggregates for one method; parameter axis is beta0..betaq
    then auc (auc rows NaN for methods without a score)."""

    parameters: tuple
    bias: np.ndarray
    mse: np.ndarray
    percent_bias: np.ndarray
    coverage: np.ndarray
    failures: int
    used_replicates: int
    estimates: np.ndarray

    def to_dict(self) -> dict:
        def cell(v: float):
            return None if np.isnan(v) else float(v)

        return {
            "parameters": list(self.parameters),
            "bias": [cell(v) for v in self.bias],
            "mse": [cell(v) for v in self.mse],
            "percent_bias": [cell(v) for v in self.percent_bias],
            "coverage": [cell(v) for v in self.coverage],
            "failures": self.failures,
            "used_replicates": self.used_replicates,
            "estimates": [[cell(v) for v in row] for row in self.estimates],
        }


@dataclass
class SimReport:
    setting: SimSetting
    oracle: OracleValues
    methods: tuple
    tables: dict

    def to_dict(self) -> dict:
        return {
            "setting": {
                "name": self.setting.name,
                "num_records": self.setting.num_records,
                "num_labeled": self.setting.num_labeled,
                "seed": self.setting.seed,
                "replications": self.setting.replications,
            },
            "oracle": self.oracle.to_dict(),
            "methods": list(self.methods),
            "tables": {m: t.to_dict() for m, t in self.tables.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _aggregate(method: str, rows: list, oracle: OracleValues) -> MethodTable:
    dim = len(oracle.beta_bar)
    parameters = tuple(f"beta{k}" for k in range(dim)) + ("auc",)
    target = np.array(list(oracle.beta_bar) + [oracle.auc_bar])
    estimates = []
    hits = []
    failures = 0
    for row in rows:
        if "error" in row:
            failures += 1
            continue
        beta = row["beta"]
        auc = row["auc"]
        estimates.append(list(beta) + [np.nan if auc is None else auc])
        if row["se"] is not None:
            err = np.abs(np.array(beta) - target[:dim])
            hits.append(err <= CI_Z * np.array(row["se"]))
    if estimates:
        est = np.array(estimates)
        err = est - target
        bias = np.full(dim + 1, np.nan)
        mse = np.full(dim + 1, np.nan)
        have = ~np.all(np.isnan(est), axis=0)
        bias[have] = np.nanmean(err[:, have], axis=0)
        mse[have] = np.nanmean(err[:, have] ** 2, axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            percent_bias = np.abs(bias) / np.sqrt(mse)
    else:
        est = np.empty((0, dim + 1))
        bias = np.full(dim + 1, np.nan)
        mse = np.full(dim + 1, np.nan)
        percent_bias = np.full(dim + 1, np.nan)
    coverage = np.full(dim + 1, np.nan)
    if hits:
        coverage[:dim] = np.mean(np.array(hits), axis=0)
    return MethodTable(
        parameters=parameters,
        bias=bias,
        mse=mse,
        percent_bias=percent_bias,
        coverage=coverage,
        failures=failures,
        used_replicates=len(estimates),
        estimates=est,
    )


def run_replications(
    setting: SimSetting,
    methods=("tube",),
    config: Optional[RunConfig] = None,
    oracle: Optional[OracleValues] = None,
    oracle_draws: int = 1_000_000,
) -> SimReport:
    """Replication study against the population oracle."""
    setting.validate()
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"methods must be a subset of {METHODS}")
    if config is None:
        config = RunConfig(bootstrap_replicates=0)
    config.validate()
    if oracle is None:
        oracle = population_oracle(setting.name, oracle_draws, setting.seed)

    jobs = [(setting, tuple(methods), config, rep) for rep in range(setting.replications)]
    if config.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            all_rows = list(pool.map(_replicate_worker, jobs))
    else:
        all_rows = [_replicate_worker(j) for j in jobs]

    tables = {
        m: _aggregate(m, [r[m] for r in all_rows], oracle) for m in methods
    }
    return SimReport(setting=setting, oracle=oracle, methods=tuple(methods), tables=tables)


def report_csv_rows(report: SimReport) -> list:
    """method x parameter rows with bias/MSE/percent-bias/coverage."""
    rows = [["method", "parameter", "bias", "mse", "percent_bias", "coverage"]]
    for method in report.methods:
        table = report.tables[method]
        for i, param in enumerate(table.parameters):
            def fmt(v: float) -> str:
                return "" if np.isnan(v) else repr(float(v))

            rows.append(
                [
                    method,
                    param,
                    fmt(table.bias[i]),
                    fmt(table.mse[i]),
                    fmt(table.percent_bias[i]),
                    fmt(table.coverage[i]),
                ]
            )
    return rows


def write_report_csv(report: SimReport, path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(report_csv_rows(report))


def evaluate_against_reference(beta_hat, beta_ref, eval_g, eval_labels=None) -> dict:
    """Predictive agreement of a fitted model with a reference model.

    Cutoff for the classification metrics is the mean reference risk.
    A constant indicator makes the correlation undefined; it is
    reported as 0.0 with the degenerate flag set.
    """
    beta_hat = np.asarray(beta_hat, dtype=float)
    beta_ref = np.asarray(beta_ref, dtype=float)
    eval_g = np.atleast_2d(np.asarray(eval_g, dtype=float))
    design = np.column_stack([np.ones(eval_g.shape[0]), eval_g])
    if design.shape[1] != beta_hat.shape[0] or design.shape[1] != beta_ref.shape[0]:
        raise ConfigError("coefficient length does not match evaluation design")
    eta_hat = design @ beta_hat
    eta_ref = design @ beta_ref
    p_hat = expit(eta_hat)
    p_ref = expit(eta_ref)
    mspe = float(np.mean((p_ref - p_hat) ** 2))

    deviance_delta = None
    if eval_labels is not None:
        y = np.asarray(eval_labels, dtype=float)
        deviance_delta = float(
            np.mean(-bernoulli_loglik(y, eta_hat)) - np.mean(-bernoulli_loglik(y, eta_ref))
        )

    cut = float(np.mean(p_ref))
    ind_hat = (p_hat > cut).astype(float)
    ind_ref = (p_ref > cut).astype(float)
    degenerate = bool(np.all(ind_hat == ind_hat[0]) or np.all(ind_ref == ind_ref[0]))
    if degenerate:
        class_cor = 0.0
    else:
        class_cor = float(np.corrcoef(ind_ref, ind_hat)[0, 1])
    false_class = float(np.mean(ind_ref != ind_hat))
    return {
        "mspe": mspe,
        "deviance_delta": deviance_delta,
        "class_cor": class_cor,
        "class_cor_degenerate": degenerate,
        "false_class": false_class,
    }
