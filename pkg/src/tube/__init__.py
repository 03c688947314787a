"""Three-stage unsupervised estimation of disease-risk models from
error-prone surrogates and partially observed multi-grade chart labels.

Stage I maximizes a composite likelihood over flexible basis
expansions, Stage II refines it with nonparametric step-function score
distributions, and Stage III projects the imputed phenotypes onto the
parametric risk model with bootstrap uncertainty and ROC validation.
"""

from .basis import BasisSpec, natural_spline_basis, sieve_dimension
from .data import CsvSchema, Dataset, load_csv, write_csv
from .errors import (
    AscentViolationError,
    BootstrapInstabilityError,
    ConfigError,
    DataError,
    DegenerateInputError,
    ParseError,
    SchemaError,
    SingularDesignError,
    TubeError,
)
from .glm import LogisticFit, bernoulli_loglik, expit, fit_fractional_logistic
from .pipeline import (
    PipelineFit,
    PipelineResult,
    RunConfig,
    bundle_from_result,
    fit_pipeline,
    fit_with_uncertainty,
    prepare_bases,
)
from .simlab import (
    OracleValues,
    SimReport,
    SimSetting,
    evaluate_against_reference,
    generate_dataset,
    naive_logistic,
    parametric_baseline,
    population_oracle,
    run_replications,
)
from .stage1 import Stage1Params, composite_loglik, fit_stage1, fit_stage1_accelerated
from .stage2 import (
    Stage2Params,
    StepSurvival,
    additive_score,
    deconvolved_survivals,
    fit_stage2,
    pca_score,
    step_survival_mle,
)
from .stage3 import (
    RiskModel,
    RocCurve,
    bootstrap_covariance,
    combine_estimates,
    roc_curve,
    score_auc,
    sign_align,
)

__version__ = "0.1.0"

__all__ = [
    "AscentViolationError",
    "BasisSpec",
    "BootstrapInstabilityError",
    "ConfigError",
    "CsvSchema",
    "DataError",
    "Dataset",
    "DegenerateInputError",
    "LogisticFit",
    "OracleValues",
    "ParseError",
    "PipelineFit",
    "PipelineResult",
    "RiskModel",
    "RocCurve",
    "RunConfig",
    "SchemaError",
    "SimReport",
    "SimSetting",
    "SingularDesignError",
    "Stage1Params",
    "Stage2Params",
    "StepSurvival",
    "TubeError",
    "additive_score",
    "bernoulli_loglik",
    "bootstrap_covariance",
    "bundle_from_result",
    "combine_estimates",
    "composite_loglik",
    "deconvolved_survivals",
    "evaluate_against_reference",
    "expit",
    "fit_fractional_logistic",
    "fit_pipeline",
    "fit_stage1",
    "fit_stage1_accelerated",
    "fit_stage2",
    "fit_with_uncertainty",
    "generate_dataset",
    "load_csv",
    "naive_logistic",
    "natural_spline_basis",
    "parametric_baseline",
    "pca_score",
    "population_oracle",
    "prepare_bases",
    "roc_curve",
    "run_replications",
    "score_auc",
    "sieve_dimension",
    "sign_align",
    "step_survival_mle",
    "write_csv",
]
