"""Covariate-adjusted treatment means for designed experiments.

Estimates treatment means adjusted for random covariates in blocked
designs, under a joint variance-components model for response and
covariates.  Ships the classical fixed-blocks and naive mixed estimators,
the closed-form joint fit for complete blocks, conditional fits for the
standard orthogonal designs, and an EM engine for unbalanced data.
"""

from .bivariate_rcb import (
    BivariateParams,
    ConditionalParams,
    HelmertFit,
    adjusted_means_bivariate,
    conditional_from_bivariate,
    direct_treatment_effects,
    fit_bivariate_rcb_ml,
    fit_conditional_ibd,
    fit_naive_block_mixed,
)
from .data_model import (
    Dataset,
    DesignSpec,
    StackedData,
    build_stacked,
    load_dataset,
    load_design_spec,
)
from .design_algebra import (
    KroneckerCovariance,
    OrthogonalPartition,
    centering_matrix,
    helmert_matrix,
    kron_cov_dense,
    kron_cov_inverse,
    rcb_partition,
    validate_partition,
)
from .errors import ConvergenceError, SingularityError, ValidationError, VcadjustError
from .lmm import LmmFit, LmmSpec, contrast, fit_lmm
from .mvc_em import (
    AdjustedMeansResult,
    MultivariateModel,
    MVCFit,
    MVCParams,
    adjusted_means_mvc,
    assemble_V,
    e_step,
    fit_em,
    m_step,
    make_model,
    observed_loglik,
)
from .orthogonal_conditional import (
    DesignRecipe,
    StratumRegression,
    adjusted_means_orthogonal,
    conditional_regressors,
    fit_orthogonal_conditional,
    recipe_for,
    recipe_partition,
    stratum_regressions,
)
from .rcb_classical import (
    FixedFitRCB,
    MixedFitRCB,
    fit_fixed_rcb,
    fit_mixed_rcb,
    gamma_mixed,
    intra_inter_decompose,
)
from .simulate import BiasStudyResult, SimConfig, bias_study, gen_bivariate_rcb, gen_multivariate

__version__ = "0.1.0"

__all__ = [
    "AdjustedMeansResult",
    "BiasStudyResult",
    "BivariateParams",
    "ConditionalParams",
    "ConvergenceError",
    "Dataset",
    "DesignRecipe",
    "DesignSpec",
    "FixedFitRCB",
    "HelmertFit",
    "KroneckerCovariance",
    "LmmFit",
    "LmmSpec",
    "MixedFitRCB",
    "MultivariateModel",
    "MVCFit",
    "MVCParams",
    "OrthogonalPartition",
    "SimConfig",
    "SingularityError",
    "StackedData",
    "StratumRegression",
    "ValidationError",
    "VcadjustError",
    "adjusted_means_bivariate",
    "adjusted_means_mvc",
    "adjusted_means_orthogonal",
    "assemble_V",
    "bias_study",
    "build_stacked",
    "centering_matrix",
    "conditional_from_bivariate",
    "conditional_regressors",
    "contrast",
    "direct_treatment_effects",
    "e_step",
    "fit_bivariate_rcb_ml",
    "fit_conditional_ibd",
    "fit_em",
    "fit_fixed_rcb",
    "fit_lmm",
    "fit_mixed_rcb",
    "fit_naive_block_mixed",
    "fit_orthogonal_conditional",
    "gamma_mixed",
    "gen_bivariate_rcb",
    "gen_multivariate",
    "helmert_matrix",
    "intra_inter_decompose",
    "kron_cov_dense",
    "kron_cov_inverse",
    "load_dataset",
    "load_design_spec",
    "m_step",
    "make_model",
    "observed_loglik",
    "rcb_partition",
    "recipe_for",
    "recipe_partition",
    "stratum_regressions",
    "validate_partition",
]
