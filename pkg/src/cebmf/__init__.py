"""Covariate-moderated empirical Bayes matrix factorization."""

from .types import (
    DataMatrix,
    FactorState,
    NormalMeansInput,
    PrecisionModel,
    PrecisionStructure,
    SideInfo,
    expand_precision,
)
from .ebnm import (
    ExponentialSlab,
    MixturePrior,
    NormalSlab,
    PosteriorMoments,
    default_scale_grid,
    nm_fit_constant_prior,
    nm_loglik,
    nm_neg_kl,
    nm_posterior,
    quadrature_loglik,
)
from .priors import (
    COVARIATE_FAMILIES,
    CovariatePriorModel,
    covariate_loglik,
    covariate_posterior,
    fit_covariate_prior,
    make_prior_model,
    mlp_forward,
    prior_at,
)
from .engine import (
    TAU_MAX,
    FitConfig,
    FitResult,
    compute_elbo,
    expected_loglik,
    expected_residuals,
    factor_stats_f,
    factor_stats_l,
    fit,
    greedy_init,
    impute,
    prune_factors,
    update_factor,
    update_tau,
)
from .simulate import (
    SCENARIOS,
    ScenarioSpec,
    SimulatedInstance,
    generate,
    rmse_truth,
)

__version__ = "0.1.0"
