"""Treated-group effect estimation with a placebo sample.

A placebo sample (S=0) is a population in which the treatment has no effect;
its treated-versus-untreated contrast measures the confounding that remains in
the primary sample (S=1), so it can be subtracted off.
"""

from placebo.data import Dataset, DataError, load_csv, positivity_check, write_csv
from placebo.design import DesignSpec
from placebo.estimators import (
    MultiEstimator,
    Recipe,
    eif_values,
    run_recipe,
    theta_dr,
    theta_dr_naive,
    theta_ipw,
    theta_reg,
    theta_reg_naive,
)
from placebo.inference import EstimateResult, bootstrap, estimate
from placebo.kernels import BACKEND
from placebo.nuisance import GlmFit, fit_logistic, fit_ols, predict_mu, predict_pi
from placebo.sensitivity import (
    LinearBox,
    MarginalParams,
    SensitivityResult,
    linear_bounds,
    linear_ci,
    marginal_bounds,
    marginal_ci,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DataError",
    "Dataset",
    "DesignSpec",
    "EstimateResult",
    "GlmFit",
    "LinearBox",
    "MarginalParams",
    "MultiEstimator",
    "Recipe",
    "SensitivityResult",
    "bootstrap",
    "eif_values",
    "estimate",
    "fit_logistic",
    "fit_ols",
    "linear_bounds",
    "linear_ci",
    "load_csv",
    "marginal_bounds",
    "marginal_ci",
    "positivity_check",
    "predict_mu",
    "predict_pi",
    "run_recipe",
    "theta_dr",
    "theta_dr_naive",
    "theta_ipw",
    "theta_reg",
    "theta_reg_naive",
    "write_csv",
]
