"""Fractional imputation for multivariate item nonresponse using Gaussian mixtures."""
__version__ = "0.1.0"

from .data import IncompleteDataset
from .em import EmConfig, EmResult, FractionalImputation, run_em
from .estimators import (EstimatingFunction, builtin_correlation, builtin_mean,
                         builtin_proportion, parse_estimand, solve_estimating_equation)
from .gaussian import GaussianParams, ObservedPattern, conditional_params, marginal_log_density
from .jackknife import JackknifeConfig, jackknife
from .mixture import GaussianMixture
from .select import bic_score, select_g
from .conditional import ConditionalMixture, run_em_conditional
from .io import read_csv

__all__ = [
    "ConditionalMixture", "EmConfig", "EmResult", "EstimatingFunction", "FractionalImputation",
    "GaussianMixture", "GaussianParams", "IncompleteDataset", "JackknifeConfig", "ObservedPattern",
    "bic_score", "builtin_correlation", "builtin_mean", "builtin_proportion", "conditional_params",
    "jackknife", "marginal_log_density", "parse_estimand", "read_csv", "run_em",
    "run_em_conditional", "select_g", "solve_estimating_equation",
]
