"""Jackknife-corrected nonparametric IV estimation of linear functionals
with many weak discrete instruments."""
from ._kernels import BACKEND
from .basis import FeatureBasis, evaluate, make_basis
from .estimators import (EstimateReport, LambdaPolicy, estimate_all, estimate_crossfold, estimate_ipw,
                         estimate_modified, estimate_plugin, estimate_single_split, fit_nuisances)
from .grouped import GroupedSample, assign_folds, load_csv
from .moments import CellMoments, compute_moments, npjive_risk
from .oracle import OracleModel, OracleSolution, solve as solve_oracle
from .solver import (FunctionalSpec, NuisanceFit, build_problem, cv_select_lambda, fit_alpha, fit_beta,
                     fit_h, fit_proj_alpha, fit_rho)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CellMoments", "EstimateReport", "FeatureBasis", "FunctionalSpec", "GroupedSample",
    "LambdaPolicy", "NuisanceFit", "OracleModel", "OracleSolution", "assign_folds", "build_problem",
    "compute_moments", "cv_select_lambda", "estimate_all", "estimate_crossfold", "estimate_ipw",
    "estimate_modified", "estimate_plugin", "estimate_single_split", "evaluate", "fit_alpha", "fit_beta",
    "fit_h", "fit_nuisances", "fit_proj_alpha", "fit_rho", "load_csv", "make_basis", "npjive_risk",
    "solve_oracle",
]
