"""Soft-restricted least squares with a data-driven tolerance and shadow-price diagnostics.

The estimator minimises the loss subject to ``g(theta)' Sigma^{-1} g(theta) <= c``,
picks ``c`` on a grid by an estimated risk, debiases the result and ranks
restrictions by their individual shadow prices.
"""
__version__ = "0.1.0"

from .bootstrap import BootstrapConfig, BootstrapSummary, run_bootstrap
from .dsl import RestrictionSystem, parse_restriction, to_text
from .inference import debias, wald_test
from .isp import compute_isp, isp_report, plateau_cutoff
from .kkt import InfeasibleToleranceError, KktConvergenceError, KktProblem, KktSolution, solve_inner, solve_path
from .model import DataError, Dataset, fit_unconstrained, read_csv_dataset
from .montecarlo import ScenarioSpec, builtin_scenario, run_study
from .pipeline import Estimate, PipelineConfig, estimate
from .solow import SolowConfig, run_solow
from .tolerance import make_grid, select_tolerance

__all__ = [
    "__version__",
    "BootstrapConfig",
    "BootstrapSummary",
    "DataError",
    "Dataset",
    "Estimate",
    "InfeasibleToleranceError",
    "KktConvergenceError",
    "KktProblem",
    "KktSolution",
    "PipelineConfig",
    "RestrictionSystem",
    "ScenarioSpec",
    "SolowConfig",
    "builtin_scenario",
    "compute_isp",
    "debias",
    "estimate",
    "fit_unconstrained",
    "isp_report",
    "make_grid",
    "parse_restriction",
    "plateau_cutoff",
    "read_csv_dataset",
    "run_bootstrap",
    "run_solow",
    "run_study",
    "select_tolerance",
    "solve_inner",
    "solve_path",
    "to_text",
    "wald_test",
]
