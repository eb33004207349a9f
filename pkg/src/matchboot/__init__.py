"""Nearest-neighbor matching estimators of the average treatment effect, with
naive bootstrap inference and matched-times density-ratio estimation."""

from .bootstrap import BootstrapResult, bootstrap_distribution
from .data import ColumnSchema, Dataset, MSchedule, load_dataset, resolve_m
from .density_ratio import TwoSampleProblem, r_hat, r_hat_star
from .errors import MatchbootError
from .estimators import EstimateReport, fit_outcome_models, tau_m, tau_m_bc, tau_m_weighted
from .nn import build_index, match_sets

__version__ = "0.1.0"

__all__ = [
    "BootstrapResult", "ColumnSchema", "Dataset", "EstimateReport", "MSchedule", "MatchbootError",
    "TwoSampleProblem", "bootstrap_distribution", "build_index", "fit_outcome_models", "load_dataset",
    "match_sets", "r_hat", "r_hat_star", "resolve_m", "tau_m", "tau_m_bc", "tau_m_weighted",
]
