"""Simulation and analysis tools for the symbiotic branching model SBM(rho, kappa)."""

from .core import (BudgetError, ConfigurationError, DomainError, ModelParams, NumericalError,
                   ParameterError, RngStream, SymbranchError)
from .stats import estimate_ensemble, ks_statistic, lyapunov_fit
from .wedge import critical_p, critical_rho

__all__ = [
    "BudgetError", "ConfigurationError", "DomainError", "ModelParams", "NumericalError",
    "ParameterError", "RngStream", "SymbranchError", "critical_p", "critical_rho",
    "estimate_ensemble", "ks_statistic", "lyapunov_fit",
]

__version__ = "0.1.0"
