"""Two-level mixed models fitted by adaptive Gauss-Hermite quadrature.

The approximate marginal likelihood is maximised with exact gradients
(implicit differentiation of the group modes plus reverse-mode
differentiation through the Cholesky factor of each mode's Hessian).
"""

__version__ = "0.1.0"

from .aghq import Evaluator, loglik_grad, nll_grad, nll_grad_scalar
from .data import ModelSpec, SimSpec, parse_dataset, simulate
from .errors import (
    AghqError,
    DataError,
    EvaluationError,
    InnerFailureError,
    InvalidArgumentError,
    LineSearchError,
    NotPositiveDefiniteError,
)
from .inference import sigma_intervals, sigma_jacobian, sigma_point, wald_intervals
from .model import Dataset, GroupData, ParamVector, get_family
from .optimizer import FitOptions, FitResult, fit
from .quadrature import adapt_rule, gh_rule_1d
from .refamily import RePar
from .replicate import replicate

__all__ = [
    "AghqError", "DataError", "Dataset", "EvaluationError", "Evaluator", "FitOptions", "FitResult",
    "GroupData", "InnerFailureError", "InvalidArgumentError", "LineSearchError", "ModelSpec",
    "NotPositiveDefiniteError", "ParamVector", "RePar", "SimSpec", "adapt_rule", "fit", "get_family",
    "gh_rule_1d", "loglik_grad", "nll_grad", "nll_grad_scalar", "parse_dataset", "replicate",
    "sigma_intervals", "sigma_jacobian", "sigma_point", "simulate", "wald_intervals",
]
