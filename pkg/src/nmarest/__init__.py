"""Semiparametric estimation of response-model parameters and population means
under nonignorable nonresponse, with odds-tilted conditional expectations."""

from .conditional_expectation import ClosedFormExpFam, Discrete, NadarayaWatson, Parametric
from .core_model import (
    MEAN,
    Dataset,
    ResponseModel,
    TargetFunction,
    WorkingModel,
    fit_working_model,
    marginal_response_prob,
)
from .errors import EstimationNA, ModelError, NMARError, NumericalError
from .estimators import (
    EstimateResult,
    binary_closed_form,
    estimate_ck,
    estimate_mar,
    estimate_proposed,
    estimate_rki,
)
from .simulation import (
    MissingnessMechanism,
    ScenarioSpec,
    generate_scenario,
    inject_missingness,
    run_monte_carlo,
    scenario,
)
from .solver import SolverOptions, solve_system
from .variance_inference import VarianceEstimate, confidence_interval, estimate_kappa, variance_sandwich

__version__ = "0.1.0"

__all__ = [
    "ClosedFormExpFam",
    "Discrete",
    "NadarayaWatson",
    "Parametric",
    "MEAN",
    "Dataset",
    "ResponseModel",
    "TargetFunction",
    "WorkingModel",
    "fit_working_model",
    "marginal_response_prob",
    "EstimationNA",
    "ModelError",
    "NMARError",
    "NumericalError",
    "EstimateResult",
    "binary_closed_form",
    "estimate_ck",
    "estimate_mar",
    "estimate_proposed",
    "estimate_rki",
    "MissingnessMechanism",
    "ScenarioSpec",
    "generate_scenario",
    "inject_missingness",
    "run_monte_carlo",
    "scenario",
    "SolverOptions",
    "solve_system",
    "VarianceEstimate",
    "confidence_interval",
    "estimate_kappa",
    "variance_sandwich",
]
