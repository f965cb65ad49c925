"""Individual claims reserving with coverage activation patterns."""

__version__ = "0.1.0"

from .bundle import FittedModelBundle, fit_bundle, fit_independence_bundle, perturb_bundle
from .domain import ActivationPattern, ClaimRecord, ClaimStatus, DevYearObservation, Portfolio, censor, classify_claim_status
from .ingestion import CovariateSchema, LossTriangle, build_triangle, infer_schema, parse_claims, write_claims
from .simulation import ReservePredictiveDistribution, SimulationConfig, run_reserving, stability_curve, summarize, value_at_risk

__all__ = [
    "ActivationPattern",
    "ClaimRecord",
    "ClaimStatus",
    "CovariateSchema",
    "DevYearObservation",
    "FittedModelBundle",
    "LossTriangle",
    "Portfolio",
    "ReservePredictiveDistribution",
    "SimulationConfig",
    "build_triangle",
    "censor",
    "classify_claim_status",
    "fit_bundle",
    "fit_independence_bundle",
    "infer_schema",
    "parse_claims",
    "perturb_bundle",
    "run_reserving",
    "stability_curve",
    "summarize",
    "value_at_risk",
    "write_claims",
]
