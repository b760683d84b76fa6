"""Projected nonlinear state-space models (PNL-SS).

Latent dynamics ``x_t = A phi(x_{t-1}) + b + noise`` with ridge kernel
features ``exp(-(w.x - wt)**2 / 2)``, a linear-Gaussian observation model,
moment-matching inference and EM learning.
"""
__version__ = "0.1.0"

from .errors import InvalidInputError, NumericalError, PnlssError, SchemaError
from .evaluation import (BenchmarkResult, Forecast, benchmark_pnlss_vs_rbf, forecast,
                         recover_dynamics, smape, vector_field)
from .features import FeatureMap, RbfKernelBank, RidgeKernelBank
from .gauss import GaussianDensity, rank_one_tilt
from .inference import PosteriorTrajectory, run_inference
from .learning import EmConfig, EmTrace, fit, q_function
from .model import ModelParams, linear_params, load, sample_trajectory, save

__all__ = [
    "BenchmarkResult", "EmConfig", "EmTrace", "FeatureMap", "Forecast", "GaussianDensity",
    "InvalidInputError", "ModelParams", "NumericalError", "PnlssError", "PosteriorTrajectory",
    "RbfKernelBank", "RidgeKernelBank", "SchemaError", "benchmark_pnlss_vs_rbf", "fit", "forecast",
    "linear_params", "load", "q_function", "rank_one_tilt", "recover_dynamics", "run_inference",
    "sample_trajectory", "save", "smape", "vector_field",
]
