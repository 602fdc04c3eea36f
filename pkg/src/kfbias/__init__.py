"""Kalman filtering under a biased parameter vector."""
from .errors import ConfigError, DomainError, NumericError
from .kalman import (FilterInit, FilterState, default_init, predict, run_filter,
                     steady_state_riccati, stationary_covariance, update)
from .model import (BiasSpec, DerivativeBundle, ParameterVector, StateSpaceModel,
                    SystemMatrices, finite_diff_theta_derivatives, linearize_ekf,
                    make_ar1, make_ar1_drift, make_ar1_scaled_obs, make_tanh_model)
from .oracle import (monte_carlo_moments, order_of_accuracy, simulate,
                     two_filter_exact_error)
from .propagation import ar1_expected_error_path, propagate

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DomainError", "NumericError",
    "FilterInit", "FilterState", "default_init", "predict", "run_filter",
    "steady_state_riccati", "stationary_covariance", "update",
    "BiasSpec", "DerivativeBundle", "ParameterVector", "StateSpaceModel", "SystemMatrices",
    "finite_diff_theta_derivatives", "linearize_ekf",
    "make_ar1", "make_ar1_drift", "make_ar1_scaled_obs", "make_tanh_model",
    "monte_carlo_moments", "order_of_accuracy", "simulate", "two_filter_exact_error",
    "ar1_expected_error_path", "propagate",
]
