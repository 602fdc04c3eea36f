"""Kalman and extended Kalman filtering."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_discrete_lyapunov

from .errors import DomainError, NumericError
from .model import ParameterVector, StateSpaceModel, SystemMatrices, linearize_ekf

__all__ = [
    "FilterInit",
    "FilterState",
    "RiccatiSolution",
    "predict",
    "update",
    "run_filter",
    "gain_sequence",
    "steady_state_riccati",
    "stationary_covariance",
    "default_init",
    "path_array",
]

COND_LIMIT = 1e12


@dataclass(frozen=True)
class FilterInit:
    """Initial posterior mean and covariance."""

    x0: np.ndarray
    P0: np.ndarray

    def __post_init__(self):
        x0 = np.atleast_1d(np.array(self.x0, dtype=float))
        P0 = np.atleast_2d(np.array(self.P0, dtype=float))
        if P0.shape != (x0.size, x0.size):
            raise DomainError(f"P0 has shape {P0.shape}, expected {(x0.size, x0.size)}")
        if not np.allclose(P0, P0.T, atol=1e-12):
            raise DomainError("P0 must be symmetric")
        if np.linalg.eigvalsh(P0).min() < -1e-12:
            raise DomainError("P0 must be positive semidefinite")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "P0", P0)

    # Lets an init stand in for the "previous posterior" of step 1.
    @property
    def xhat(self):
        return self.x0

    @property
    def P(self):
        return self.P0


@dataclass(frozen=True)
class FilterState:
    """Filter output at time ``t``.

    ``system`` is the (linearized) system the step was run with; the bias
    propagation needs it together with the gain.
    """

    t: int
    xhat_pred: np.ndarray
    P_pred: np.ndarray
    gain: np.ndarray
    innovation: np.ndarray
    innovation_cov: np.ndarray
    xhat: np.ndarray
    P: np.ndarray
    system: SystemMatrices


class RiccatiSolution(NamedTuple):
    P_pred: np.ndarray
    gain: np.ndarray
    iterations: int


def predict(prev: Union[FilterState, FilterInit], sys: SystemMatrices):
    """Time update: returns ``(xhat_pred, P_pred)``."""
    xhat_pred = sys.u + sys.A @ prev.xhat
    P_pred = sys.A @ prev.P @ sys.A.T + sys.Q
    return xhat_pred, P_pred


def _solve_innovation(S, CP):
    """Return ``S^{-1} C P`` via Cholesky, rejecting ill-conditioned ``S``."""
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise NumericError(f"innovation covariance is singular (condition estimate {cond:.3e})")
    try:
        factor = cho_factor(S, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"innovation covariance is not positive definite "
                           f"(condition estimate {cond:.3e})") from exc
    return cho_solve(factor, CP)


def update(pred, sys: SystemMatrices, y_t, t: int = 0) -> FilterState:
    """Measurement update with the optimal gain."""
    xhat_pred, P_pred = pred
    y_t = np.atleast_1d(np.asarray(y_t, dtype=float))
    C = sys.C
    S = C @ P_pred @ C.T + sys.R
    S = 0.5 * (S + S.T)
    K = _solve_innovation(S, C @ P_pred).T
    innovation = y_t - sys.d - C @ xhat_pred
    xhat = xhat_pred + K @ innovation
    P = (np.eye(sys.n_x) - K @ C) @ P_pred
    P = 0.5 * (P + P.T)
    return FilterState(t=t, xhat_pred=xhat_pred, P_pred=P_pred, gain=K,
                       innovation=innovation, innovation_cov=S, xhat=xhat, P=P,
                       system=sys)


def stationary_covariance(sys: SystemMatrices) -> np.ndarray:
    """Solve ``P = A P A' + Q``; requires a stable ``A``."""
    rho = np.max(np.abs(np.linalg.eigvals(sys.A)))
    if rho >= 1.0:
        raise DomainError(f"state transition is not stable (spectral radius {rho:.6g})")
    P = solve_discrete_lyapunov(sys.A, sys.Q)
    return 0.5 * (P + P.T)


def default_init(model: StateSpaceModel, theta=None) -> FilterInit:
    """Zero mean and the stationary covariance under ``theta``."""
    sys = model.system(theta)
    return FilterInit(np.zeros(model.n_x), stationary_covariance(sys))


def run_filter(model: StateSpaceModel, theta, observations: Sequence,
               init: Optional[FilterInit] = None) -> list[FilterState]:
    """Filter ``observations`` under ``theta``.

    Affine models get the exact Kalman filter; other models are linearized at
    the previous posterior mean (state side) and the current prior mean
    (observation side) once per step.
    """
    theta = theta if isinstance(theta, ParameterVector) else ParameterVector(theta)
    obs = np.asarray(observations, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    if obs.shape[0] == 0:
        raise DomainError("observation sequence is empty")
    if obs.shape[1] != model.n_y:
        raise DomainError(f"observations have dimension {obs.shape[1]}, expected {model.n_y}")
    if init is None:
        init = default_init(model, theta)
    if init.x0.shape != (model.n_x,):
        raise DomainError(f"initial mean has shape {init.x0.shape}, expected ({model.n_x},)")
    th = theta.values
    prev = init
    states = []
    fixed = linearize_ekf(model, theta, init.x0, init.x0) if model.is_linear_in_x else None
    for t, y in enumerate(obs, start=1):
        if fixed is not None:
            sys = fixed
        else:
            x_pred_point = np.asarray(model.transition(th, prev.xhat), dtype=float)
            sys = linearize_ekf(model, theta, prev.xhat, x_pred_point)
        prev = update(predict(prev, sys), sys, y, t=t)
        states.append(prev)
    return states


def gain_sequence(sys: SystemMatrices, P0, T: int):
    """Gains and posterior covariances of an affine filter for ``T`` steps.

    They do not depend on the data, so batched simulations can share them.
    """
    P = np.atleast_2d(np.asarray(P0, dtype=float))
    gains, covs = [], []
    I = np.eye(sys.n_x)
    for _ in range(T):
        P_pred = sys.A @ P @ sys.A.T + sys.Q
        S = sys.C @ P_pred @ sys.C.T + sys.R
        S = 0.5 * (S + S.T)
        K = _solve_innovation(S, sys.C @ P_pred).T
        P = (I - K @ sys.C) @ P_pred
        P = 0.5 * (P + P.T)
        gains.append(K)
        covs.append(P)
    return np.array(gains), np.array(covs)


def steady_state_riccati(sys: SystemMatrices, tol: float = 1e-12,
                         max_iter: int = 100_000) -> RiccatiSolution:
    """Fixed point of the prediction-form Riccati recursion.

    Iterates ``P <- A (P - P C' S^{-1} C P) A' + Q`` from ``P = Q`` until the
    max-norm change drops below ``tol``.
    """
    if tol <= 0:
        raise DomainError("tol must be positive")
    A, C, Q, R = sys.A, sys.C, sys.Q, sys.R
    P = Q.copy()
    residual = np.inf
    for it in range(1, max_iter + 1):
        S = C @ P @ C.T + R
        K = _solve_innovation(0.5 * (S + S.T), C @ P).T
        P_new = A @ (P - K @ C @ P) @ A.T + Q
        P_new = 0.5 * (P_new + P_new.T)
        residual = np.max(np.abs(P_new - P))
        P = P_new
        if residual < tol:
            S = C @ P @ C.T + R
            K = _solve_innovation(0.5 * (S + S.T), C @ P).T
            return RiccatiSolution(P, K, it)
    raise NumericError(f"Riccati iteration did not converge in {max_iter} steps "
                       f"(last residual {residual:.3e})")


def path_array(states: Sequence[FilterState], attr: str) -> np.ndarray:
    """Stack one attribute of a filter path along a leading time axis."""
    return np.array([getattr(s, attr) for s in states])
