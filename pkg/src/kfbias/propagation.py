"""First-order propagation of a parameter bias through the Kalman filter.

The filter runs under ``theta = theta0 + eps`` while data come from
``theta0``.  Its a-posteriori error ``e_t = x_t - E_theta[x_t | y_1:t]``
obeys, up to ``o(eps)``, the classical error recursion plus corrective
terms that are linear in ``eps``; stacking ``(e_t, x_t)`` gives an affine
system whose mean and covariance follow Lyapunov-type recursions.

Conventions
-----------
* Bias contractions are ``sum_k eps_k * d(.)/dtheta_k``.
* Gains are those of the filter actually run, i.e. computed under ``theta``.
* The stacked covariance is ``[[V, S'], [S, P]]`` with ``V = Var(e)``,
  ``S = Cov(x, e)`` and ``P = Var(x)``; the observation side uses the pair
  ``(xi_t, y_t)`` with ``xi_t = y_t - d_t - C x_hat_t``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, NumericError
from .kalman import FilterInit, default_init, path_array, run_filter, stationary_covariance
from .model import (BiasSpec, DerivativeBundle, ParameterVector, StateSpaceModel,
                    SystemMatrices, linearize_ekf, theta_derivatives)

__all__ = [
    "CorrectiveTerms",
    "NoiseMomentBlocks",
    "AugmentedMean",
    "AugmentedCovariance",
    "PropagationResult",
    "corrective_state_terms",
    "corrective_obs_terms",
    "corrective_terms",
    "expected_error_step",
    "expected_residual",
    "augmented_transition",
    "observation_map",
    "noise_moment_blocks",
    "covariance_step",
    "obs_covariance_step",
    "ar1_expected_error_path",
    "propagate",
]


def _block2(rows) -> np.ndarray:
    """Assemble a 2x2 block matrix (faster than ``np.block`` for small inputs)."""
    (a, b), (c, d) = rows
    out = np.empty((a.shape[0] + c.shape[0], a.shape[1] + b.shape[1]))
    out[:a.shape[0], :a.shape[1]] = a
    out[:a.shape[0], a.shape[1]:] = b
    out[a.shape[0]:, :a.shape[1]] = c
    out[a.shape[0]:, a.shape[1]:] = d
    return out


@dataclass(frozen=True)
class CorrectiveTerms:
    E_x: np.ndarray
    F_x: np.ndarray
    E_y: np.ndarray
    F_y: np.ndarray


@dataclass(frozen=True)
class NoiseMomentBlocks:
    """Second moments of the stacked noise at one time step.

    ``cov_Wx_eta`` is ``E[W_x (sigma_eta0 eta)']`` and ``cov_Wy_eps`` is
    ``E[W_y (sigma_eps0 eps)']``.  ``cross_Wx_Wy`` and ``cross_Wx_eps`` are the
    covariances between the state-side noise and the two observation-side
    noises; they are non-zero because ``e_t`` contains ``-K sigma_eps eps_t``.
    """

    var_Wx: np.ndarray
    cov_Wx_eta: np.ndarray
    Q0: np.ndarray
    var_Wy: np.ndarray
    cov_Wy_eps: np.ndarray
    R0: np.ndarray
    cross_Wx_Wy: np.ndarray
    cross_Wx_eps: np.ndarray

    def state_noise(self) -> np.ndarray:
        return _block2([[self.var_Wx, self.cov_Wx_eta],
                         [self.cov_Wx_eta.T, self.Q0]])

    def obs_noise(self) -> np.ndarray:
        return _block2([[self.var_Wy, self.cov_Wy_eps],
                         [self.cov_Wy_eps.T, self.R0]])

    def state_obs_cross(self) -> np.ndarray:
        """``Cov((e_t, x_t), (W_y, sigma_eps0 eps_t))``, shape ``(2 n_x, 2 n_y)``."""
        n_x, n_y = self.cross_Wx_Wy.shape
        return _block2([[self.cross_Wx_Wy, self.cross_Wx_eps],
                         [np.zeros((n_x, n_y)), np.zeros((n_x, n_y))]])


@dataclass(frozen=True)
class AugmentedMean:
    """``m`` is ``E_theta0[e_t | y_1:t]``; ``xhat_theta`` the theta-filter mean."""

    m: np.ndarray
    xhat_theta: np.ndarray


@dataclass(frozen=True)
class AugmentedCovariance:
    V: np.ndarray
    S: np.ndarray
    P: np.ndarray
    Vy: Optional[np.ndarray] = None
    Sy: Optional[np.ndarray] = None
    Py: Optional[np.ndarray] = None

    @classmethod
    def initial(cls, x0_cov) -> "AugmentedCovariance":
        """Stacked covariance at t=0 for a deterministic initial estimate.

        Then ``e_0 = x_0 - xhat_0`` and all three blocks equal ``Var(x_0)``.
        """
        P0 = np.atleast_2d(np.asarray(x0_cov, dtype=float))
        return cls(P0.copy(), P0.copy(), P0.copy())

    @classmethod
    def from_matrix(cls, sigma: np.ndarray) -> "AugmentedCovariance":
        n = sigma.shape[0] // 2
        return cls(sigma[:n, :n], sigma[n:, :n], sigma[n:, n:])

    def state_matrix(self) -> np.ndarray:
        return _block2([[self.V, self.S.T], [self.S, self.P]])

    def obs_matrix(self) -> np.ndarray:
        if self.Vy is None:
            raise DomainError("observation-side blocks have not been computed")
        return _block2([[self.Vy, self.Sy.T], [self.Sy, self.Py]])


def _bias(eps) -> BiasSpec:
    return eps if isinstance(eps, BiasSpec) else BiasSpec(eps)


def corrective_state_terms(sys_theta: SystemMatrices, derivs: DerivativeBundle,
                           K_t, eps):
    """State-side corrective offset ``E_x`` and matrix ``F_x``."""
    derivs.check(sys_theta)
    D = derivs.directional(_bias(eps))
    K = np.atleast_2d(K_t)
    IKC = np.eye(sys_theta.n_x) - K @ sys_theta.C
    E_x = -(IKC @ D.u - K @ D.d - K @ D.C @ sys_theta.u)
    F_x = -(IKC @ D.A - K @ D.C @ sys_theta.A)
    return E_x, F_x


def corrective_obs_terms(derivs: DerivativeBundle, eps):
    """Observation-side corrective offset ``E_y`` and matrix ``F_y``."""
    D = derivs.directional(_bias(eps))
    return -D.d, -D.C


def corrective_terms(sys_theta, derivs, K_t, eps) -> CorrectiveTerms:
    E_x, F_x = corrective_state_terms(sys_theta, derivs, K_t, eps)
    E_y, F_y = corrective_obs_terms(derivs, eps)
    return CorrectiveTerms(E_x, F_x, E_y, F_y)


def expected_error_step(prev: AugmentedMean, sys_theta: SystemMatrices, K_t,
                        terms: CorrectiveTerms, xhat_theta) -> AugmentedMean:
    """Advance ``E_theta0[e | y]`` by one step.

    ``xhat_theta`` is the theta-filter's posterior mean at the new time; the
    recursion itself uses the one carried in ``prev``.
    """
    K = np.atleast_2d(K_t)
    core = (np.eye(sys_theta.n_x) - K @ sys_theta.C) @ sys_theta.A
    m = (core + terms.F_x) @ prev.m + terms.E_x + terms.F_x @ prev.xhat_theta
    return AugmentedMean(m, np.asarray(xhat_theta, dtype=float))


def expected_residual(mean: AugmentedMean, sys_theta: SystemMatrices,
                      terms: CorrectiveTerms) -> np.ndarray:
    return (sys_theta.C + terms.F_y) @ mean.m + terms.E_y + terms.F_y @ mean.xhat_theta


def augmented_transition(sys_theta: SystemMatrices, sys_theta0: SystemMatrices, K_t,
                         terms: CorrectiveTerms) -> np.ndarray:
    """Transition of the stacked ``(e, x)`` system."""
    if sys_theta.n_x != sys_theta0.n_x:
        raise DomainError("theta and theta0 systems have different state dimensions")
    n = sys_theta.n_x
    K = np.atleast_2d(K_t)
    core = (np.eye(n) - K @ sys_theta.C) @ sys_theta.A
    return _block2([[core, terms.F_x], [np.zeros((n, n)), sys_theta0.A]])


def observation_map(sys_theta, sys_theta0, terms: CorrectiveTerms) -> np.ndarray:
    """Map from ``(e_t, x_t)`` to ``(xi_t, y_t)``."""
    n_y, n_x = sys_theta.C.shape
    return _block2([[sys_theta.C, terms.F_y], [np.zeros((n_y, n_x)), sys_theta0.C]])


def noise_moment_blocks(sys_theta: SystemMatrices, sys_theta0: SystemMatrices,
                        derivs: DerivativeBundle, K_t, eps) -> NoiseMomentBlocks:
    """Exact second moments of the stacked noise.

    The state-side noise is ``B_eta eta_t + B_eps eps_t`` and the
    observation-side noise ``B_y eps_t`` with coefficient matrices that are
    affine in the bias, so every moment is a product of coefficients.
    """
    D = derivs.directional(_bias(eps))
    K = np.atleast_2d(K_t)
    IKC = np.eye(sys_theta.n_x) - K @ sys_theta.C
    s_eta, s_eps = sys_theta.sigma_eta, sys_theta.sigma_eps
    B_eta = IKC @ s_eta - (IKC @ D.sigma_eta - K @ D.C @ s_eta)
    B_eps = -K @ s_eps + K @ D.sigma_eps
    B_y = s_eps - D.sigma_eps
    s_eta0, s_eps0 = sys_theta0.sigma_eta, sys_theta0.sigma_eps
    return NoiseMomentBlocks(
        var_Wx=B_eta @ B_eta.T + B_eps @ B_eps.T,
        cov_Wx_eta=B_eta @ s_eta0.T,
        Q0=s_eta0 @ s_eta0.T,
        var_Wy=B_y @ B_y.T,
        cov_Wy_eps=B_y @ s_eps0.T,
        R0=s_eps0 @ s_eps0.T,
        cross_Wx_Wy=B_eps @ B_y.T,
        cross_Wx_eps=B_eps @ s_eps0.T,
    )


def _symmetrized(sigma: np.ndarray, what: str) -> np.ndarray:
    scale = max(abs(np.trace(sigma)), np.finfo(float).tiny)
    asym = np.max(np.abs(sigma - sigma.T)) if sigma.size else 0.0
    if not np.all(np.isfinite(sigma)):
        raise NumericError(f"{what} has non-finite entries")
    if asym > 1e-9 * scale:
        raise NumericError(f"{what} asymmetry {asym:.3e} exceeds 1e-9 * trace")
    return 0.5 * (sigma + sigma.T)


def covariance_step(prev: AugmentedCovariance, M_t: np.ndarray,
                    blocks: NoiseMomentBlocks) -> AugmentedCovariance:
    """``Sigma_t = M_t Sigma_{t-1} M_t' + N_t`` for the stacked state."""
    sigma = M_t @ prev.state_matrix() @ M_t.T + blocks.state_noise()
    return AugmentedCovariance.from_matrix(_symmetrized(sigma, "state covariance"))


def obs_covariance_step(state_cov: AugmentedCovariance, sys_theta, sys_theta0,
                        terms: CorrectiveTerms, blocks: NoiseMomentBlocks,
                        correlated_noise: bool = True) -> AugmentedCovariance:
    """Fill in the ``(xi_t, y_t)`` covariance blocks.

    With ``correlated_noise=False`` the observation noise is treated as
    independent of ``e_t``, which drops ``G J + J' G'`` and no longer matches
    the sampling distribution.
    """
    G = observation_map(sys_theta, sys_theta0, terms)
    sigma = G @ state_cov.state_matrix() @ G.T + blocks.obs_noise()
    if correlated_noise:
        GJ = G @ blocks.state_obs_cross()
        sigma = sigma + GJ + GJ.T
    sigma = _symmetrized(sigma, "observation covariance")
    n = sys_theta.n_y
    return AugmentedCovariance(state_cov.V, state_cov.S, state_cov.P,
                               Vy=sigma[:n, :n], Sy=sigma[n:, :n], Py=sigma[n:, n:])


def ar1_expected_error_path(phi: float, eps: float, gains: Sequence[float],
                            xhat_theta_path: Sequence[float], m0: float = 0.0) -> np.ndarray:
    """Closed-form AR(1) recursion for ``E_theta0[e_t | y_1:t]``.

    Parameters
    ----------
    phi : float
        Autoregressive coefficient used by the filter (``phi0 + eps``).
    eps : float
        Bias of ``phi``.
    gains : sequence of float
        ``K_1, ..., K_T`` of the phi-filter.
    xhat_theta_path : sequence of float
        Previous posterior means ``xhat_0, ..., xhat_{T-1}`` of the phi-filter,
        aligned with ``gains``.
    m0 : float
        Starting value ``E[e_0]``.
    """
    K = np.asarray(gains, dtype=float).reshape(-1)
    xprev = np.asarray(xhat_theta_path, dtype=float).reshape(-1)
    if K.size != xprev.size:
        raise DomainError(f"gains ({K.size}) and xhat path ({xprev.size}) differ in length")
    out = np.empty(K.size)
    m = float(m0)
    for t in range(K.size):
        m = (1.0 - K[t]) * (phi - eps) * m - eps * (1.0 - K[t]) * xprev[t]
        out[t] = m
    return out


@dataclass
class PropagationResult:
    """Per-time outputs of :func:`propagate`, time on the leading axis (t = 1..T)."""

    t: np.ndarray
    m: np.ndarray
    residual: np.ndarray
    mean_e: np.ndarray
    mean_x: np.ndarray
    mean_xi: np.ndarray
    mean_y: np.ndarray
    V: np.ndarray
    S: np.ndarray
    P: np.ndarray
    Vy: np.ndarray
    Sy: np.ndarray
    Py: np.ndarray
    gains: np.ndarray
    filter_P: np.ndarray
    xhat_theta: np.ndarray
    terms: list


def propagate(model: StateSpaceModel, theta0, theta, observations,
              init: Optional[FilterInit] = None, x0_mean=None, x0_cov=None,
              m0=None, derivative_method: str = "auto",
              correlated_noise: bool = True) -> PropagationResult:
    """Run the theta-filter on ``observations`` and propagate the bias.

    Parameters
    ----------
    model : StateSpaceModel
    theta0, theta : ParameterVector or array_like
        True and filter parameters.
    observations : array_like, shape (T, n_y)
    init : FilterInit, optional
        Filter initialization; defaults to zero mean and the stationary
        covariance under ``theta``.
    x0_mean, x0_cov : array_like, optional
        Distribution of the true initial state, defaulting to zero mean and
        the stationary covariance under ``theta0``.  Only the covariance path
        and the unconditional means use it.
    m0 : array_like, optional
        Starting value of the conditional error mean (zero by default: both
        filters share the initial estimate).
    """
    theta0 = theta0 if isinstance(theta0, ParameterVector) else ParameterVector(theta0)
    theta = theta if isinstance(theta, ParameterVector) else ParameterVector(theta)
    eps = BiasSpec.between(theta0, theta)
    if init is None:
        init = default_init(model, theta)
    if x0_mean is None:
        x0_mean = np.zeros(model.n_x)
    if x0_cov is None:
        x0_cov = stationary_covariance(model.system(theta0))
    x0_mean = np.asarray(x0_mean, dtype=float).reshape(model.n_x)
    states = run_filter(model, theta, observations, init)

    mean = AugmentedMean(np.zeros(model.n_x) if m0 is None else np.asarray(m0, float),
                         init.x0)
    cov = AugmentedCovariance.initial(x0_cov)
    mu = np.concatenate([x0_mean - init.x0, x0_mean])
    out = {k: [] for k in ("m", "residual", "mean_e", "mean_x", "mean_xi", "mean_y",
                           "V", "S", "P", "Vy", "Sy", "Py", "terms")}
    x_prev = init.x0
    # affine models: theta0 system and derivatives are the same at every step
    fixed = None
    if model.is_linear_in_x:
        point = (init.x0, init.x0)
        fixed = (linearize_ekf(model, theta0, *point),
                 theta_derivatives(model, theta, point, method=derivative_method))
    for state in states:
        point = (x_prev, state.xhat_pred)
        sys = state.system
        if fixed is not None:
            sys0, derivs = fixed
        else:
            sys0 = linearize_ekf(model, theta0, *point)
            derivs = theta_derivatives(model, theta, point, method=derivative_method)
        terms = corrective_terms(sys, derivs, state.gain, eps)

        mean = expected_error_step(mean, sys, state.gain, terms, state.xhat)
        M = augmented_transition(sys, sys0, state.gain, terms)
        blocks = noise_moment_blocks(sys, sys0, derivs, state.gain, eps)
        cov = covariance_step(cov, M, blocks)
        cov = obs_covariance_step(cov, sys, sys0, terms, blocks, correlated_noise)
        mu = M @ mu + np.concatenate([terms.E_x, sys0.u])

        out["m"].append(mean.m)
        out["residual"].append(expected_residual(mean, sys, terms))
        out["mean_e"].append(mu[:model.n_x])
        out["mean_x"].append(mu[model.n_x:])
        mu_y = observation_map(sys, sys0, terms) @ mu + np.concatenate([terms.E_y, sys0.d])
        out["mean_xi"].append(mu_y[:model.n_y])
        out["mean_y"].append(mu_y[model.n_y:])
        for k in ("V", "S", "P", "Vy", "Sy", "Py"):
            out[k].append(getattr(cov, k))
        out["terms"].append(terms)
        x_prev = state.xhat

    arrays = {k: np.array(v) for k, v in out.items() if k != "terms"}
    return PropagationResult(
        t=np.arange(1, len(states) + 1), terms=out["terms"],
        gains=path_array(states, "gain"), filter_P=path_array(states, "P"),
        xhat_theta=path_array(states, "xhat"), **arrays)
