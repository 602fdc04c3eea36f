"""Ground truth for the bias propagation: simulation and exact comparisons.

Random numbers
--------------
Every stream is a Philox counter-based generator keyed by the pair
``(seed, stream)`` packed as ``seed * 2**64 + stream``; a Monte Carlo
replication ``r`` uses stream ``r``.  Standard normals come from the
Box-Muller transform applied to consecutive uniform pairs ``(u1, u2)``::

    z_{2i}   = sqrt(-2 log(1 - u1)) cos(2 pi u2)
    z_{2i+1} = sqrt(-2 log(1 - u1)) sin(2 pi u2)

A trajectory of length ``T`` consumes ``n_x + T (n_x + n_y)`` normals in
the order: ``x_0`` noise, then for each ``t`` the state noise ``eta_t``
followed by the observation noise ``eps_t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError
from .kalman import (FilterInit, default_init, gain_sequence, path_array, run_filter,
                     stationary_covariance)
from .model import ParameterVector, StateSpaceModel
from .propagation import propagate

__all__ = [
    "Trajectory",
    "ComparisonReport",
    "MonteCarloReport",
    "OrderResult",
    "gaussian_stream",
    "standard_normals",
    "simulate",
    "two_filter_exact_error",
    "compare_error_paths",
    "monte_carlo_moments",
    "jackknife_mean",
    "jackknife_cov",
    "order_of_accuracy",
    "DEFAULT_TIMES",
]

DEFAULT_TIMES = (1, 5, 20, 50)
_U64 = 2**64


def gaussian_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stream)``; both must fit in 64 bits."""
    seed, stream = int(seed), int(stream)
    if not (0 <= seed < _U64 and 0 <= stream < _U64):
        raise DomainError(f"seed and stream must be in [0, 2**64), got {seed}, {stream}")
    return np.random.Generator(np.random.Philox(key=seed * _U64 + stream))


def standard_normals(gen: np.random.Generator, n: int) -> np.ndarray:
    """``n`` standard normals by Box-Muller (see module docstring)."""
    pairs = gen.random(((n + 1) // 2, 2))
    radius = np.sqrt(-2.0 * np.log1p(-pairs[:, 0]))
    angle = 2.0 * np.pi * pairs[:, 1]
    z = np.empty(2 * pairs.shape[0])
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    return z[:n]


def _psd_factor(cov) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    if w.size and w.min() < -1e-10 * max(1.0, abs(w).max()):
        raise DomainError("initial covariance is not positive semidefinite")
    return V * np.sqrt(np.clip(w, 0.0, None))


def _x0_dist(model, theta0, x0_dist):
    if x0_dist is None:
        return np.zeros(model.n_x), stationary_covariance(model.system(theta0))
    mean, cov = x0_dist
    mean = np.asarray(mean, dtype=float).reshape(model.n_x)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    return mean, cov


@dataclass(frozen=True)
class Trajectory:
    """``states`` holds x_0..x_T, ``observations`` y_1..y_T."""

    states: np.ndarray
    observations: np.ndarray
    seed: int
    theta0: ParameterVector
    stream: int = 0

    @property
    def T(self) -> int:
        return self.observations.shape[0]


def simulate(model: StateSpaceModel, theta0, T: int, x0_dist=None, seed: int = 0,
             stream: int = 0) -> Trajectory:
    """Draw one trajectory of ``model`` under ``theta0``.

    ``x0_dist`` is ``(mean, cov)`` and defaults to the stationary law.
    """
    if T < 1:
        raise DomainError(f"T must be >= 1, got {T}")
    theta0 = theta0 if isinstance(theta0, ParameterVector) else ParameterVector(theta0)
    th = theta0.values
    mean, cov = _x0_dist(model, theta0, x0_dist)
    n_x, n_y = model.n_x, model.n_y
    z = standard_normals(gaussian_stream(seed, stream), n_x + T * (n_x + n_y))
    s_eta, s_eps = model.sigma_eta(th), model.sigma_eps(th)
    x = mean + _psd_factor(cov) @ z[:n_x]
    noise = z[n_x:].reshape(T, n_x + n_y)
    states = [x]
    obs = []
    for t in range(T):
        x = np.asarray(model.transition(th, x), dtype=float) + s_eta @ noise[t, :n_x]
        y = np.asarray(model.observation(th, x), dtype=float) + s_eps @ noise[t, n_x:]
        states.append(x)
        obs.append(y)
    return Trajectory(np.array(states), np.array(obs), int(seed), theta0, int(stream))


def two_filter_exact_error(observations, model: StateSpaceModel, theta0, theta,
                           init: FilterInit) -> np.ndarray:
    """``E_theta0[x_t | y] - E_theta[x_t | y]`` from two filters on the same data.

    Exact for models affine in the state; for other models both means are
    EKF approximations.
    """
    ref = run_filter(model, theta0, observations, init)
    biased = run_filter(model, theta, observations, init)
    return path_array(ref, "xhat") - path_array(biased, "xhat")


@dataclass
class ComparisonReport:
    """Exact versus first-order error paths, time on the leading axis."""

    t: np.ndarray
    exact: np.ndarray
    approx: np.ndarray
    gap: np.ndarray
    max_gap: float
    ekf_reference: bool


def compare_error_paths(model: StateSpaceModel, theta0, theta, observations,
                        init: Optional[FilterInit] = None,
                        derivative_method: str = "auto") -> ComparisonReport:
    """Compare :func:`two_filter_exact_error` with the propagated mean.

    Both use the same initialization; it defaults to the stationary one
    under ``theta0``.
    """
    if init is None:
        init = default_init(model, theta0)
    exact = two_filter_exact_error(observations, model, theta0, theta, init)
    res = propagate(model, theta0, theta, observations, init=init,
                    derivative_method=derivative_method)
    gap = np.abs(exact - res.m)
    return ComparisonReport(t=res.t, exact=exact, approx=res.m, gap=gap,
                            max_gap=float(gap.max()),
                            ekf_reference=not model.is_linear_in_x)


def jackknife_mean(a: np.ndarray):
    """Sample mean over axis 0 and its jackknife standard error.

    For the mean the delete-one jackknife reduces to ``s / sqrt(N)``.
    """
    n = a.shape[0]
    return a.mean(axis=0), a.std(axis=0, ddof=1) / np.sqrt(n)


def jackknife_cov(a: np.ndarray, b: np.ndarray):
    """Unbiased cross-covariance ``Cov(a, b)`` over axis 0 with jackknife errors.

    Parameters
    ----------
    a : ndarray, shape (N, p)
    b : ndarray, shape (N, q)

    Returns
    -------
    cov, se : ndarray, shape (p, q)
        ``se`` is infinite when ``N < 3`` (delete-one samples too small).
    """
    n = a.shape[0]
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    prod = ac[:, :, None] * bc[:, None, :]
    total = prod.sum(axis=0)
    cov = total / (n - 1)
    if n < 3:
        return cov, np.full(cov.shape, np.inf)
    # delete-one estimates from the centered sums
    loo = (total[None] - prod * (n / (n - 1.0))) / (n - 2.0)
    dev = loo - loo.mean(axis=0)
    se = np.sqrt((n - 1.0) / n * np.sum(dev * dev, axis=0))
    return cov, se


@dataclass
class MonteCarloReport:
    """Empirical moments of ``(e_t, x_t)`` and ``(xi_t, y_t)`` at ``times``.

    ``moments`` and ``standard_errors`` share keys: ``mean_e``, ``mean_x``,
    ``mean_xi``, ``mean_y``, ``V``, ``S``, ``P``, ``Vy``, ``Sy``, ``Py``; the
    covariance blocks follow the stacking convention of
    :mod:`kfbias.propagation` (``S = Cov(x, e)``, ``Sy = Cov(y, xi)``).
    """

    times: tuple
    n_replications: int
    master_seed: int
    moments: dict = field(default_factory=dict)
    standard_errors: dict = field(default_factory=dict)


def _replication_noise(master_seed, N, D):
    z = np.empty((N, D))
    for r in range(N):
        z[r] = standard_normals(gaussian_stream(master_seed, r), D)
    return z


def _batched_linear_paths(model, theta0, theta, T, N, master_seed, x0_dist, init, times):
    """Vectorized replications for affine models (gains do not depend on data)."""
    n_x, n_y = model.n_x, model.n_y
    sys0 = model.system(theta0)
    sys = model.system(theta)
    gains, _ = gain_sequence(sys, init.P0, T)
    mean, cov = _x0_dist(model, theta0, x0_dist)
    z = _replication_noise(master_seed, N, n_x + T * (n_x + n_y))
    x = mean + z[:, :n_x] @ _psd_factor(cov).T
    xh = np.broadcast_to(init.x0, (N, n_x)).copy()
    wanted = set(times)
    rec = {t: None for t in times}
    offset = n_x
    for t in range(1, T + 1):
        eta = z[:, offset:offset + n_x]
        eps = z[:, offset + n_x:offset + n_x + n_y]
        offset += n_x + n_y
        x = sys0.u + x @ sys0.A.T + eta @ sys0.sigma_eta.T
        y = sys0.d + x @ sys0.C.T + eps @ sys0.sigma_eps.T
        xh_pred = sys.u + xh @ sys.A.T
        xh = xh_pred + (y - sys.d - xh_pred @ sys.C.T) @ gains[t - 1].T
        if t in wanted:
            rec[t] = (x - xh, x.copy(), y - sys.d - xh @ sys.C.T, y)
    return rec


def _looped_paths(model, theta0, theta, T, N, master_seed, x0_dist, init, times):
    rec = {t: ([], [], [], []) for t in times}
    theta = theta if isinstance(theta, ParameterVector) else ParameterVector(theta)
    for r in range(N):
        traj = simulate(model, theta0, T, x0_dist, seed=master_seed, stream=r)
        states = run_filter(model, theta, traj.observations, init)
        for t in times:
            s = states[t - 1]
            xi = traj.observations[t - 1] - s.system.d - s.system.C @ s.xhat
            for lst, v in zip(rec[t], (traj.states[t] - s.xhat, traj.states[t],
                                       xi, traj.observations[t - 1])):
                lst.append(v)
    return {t: tuple(np.array(v) for v in rec[t]) for t in times}


def monte_carlo_moments(model: StateSpaceModel, theta0, theta, T: int, N: int,
                        master_seed: int, times: Sequence[int] = DEFAULT_TIMES,
                        x0_dist=None, init: Optional[FilterInit] = None) -> MonteCarloReport:
    """Sample ``N`` trajectories under ``theta0``, filter each under ``theta``.

    Replication ``r`` draws from stream ``(master_seed, r)``, so results do
    not depend on evaluation order.
    """
    if N < 2:
        raise DomainError(f"need at least 2 replications, got {N}")
    times = tuple(sorted({int(t) for t in times}))
    if not times or times[0] < 1 or times[-1] > T:
        raise DomainError(f"checked times must lie in [1, {T}], got {times}")
    if init is None:
        init = default_init(model, theta)
    runner = _batched_linear_paths if model.is_linear_in_x else _looped_paths
    rec = runner(model, theta0, theta, T, N, master_seed, x0_dist, init, times)
    report = MonteCarloReport(times=times, n_replications=N, master_seed=master_seed)
    est = {k: [] for k in ("mean_e", "mean_x", "mean_xi", "mean_y",
                           "V", "S", "P", "Vy", "Sy", "Py")}
    ses = {k: [] for k in est}
    for t in times:
        e, x, xi, y = rec[t]
        for key, arr in (("mean_e", e), ("mean_x", x), ("mean_xi", xi), ("mean_y", y)):
            m, s = jackknife_mean(arr)
            est[key].append(m)
            ses[key].append(s)
        for key, (a, b) in (("V", (e, e)), ("S", (x, e)), ("P", (x, x)),
                            ("Vy", (xi, xi)), ("Sy", (y, xi)), ("Py", (y, y))):
            c, s = jackknife_cov(a, b)
            est[key].append(c)
            ses[key].append(s)
    report.moments = {k: np.array(v) for k, v in est.items()}
    report.standard_errors = {k: np.array(v) for k, v in ses.items()}
    return report


@dataclass
class OrderResult:
    scales: np.ndarray
    residuals: np.ndarray
    slope: float
    exact: bool

    @property
    def status(self) -> str:
        return "exact to machine precision" if self.exact else f"slope {self.slope:.4f}"


MACHINE_EXACT = 1e-14


def order_of_accuracy(model: StateSpaceModel, theta0, eps_direction, scales, T: int,
                      seed: int, x0_dist=None, init: Optional[FilterInit] = None,
                      derivative_method: str = "auto") -> OrderResult:
    """Empirical order of the first-order expansion.

    For each scale ``s`` the filter runs under ``theta0 + s * direction`` on one
    fixed trajectory, and ``r(s) = max_t |m_t - exact_t|``.  The slope of
    ``log r`` against ``log s`` is fitted by least squares.
    """
    scales = np.asarray(scales, dtype=float).reshape(-1)
    if scales.size < 3:
        raise DomainError(f"need at least 3 scales, got {scales.size}")
    if np.any(scales <= 0):
        raise DomainError("scales must be positive")
    if np.ptp(scales) == 0:
        raise DomainError("degenerate fit: all scales are equal")
    if np.any(np.diff(scales) >= 0):
        raise DomainError("scales must be strictly decreasing")
    theta0 = theta0 if isinstance(theta0, ParameterVector) else ParameterVector(theta0)
    direction = np.asarray(eps_direction, dtype=float).reshape(-1)
    if direction.size != len(theta0):
        raise DomainError("direction length does not match theta0")
    data = simulate(model, theta0, T, x0_dist, seed=seed)
    if init is None:
        init = default_init(model, theta0)
    residuals = []
    for s in scales:
        theta = ParameterVector(theta0.values + s * direction)
        rep = compare_error_paths(model, theta0, theta, data.observations, init,
                                  derivative_method)
        residuals.append(rep.max_gap)
    residuals = np.array(residuals)
    if residuals.max() < MACHINE_EXACT:
        return OrderResult(scales, residuals, float("nan"), True)
    logr = np.log(np.maximum(residuals, np.finfo(float).tiny))
    slope = np.polyfit(np.log(scales), logr, 1)[0]
    return OrderResult(scales, residuals, float(slope), False)
