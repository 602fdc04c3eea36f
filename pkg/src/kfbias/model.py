"""State space models, their linearization and theta-derivatives.

A model describes the additive-noise system::

    x_t = b(theta, x_{t-1}) + sigma_eta(theta) @ eta_t
    y_t = h(theta, x_t)     + sigma_eps(theta) @ eps_t

with independent standard Gaussian ``eta_t`` and ``eps_t``.  Around a pair of
linearization points the system is replaced by its affine form
``x_t = u_t + A x_{t-1}``, ``y_t = d_t + C x_t`` (the EKF convention); for
models that are affine in ``x`` the stored matrices are used directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, NumericError

__all__ = [
    "ParameterVector",
    "BiasSpec",
    "SystemMatrices",
    "DerivativeBundle",
    "StateSpaceModel",
    "linear_model",
    "nonlinear_model",
    "make_ar1",
    "make_ar1_drift",
    "make_ar1_scaled_obs",
    "make_tanh_model",
    "linearize_ekf",
    "finite_diff_theta_derivatives",
    "analytic_theta_derivatives",
    "theta_derivatives",
    "check_jacobians",
]


def _frozen(a, ndim=None, name="array"):
    a = np.array(a, dtype=float)
    if ndim is not None and a.ndim != ndim:
        raise DomainError(f"{name} must be {ndim}-dimensional, got shape {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ParameterVector:
    """Model parameter vector theta of length r >= 1."""

    values: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.array(self.values, dtype=float))
        if v.ndim != 1 or v.size < 1:
            raise DomainError("parameter vector must be 1-D with at least one entry")
        if not np.all(np.isfinite(v)):
            raise DomainError(f"parameter vector has non-finite entries: {v}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())

    def shifted(self, bias: "BiasSpec") -> "ParameterVector":
        """Return ``theta + epsilon``."""
        bias.check(len(self))
        return ParameterVector(self.values + bias.epsilon)


@dataclass(frozen=True)
class BiasSpec:
    """Fixed parameter bias ``epsilon = theta - theta0``."""

    epsilon: np.ndarray

    def __post_init__(self):
        e = np.atleast_1d(np.array(self.epsilon, dtype=float))
        if e.ndim != 1:
            raise DomainError("bias must be a 1-D vector")
        if not np.all(np.isfinite(e)):
            raise DomainError(f"bias has non-finite entries: {e}")
        e.setflags(write=False)
        object.__setattr__(self, "epsilon", e)

    @classmethod
    def between(cls, theta0: ParameterVector, theta: ParameterVector) -> "BiasSpec":
        if len(theta0) != len(theta):
            raise DomainError("theta and theta0 have different lengths")
        return cls(theta.values - theta0.values)

    def check(self, r: int) -> None:
        if self.epsilon.size != r:
            raise DomainError(f"bias has length {self.epsilon.size}, expected {r}")

    @property
    def is_zero(self) -> bool:
        return not np.any(self.epsilon)


@dataclass(frozen=True)
class SystemMatrices:
    """Affine system matrices.

    ``x_t = u + A x_{t-1} + sigma_eta eta_t`` and ``y_t = d + C x_t + sigma_eps eps_t``.
    """

    u: np.ndarray
    A: np.ndarray
    d: np.ndarray
    C: np.ndarray
    sigma_eta: np.ndarray
    sigma_eps: np.ndarray

    def __post_init__(self):
        for name, ndim in (("u", 1), ("A", 2), ("d", 1), ("C", 2),
                           ("sigma_eta", 2), ("sigma_eps", 2)):
            object.__setattr__(self, name, _frozen(getattr(self, name), ndim, name))
        n_x, n_y = self.u.size, self.d.size
        shapes = {"A": (n_x, n_x), "C": (n_y, n_x),
                  "sigma_eta": (n_x, n_x), "sigma_eps": (n_y, n_y)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise DomainError(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def n_x(self) -> int:
        return self.u.size

    @property
    def n_y(self) -> int:
        return self.d.size

    @property
    def Q(self) -> np.ndarray:
        return self.sigma_eta @ self.sigma_eta.T

    @property
    def R(self) -> np.ndarray:
        return self.sigma_eps @ self.sigma_eps.T


@dataclass(frozen=True)
class DerivativeBundle:
    """Per-component theta-derivatives of a :class:`SystemMatrices`.

    Every array carries the parameter index as its leading axis, so
    ``dA[k]`` is ``dA/dtheta_k``.
    """

    du: np.ndarray
    dA: np.ndarray
    dd: np.ndarray
    dC: np.ndarray
    dsigma_eta: np.ndarray
    dsigma_eps: np.ndarray
    # last contraction, reused while the bias does not change
    _last: Optional[tuple] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        for name, ndim in (("du", 2), ("dA", 3), ("dd", 2), ("dC", 3),
                           ("dsigma_eta", 3), ("dsigma_eps", 3)):
            object.__setattr__(self, name, _frozen(getattr(self, name), ndim, name))
        r = self.du.shape[0]
        for name in ("dA", "dd", "dC", "dsigma_eta", "dsigma_eps"):
            if getattr(self, name).shape[0] != r:
                raise DomainError(f"{name} covers {getattr(self, name).shape[0]} "
                                  f"parameters, expected {r}")

    @property
    def r(self) -> int:
        return self.du.shape[0]

    @classmethod
    def zeros(cls, r: int, n_x: int, n_y: int) -> "DerivativeBundle":
        return cls(np.zeros((r, n_x)), np.zeros((r, n_x, n_x)), np.zeros((r, n_y)),
                   np.zeros((r, n_y, n_x)), np.zeros((r, n_x, n_x)),
                   np.zeros((r, n_y, n_y)))

    def check(self, sys: SystemMatrices) -> None:
        expected = {
            "du": (sys.n_x,), "dA": (sys.n_x, sys.n_x), "dd": (sys.n_y,),
            "dC": (sys.n_y, sys.n_x), "dsigma_eta": (sys.n_x, sys.n_x),
            "dsigma_eps": (sys.n_y, sys.n_y),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape[1:] != shape:
                raise DomainError(f"{name} entries have shape "
                                  f"{getattr(self, name).shape[1:]}, expected {shape}")

    def directional(self, eps) -> SystemMatrices:
        """Contract with a bias vector: ``sum_k eps_k * d(.)/dtheta_k``."""
        eps = np.asarray(eps.epsilon if isinstance(eps, BiasSpec) else eps, dtype=float)
        if eps.shape != (self.r,):
            raise DomainError(f"bias has shape {eps.shape}, expected ({self.r},)")
        key = eps.tobytes()
        if self._last is not None and self._last[0] == key:
            return self._last[1]

        def contract(arr):
            return (eps @ arr.reshape(self.r, -1)).reshape(arr.shape[1:])

        out = SystemMatrices(
            u=contract(self.du), A=contract(self.dA), d=contract(self.dd),
            C=contract(self.dC), sigma_eta=contract(self.dsigma_eta),
            sigma_eps=contract(self.dsigma_eps),
        )
        object.__setattr__(self, "_last", (key, out))
        return out


ThetaFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class StateSpaceModel:
    """Parametric additive-noise state space model.

    All callables receive the raw parameter array ``theta`` (shape ``(r,)``).

    Attributes
    ----------
    transition, observation : callable ``(theta, x) -> array``
        The functions ``b`` and ``h``.
    transition_jacobian, observation_jacobian : callable ``(theta, x) -> array``
        Their differentials with respect to ``x``.
    sigma_eta, sigma_eps : callable ``theta -> array``
        Noise scale factors.
    affine : callable ``theta -> (u, A, d, C)``, optional
        Exact affine form; present iff the model is linear in ``x``.
    derivatives : callable ``(theta, x_prev, x_pred) -> DerivativeBundle``, optional
        Analytic theta-derivatives of the linearized system, holding the
        linearization points fixed.
    nominal : ParameterVector
        Parameter value the model was constructed with.
    """

    n_x: int
    n_y: int
    transition: Callable
    observation: Callable
    transition_jacobian: Callable
    observation_jacobian: Callable
    sigma_eta: ThetaFn
    sigma_eps: ThetaFn
    nominal: ParameterVector
    affine: Optional[Callable] = None
    derivatives: Optional[Callable] = None
    name: str = "model"
    params: dict = field(default_factory=dict, compare=False)

    @property
    def n_theta(self) -> int:
        return len(self.nominal)

    @property
    def is_linear_in_x(self) -> bool:
        return self.affine is not None

    def system(self, theta=None, x_prev=None, x_pred=None) -> SystemMatrices:
        """Linearized system at ``theta`` (defaults to :attr:`nominal`)."""
        theta = self.nominal if theta is None else _as_theta(theta)
        if x_prev is None:
            x_prev = np.zeros(self.n_x)
        if x_pred is None:
            x_pred = np.zeros(self.n_x)
        return linearize_ekf(self, theta, x_prev, x_pred)


def _as_theta(theta) -> ParameterVector:
    return theta if isinstance(theta, ParameterVector) else ParameterVector(theta)


def linear_model(u: ThetaFn, A: ThetaFn, d: ThetaFn, C: ThetaFn,
                 sigma_eta: ThetaFn, sigma_eps: ThetaFn, theta,
                 derivatives: Optional[Callable[[np.ndarray], DerivativeBundle]] = None,
                 name="linear", params=None) -> StateSpaceModel:
    """Build a model that is affine in the state.

    ``derivatives``, when given, maps ``theta`` to the analytic
    :class:`DerivativeBundle`; for affine models it does not depend on the
    linearization points.
    """
    theta = _as_theta(theta)
    A0 = np.atleast_2d(np.asarray(A(theta.values), dtype=float))
    C0 = np.atleast_2d(np.asarray(C(theta.values), dtype=float))
    n_x, n_y = A0.shape[0], C0.shape[0]

    def affine(th):
        return (np.atleast_1d(np.asarray(u(th), dtype=float)),
                np.atleast_2d(np.asarray(A(th), dtype=float)),
                np.atleast_1d(np.asarray(d(th), dtype=float)),
                np.atleast_2d(np.asarray(C(th), dtype=float)))

    def transition(th, x):
        uu, AA, _, _ = affine(th)
        return uu + AA @ x

    def observation(th, x):
        _, _, dd, CC = affine(th)
        return dd + CC @ x

    deriv = None
    if derivatives is not None:
        def deriv(th, x_prev, x_pred):
            return derivatives(th)

    return StateSpaceModel(
        n_x=n_x, n_y=n_y,
        transition=transition, observation=observation,
        transition_jacobian=lambda th, x: affine(th)[1],
        observation_jacobian=lambda th, x: affine(th)[3],
        sigma_eta=lambda th: np.atleast_2d(np.asarray(sigma_eta(th), dtype=float)),
        sigma_eps=lambda th: np.atleast_2d(np.asarray(sigma_eps(th), dtype=float)),
        nominal=theta, affine=affine, derivatives=deriv, name=name,
        params=dict(params or {}),
    )


def nonlinear_model(transition, observation, transition_jacobian, observation_jacobian,
                    sigma_eta: ThetaFn, sigma_eps: ThetaFn, theta, n_x, n_y,
                    derivatives=None, name="nonlinear", params=None) -> StateSpaceModel:
    """Build a model linearized by the EKF convention at every step."""
    return StateSpaceModel(
        n_x=n_x, n_y=n_y,
        transition=transition, observation=observation,
        transition_jacobian=transition_jacobian,
        observation_jacobian=observation_jacobian,
        sigma_eta=sigma_eta, sigma_eps=sigma_eps,
        nominal=_as_theta(theta), derivatives=derivatives, name=name,
        params=dict(params or {}),
    )


def _check_variances(**variances):
    for name, v in variances.items():
        if not np.isfinite(v) or v < 0:
            raise DomainError(f"{name} must be a finite non-negative variance, got {v}")


def make_ar1(phi: float, q: float, rr: float) -> StateSpaceModel:
    """AR(1) signal observed in additive noise.

    ``x_t = phi x_{t-1} + sqrt(q) eta_t`` and ``y_t = x_t + sqrt(rr) eps_t``,
    parametrized by ``theta = (phi,)``.
    """
    if not np.isfinite(phi):
        raise DomainError(f"phi must be finite, got {phi}")
    _check_variances(q=q, rr=rr)
    s_eta, s_eps = np.sqrt(q), np.sqrt(rr)

    def derivatives(th):
        b = DerivativeBundle.zeros(1, 1, 1)
        dA = np.ones((1, 1, 1))
        return DerivativeBundle(b.du, dA, b.dd, b.dC, b.dsigma_eta, b.dsigma_eps)

    return linear_model(
        u=lambda th: np.zeros(1),
        A=lambda th: np.array([[th[0]]]),
        d=lambda th: np.zeros(1),
        C=lambda th: np.ones((1, 1)),
        sigma_eta=lambda th: np.array([[s_eta]]),
        sigma_eps=lambda th: np.array([[s_eps]]),
        theta=[phi], derivatives=derivatives, name="ar1",
        params={"phi0": float(phi), "q": float(q), "r": float(rr)},
    )


def make_ar1_drift(mu: float, phi: float, q: float, rr: float) -> StateSpaceModel:
    """AR(1) with an intercept, ``x_t = mu + phi x_{t-1} + noise``, theta = (mu,).

    Only the state offset depends on theta, and linearly.
    """
    _check_variances(q=q, rr=rr)
    s_eta, s_eps = np.sqrt(q), np.sqrt(rr)

    def derivatives(th):
        b = DerivativeBundle.zeros(1, 1, 1)
        return DerivativeBundle(np.ones((1, 1)), b.dA, b.dd, b.dC,
                                b.dsigma_eta, b.dsigma_eps)

    return linear_model(
        u=lambda th: np.array([th[0]]),
        A=lambda th: np.array([[phi]]),
        d=lambda th: np.zeros(1),
        C=lambda th: np.ones((1, 1)),
        sigma_eta=lambda th: np.array([[s_eta]]),
        sigma_eps=lambda th: np.array([[s_eps]]),
        theta=[mu], derivatives=derivatives, name="ar1_drift",
        params={"mu0": float(mu), "phi": float(phi), "q": float(q), "r": float(rr)},
    )


def make_ar1_scaled_obs(phi: float, c: float, q: float, rr: float) -> StateSpaceModel:
    """AR(1) observed through a gain: ``y_t = c x_t + noise``, theta = (phi, c)."""
    _check_variances(q=q, rr=rr)
    s_eta, s_eps = np.sqrt(q), np.sqrt(rr)

    def derivatives(th):
        b = DerivativeBundle.zeros(2, 1, 1)
        dA = np.array([[[1.0]], [[0.0]]])
        dC = np.array([[[0.0]], [[1.0]]])
        return DerivativeBundle(b.du, dA, b.dd, dC, b.dsigma_eta, b.dsigma_eps)

    return linear_model(
        u=lambda th: np.zeros(1),
        A=lambda th: np.array([[th[0]]]),
        d=lambda th: np.zeros(1),
        C=lambda th: np.array([[th[1]]]),
        sigma_eta=lambda th: np.array([[s_eta]]),
        sigma_eps=lambda th: np.array([[s_eps]]),
        theta=[phi, c], derivatives=derivatives, name="ar1_scaled_obs",
        params={"phi0": float(phi), "c0": float(c), "q": float(q), "r": float(rr)},
    )


def make_tanh_model(theta: float, q: float, rr: float) -> StateSpaceModel:
    """Scalar model ``x_t = theta tanh(x_{t-1}) + noise``, ``y_t = x_t + noise``."""
    _check_variances(q=q, rr=rr)
    s_eta, s_eps = np.sqrt(q), np.sqrt(rr)

    def derivatives(th, x_prev, x_pred):
        x = float(x_prev[0])
        sech2 = 1.0 - np.tanh(x) ** 2
        b = DerivativeBundle.zeros(1, 1, 1)
        # u_t = b(theta, x) - A_theta x with x held fixed
        du = np.array([[np.tanh(x) - sech2 * x]])
        dA = np.array([[[sech2]]])
        return DerivativeBundle(du, dA, b.dd, b.dC, b.dsigma_eta, b.dsigma_eps)

    return nonlinear_model(
        transition=lambda th, x: th[0] * np.tanh(x),
        observation=lambda th, x: np.array(x, dtype=float),
        transition_jacobian=lambda th, x: np.diag(th[0] * (1.0 - np.tanh(x) ** 2)),
        observation_jacobian=lambda th, x: np.eye(1),
        sigma_eta=lambda th: np.array([[s_eta]]),
        sigma_eps=lambda th: np.array([[s_eps]]),
        theta=[theta], n_x=1, n_y=1, derivatives=derivatives, name="tanh",
        params={"theta0": float(theta), "q": float(q), "r": float(rr)},
    )


def linearize_ekf(model: StateSpaceModel, theta, xhat_prev, xhat_pred) -> SystemMatrices:
    """Affine approximation of ``model`` at ``theta``.

    ``A`` and ``u`` are taken at the previous posterior mean, ``C`` and ``d``
    at the prior mean of the current step.  Affine models return their exact
    stored matrices regardless of the points.
    """
    theta = _as_theta(theta)
    th = theta.values
    xhat_prev = np.asarray(xhat_prev, dtype=float).reshape(model.n_x)
    xhat_pred = np.asarray(xhat_pred, dtype=float).reshape(model.n_x)
    s_eta = model.sigma_eta(th)
    s_eps = model.sigma_eps(th)
    if model.affine is not None:
        u, A, d, C = model.affine(th)
    else:
        A = np.atleast_2d(np.asarray(model.transition_jacobian(th, xhat_prev), dtype=float))
        C = np.atleast_2d(np.asarray(model.observation_jacobian(th, xhat_pred), dtype=float))
        u = np.asarray(model.transition(th, xhat_prev), dtype=float) - A @ xhat_prev
        d = np.asarray(model.observation(th, xhat_pred), dtype=float) - C @ xhat_pred
    for name, value, point in (("A", A, xhat_prev), ("u", u, xhat_prev),
                               ("C", C, xhat_pred), ("d", d, xhat_pred)):
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite {name} at theta={th.tolist()}, "
                               f"x={np.asarray(point).tolist()}")
    return SystemMatrices(u=u, A=A, d=d, C=C, sigma_eta=s_eta, sigma_eps=s_eps)


def default_fd_step(theta) -> np.ndarray:
    th = _as_theta(theta).values
    return 1e-6 * np.maximum(1.0, np.abs(th))


def finite_diff_theta_derivatives(model: StateSpaceModel, theta, linearization_point,
                                  step=None) -> DerivativeBundle:
    """Central-difference theta-derivatives of the linearized system.

    Parameters
    ----------
    model : StateSpaceModel
    theta : ParameterVector or array_like
    linearization_point : tuple of array_like
        ``(xhat_prev, xhat_pred)``, held fixed while theta is perturbed.
    step : float or array_like, optional
        Per-component step; defaults to ``1e-6 * max(1, |theta_k|)``.
    """
    theta = _as_theta(theta)
    th = theta.values
    x_prev, x_pred = linearization_point
    steps = default_fd_step(theta) if step is None else np.broadcast_to(
        np.asarray(step, dtype=float), th.shape)
    if np.any(steps <= 0):
        raise DomainError(f"finite-difference step must be positive, got {steps}")
    parts = {k: [] for k in ("u", "A", "d", "C", "sigma_eta", "sigma_eps")}
    for k in range(th.size):
        e = np.zeros_like(th)
        e[k] = steps[k]
        try:
            plus = linearize_ekf(model, th + e, x_prev, x_pred)
            minus = linearize_ekf(model, th - e, x_prev, x_pred)
        except Exception as exc:
            raise NumericError(f"evaluation failed perturbing theta component {k}: {exc}") from exc
        for name in parts:
            diff = (getattr(plus, name) - getattr(minus, name)) / (2.0 * steps[k])
            if not np.all(np.isfinite(diff)):
                raise NumericError(f"non-finite derivative of {name} for theta component {k}")
            parts[name].append(diff)
    return DerivativeBundle(
        du=np.array(parts["u"]), dA=np.array(parts["A"]), dd=np.array(parts["d"]),
        dC=np.array(parts["C"]), dsigma_eta=np.array(parts["sigma_eta"]),
        dsigma_eps=np.array(parts["sigma_eps"]),
    )


def analytic_theta_derivatives(model: StateSpaceModel, theta, linearization_point):
    if model.derivatives is None:
        raise DomainError(f"model '{model.name}' has no analytic theta-derivatives")
    x_prev, x_pred = (np.asarray(p, dtype=float).reshape(model.n_x)
                      for p in linearization_point)
    return model.derivatives(_as_theta(theta).values, x_prev, x_pred)


def theta_derivatives(model, theta, linearization_point, method="auto"):
    """Analytic derivatives when the model has them, finite differences otherwise."""
    if method == "analytic" or (method == "auto" and model.derivatives is not None):
        return analytic_theta_derivatives(model, theta, linearization_point)
    if method in ("auto", "finite_difference"):
        return finite_diff_theta_derivatives(model, theta, linearization_point)
    raise DomainError(f"unknown derivative method '{method}'")


def check_jacobians(model: StateSpaceModel, theta, points, step=1e-6):
    """Compare analytic x-Jacobians against central differences.

    Returns the largest relative discrepancy over ``points``.
    """
    th = _as_theta(theta).values
    worst = 0.0
    for x in points:
        x = np.asarray(x, dtype=float).reshape(model.n_x)
        for fn, jac in ((model.transition, model.transition_jacobian),
                        (model.observation, model.observation_jacobian)):
            J = np.atleast_2d(np.asarray(jac(th, x), dtype=float))
            cols = []
            for i in range(model.n_x):
                e = np.zeros(model.n_x)
                e[i] = step
                cols.append((np.asarray(fn(th, x + e)) - np.asarray(fn(th, x - e))) / (2 * step))
            J_fd = np.column_stack(cols)
            scale = np.maximum(np.abs(J), 1.0)
            worst = max(worst, float(np.max(np.abs(J - J_fd) / scale)))
    return worst
