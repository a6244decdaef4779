"""Continuous stochastic dynamics, Euler-Maruyama stepping, linearization and rollouts.

Models are written as ``dx = f(x, u) dt + F(x, u) dw``. Drift and diffusion
accept batched inputs (leading axes broadcast) so finite-difference Jacobians
along a whole trajectory cost a single vectorized call.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Optional, Protocol

import numpy as np
import yaml

from gpilqg.finite_diff import jacobian
from gpilqg.trajectory import AffinePolicy, Trajectory

logger = logging.getLogger(__name__)

GRAVITY = 9.8
DIVERGENCE_BOUND = 1e8
SERIES_THRESHOLD = 1e-3


class DivergenceError(RuntimeError):
    """Raised when a state becomes nonfinite (or absurdly large)."""


@dataclass(frozen=True)
class CartPoleParams:
    cart_mass: float = 1.0  # [kg]
    pole_mass: float = 1.0  # [kg]
    pole_length: float = 1.0  # [m]
    gravity: float = GRAVITY  # [m/s^2]

    def __post_init__(self) -> None:
        for name in ("cart_mass", "pole_mass", "pole_length", "gravity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class QuadrotorParams:
    k_v: float = 0.15  # [N s/m] rotor drag
    k_m: float = 0.025  # [m] torque/force ratio
    mass: float = 0.5  # [kg]
    inertia: tuple = ((0.05, 0.0, 0.0), (0.0, 0.05, 0.0), (0.0, 0.0, 0.05))  # [kg m^2]
    rho: float = 0.17  # [m] rotor arm
    gravity: float = GRAVITY

    def __post_init__(self) -> None:
        J = np.asarray(self.inertia, dtype=float)
        object.__setattr__(self, "inertia", tuple(tuple(float(v) for v in row) for row in J))
        if not self.mass > 0:
            raise ValueError("mass must be strictly positive")
        if not self.rho > 0:
            raise ValueError("rho must be strictly positive")
        if J.shape != (3, 3) or not np.allclose(J, J.T):
            raise ValueError("inertia must be a symmetric 3x3 matrix")
        if np.min(np.linalg.eigvalsh(J)) <= 0:
            raise ValueError("inertia must be positive definite")

    @property
    def J(self) -> np.ndarray:
        return np.asarray(self.inertia)


def skew(r: np.ndarray) -> np.ndarray:
    """Cross-product matrix: ``skew(r) @ v == np.cross(r, v)``. Batched over leading axes."""
    r = np.asarray(r, dtype=float)
    if r.shape[-1] != 3:
        raise ValueError("skew expects 3-vectors")
    out = np.zeros(r.shape[:-1] + (3, 3))
    out[..., 0, 1] = -r[..., 2]
    out[..., 0, 2] = r[..., 1]
    out[..., 1, 0] = r[..., 2]
    out[..., 1, 2] = -r[..., 0]
    out[..., 2, 0] = -r[..., 1]
    out[..., 2, 1] = r[..., 0]
    return out


def cartpole_drift(x: np.ndarray, u: np.ndarray, params: CartPoleParams) -> np.ndarray:
    """Frictionless cart-pole with a point-mass pole; angle 0 hangs straight down."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    M, mp, l, g = params.cart_mass, params.pole_mass, params.pole_length, params.gravity
    xdot, th, thdot = x[..., 1], x[..., 2], x[..., 3]
    force = u[..., 0]
    s, c = np.sin(th), np.cos(th)
    den = M + mp * s**2
    xacc = (force + mp * s * (l * thdot**2 + g * c)) / den
    thacc = (-force * c - mp * l * thdot**2 * s * c - (M + mp) * g * s) / (l * den)
    return np.stack([xdot, xacc, thdot, thacc], axis=-1)


def cartpole_control_matrix(x: np.ndarray, params: CartPoleParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    M, mp, l = params.cart_mass, params.pole_mass, params.pole_length
    th = x[..., 2]
    den = M + mp * np.sin(th) ** 2
    out = np.zeros(x.shape[:-1] + (4, 1))
    out[..., 1, 0] = 1.0 / den
    out[..., 3, 0] = -np.cos(th) / (l * den)
    return out


def _rotation_coefficients(theta: np.ndarray):
    """``sin(t)/t``, ``(1-cos t)/t^2`` and ``(1 - (t/2)cot(t/2))/t^2`` with small-angle series."""
    small = theta < SERIES_THRESHOLD
    t = np.where(small, 1.0, theta)
    t2 = theta**2
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(t)) / t**2)
    c = np.where(small, 1.0 / 12.0 + t2 / 720.0, (1.0 - 0.5 * t / np.tan(0.5 * t)) / t**2)
    return a, b, c


def rotate_e3(r: np.ndarray) -> np.ndarray:
    """Third column of ``exp(skew(r))`` via Rodrigues' formula."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1)
    a, b, _ = _rotation_coefficients(theta)
    e3 = np.zeros_like(r)
    e3[..., 2] = 1.0
    rxe = np.cross(r, e3)
    return e3 + a[..., None] * rxe + b[..., None] * np.cross(r, rxe)


def axis_angle_rate(r: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Axis-angle derivative for body angular velocity ``w``."""
    theta = np.linalg.norm(r, axis=-1)
    _, _, c = _rotation_coefficients(theta)
    rxw = np.cross(r, w)
    return w + 0.5 * rxw + c[..., None] * np.cross(r, rxw)


def _quadrotor_mixer(params: QuadrotorParams) -> np.ndarray:
    rho, km = params.rho, params.k_m
    return np.array(
        [
            [0.0, rho, 0.0, -rho],
            [-rho, 0.0, rho, 0.0],
            [km, -km, km, -km],
        ]
    )


def quadrotor_drift(x: np.ndarray, u: np.ndarray, params: QuadrotorParams) -> np.ndarray:
    """Rigid-body quadrotor: position, velocity, axis-angle attitude, body rates."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    v, r, w = x[..., 3:6], x[..., 6:9], x[..., 9:12]
    J = params.J
    thrust = np.sum(u, axis=-1)
    vdot = (thrust[..., None] * rotate_e3(r) - params.k_v * v) / params.mass
    vdot[..., 2] -= params.gravity
    torque = u @ _quadrotor_mixer(params).T
    Jw = w @ J.T
    wdot = np.linalg.solve(J, (torque - np.cross(w, Jw))[..., None])[..., 0]
    return np.concatenate([v, vdot, axis_angle_rate(r, w), wdot], axis=-1)


def quadrotor_control_matrix(x: np.ndarray, params: QuadrotorParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1] + (12, 4))
    out[..., 3:6, :] = rotate_e3(x[..., 6:9])[..., :, None] / params.mass
    out[..., 9:12, :] = np.linalg.solve(params.J, _quadrotor_mixer(params))
    return out


class DynamicsModel:
    """Base class: drift ``f(x, u)`` plus control-proportional diffusion.

    The diffusion is ``F(x, u) = noise_scale * B(x) @ diag(u)`` where ``B`` is
    the continuous-time control matrix, so each actuator channel carries noise
    proportional to its own magnitude (``p == m``).
    """

    n: int
    m: int

    def __init__(self, params, noise_scale: float = 0.1) -> None:
        self.params = params
        self.noise_scale = float(noise_scale)

    @property
    def p(self) -> int:
        return self.m

    def drift(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def control_matrix(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def diffusion(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return self.noise_scale * self.control_matrix(x) * u[..., None, :]

    def with_noise(self, noise_scale: float) -> "DynamicsModel":
        return type(self)(self.params, noise_scale)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.params!r}, noise_scale={self.noise_scale})"


class CartPole(DynamicsModel):
    n = 4
    m = 1

    def drift(self, x, u):
        return cartpole_drift(x, u, self.params)

    def control_matrix(self, x):
        return cartpole_control_matrix(x, self.params)


class Quadrotor(DynamicsModel):
    n = 12
    m = 4

    def drift(self, x, u):
        return quadrotor_drift(x, u, self.params)

    def control_matrix(self, x):
        return quadrotor_control_matrix(x, self.params)

    def hover_control(self) -> np.ndarray:
        return np.full(4, self.params.mass * self.params.gravity / 4.0)


_MODEL_TYPES = {
    "cartpole": (CartPole, CartPoleParams),
    "quadrotor": (Quadrotor, QuadrotorParams),
}


def load_model_presets() -> dict:
    text = resources.files("gpilqg.presets").joinpath("models.yaml").read_text()
    return yaml.safe_load(text)


def make_model(record, noise_scale: float = 0.1) -> DynamicsModel:
    """Build a model from a preset name (``cartpole-sim`` ...) or a ``{type, params}`` record."""
    if isinstance(record, str):
        presets = load_model_presets()
        if record not in presets:
            raise KeyError(f"unknown model preset {record!r}; known: {sorted(presets)}")
        record = presets[record]
    kind = record["type"]
    if kind not in _MODEL_TYPES:
        raise KeyError(f"unknown model type {kind!r}")
    cls, params_cls = _MODEL_TYPES[kind]
    return cls(params_cls(**record.get("params", {})), noise_scale)


@dataclass
class CorrectedDrift:
    """Learned drift correction at one query: rate mean, covariance and its root."""

    mean: np.ndarray
    cov: np.ndarray
    root: np.ndarray


class Correction(Protocol):
    """What the dynamics layer needs from a learned residual model."""

    def predict(self, x: np.ndarray, u: np.ndarray) -> CorrectedDrift: ...

    def mean_rate(self, x: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    def rate_derivatives(self, x: np.ndarray, u: np.ndarray) -> dict: ...


@dataclass
class StepDerivatives:
    """Per-step linearization along a trajectory (leading axis is time).

    Tensors follow ``T[..., a, i, b] = d M[a, i] / d z_b``.
    """

    A: np.ndarray
    B: np.ndarray
    F: np.ndarray
    F_x: np.ndarray
    F_u: np.ndarray
    G: Optional[np.ndarray] = None
    G_x: Optional[np.ndarray] = None
    G_u: Optional[np.ndarray] = None

    @property
    def horizon(self) -> int:
        return self.A.shape[0]

    def without_uncertainty(self) -> "StepDerivatives":
        return StepDerivatives(self.A, self.B, self.F, self.F_x, self.F_u)

    def without_noise(self) -> "StepDerivatives":
        zero = np.zeros_like
        return StepDerivatives(self.A, self.B, zero(self.F), zero(self.F_x), zero(self.F_u))


def linearize(drift: Callable, x: np.ndarray, u: np.ndarray, dt: float):
    """``A = I + f_x dt`` and ``B = f_u dt`` by central differences.

    ``x`` and ``u`` may carry a leading batch axis; ``drift`` must be batched.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    single = x.ndim == 1
    X, U = np.atleast_2d(x), np.atleast_2d(u)
    n = X.shape[1]
    jac = jacobian(lambda z: drift(z[:, :n], z[:, n:]), np.concatenate([X, U], axis=1))
    A = np.eye(n) + jac[..., :n] * dt
    B = jac[..., n:] * dt
    if single:
        return A[0], B[0]
    return A, B


class CorrectedDynamics:
    """Planner-side model ``f_sim + g_mean`` with diffusion ``F`` and uncertainty root ``G``.

    ``use_model_drift=False`` drops the simulator drift, leaving a purely
    data-driven model (the correction then carries the full increment).
    """

    def __init__(
        self,
        model: DynamicsModel,
        correction: Optional[Correction] = None,
        use_model_drift: bool = True,
    ) -> None:
        self.model = model
        self.correction = correction
        self.use_model_drift = use_model_drift

    n = property(lambda self: self.model.n)
    m = property(lambda self: self.model.m)
    p = property(lambda self: self.model.p)

    def drift(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = self.model.drift(x, u) if self.use_model_drift else np.zeros(x.shape)
        if self.correction is not None:
            out = out + self.correction.mean_rate(x, u)
        return out

    def diffusion(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.model.diffusion(x, u)

    def uncertainty(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        if self.correction is None:
            return np.zeros((self.n, self.n))
        return self.correction.predict(x, u).root

    def next_state(self, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
        """Deterministic Euler step of the corrected drift."""
        return x + self.drift(x, u) * dt

    def derivatives(self, states: np.ndarray, controls: np.ndarray, dt: float) -> StepDerivatives:
        """Linearize along a trajectory; ``states`` may include the terminal row."""
        n = self.n
        X = np.asarray(states, dtype=float)[: len(controls)]
        U = np.asarray(controls, dtype=float)
        T = len(U)
        Z = np.concatenate([X, U], axis=1)
        if self.use_model_drift:
            jac = jacobian(lambda z: self.model.drift(z[:, :n], z[:, n:]), Z)
        else:
            jac = np.zeros((T, n, Z.shape[1]))
        F = self.model.diffusion(X, U)
        if self.model.noise_scale == 0.0:
            F_jac = np.zeros(F.shape + (Z.shape[1],))
        else:
            F_jac = jacobian(lambda z: self.model.diffusion(z[:, :n], z[:, n:]), Z)
        G = G_x = G_u = None
        if self.correction is not None:
            d = self.correction.rate_derivatives(X, U)
            jac = jac + np.concatenate([d["mean_x"], d["mean_u"]], axis=-1)
            idx = np.arange(n)
            G = np.zeros((T, n, n))
            G[:, idx, idx] = d["root"]
            G_x = np.zeros((T, n, n, n))
            G_x[:, idx, idx, :] = d["root_x"]
            G_u = np.zeros((T, n, n, self.m))
            G_u[:, idx, idx, :] = d["root_u"]
        A = np.eye(n) + jac[..., :n] * dt
        B = jac[..., n:] * dt
        return StepDerivatives(A, B, F, F_jac[..., :n], F_jac[..., n:], G, G_x, G_u)


def _check_finite(x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_BOUND:
        raise DivergenceError("state diverged")
    return x


def step(
    model: DynamicsModel,
    correction: Optional[Correction],
    x: np.ndarray,
    u: np.ndarray,
    dt: float,
    xi_F: Optional[np.ndarray] = None,
    xi_G: Optional[np.ndarray] = None,
) -> np.ndarray:
    """One Euler-Maruyama step with optional learned correction and its uncertainty."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    rate = model.drift(x, u)
    sq = np.sqrt(dt)
    out = x + rate * dt
    if xi_F is not None:
        out = out + model.diffusion(x, u) @ xi_F * sq
    if correction is not None:
        pred = correction.predict(x, u)
        out = out + pred.mean * dt
        if xi_G is not None:
            out = out + pred.root @ xi_G * sq
    return _check_finite(out)


@dataclass
class RolloutResult:
    trajectory: Trajectory
    inputs: np.ndarray  # (T, n + m) observed [x, u]
    targets: np.ndarray  # (T, n) observed dx - f_mean(x, u) dt
    diverged: bool = False
    observed_states: np.ndarray = field(default=None, repr=False)


def rollout(
    model: DynamicsModel,
    policy: AffinePolicy,
    x0: np.ndarray,
    dt: float,
    seed,
    correction: Optional[Correction] = None,
    mean_drift: Optional[Callable] = None,
    obs_noise: float = 0.0,
    alpha: float = 1.0,
) -> RolloutResult:
    """Run ``policy`` closed loop on ``model`` with seeded process noise.

    Residual records are built from noisy observations of the visited states:
    input ``[y_t, u_t]`` and target ``y_{t+1} - y_t - mean_drift(y_t, u_t) dt``.
    ``mean_drift`` defaults to the model's own drift.
    """
    if policy.horizon < 1:
        raise ValueError("policy horizon must be at least 1")
    mean_drift = model.drift if mean_drift is None else mean_drift
    proc_rng, obs_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    n, m, p = model.n, model.m, model.p
    states = [np.asarray(x0, dtype=float).copy()]
    controls = []
    diverged = False
    for t in range(policy.horizon):
        xi_F = proc_rng.standard_normal(p)
        xi_G = proc_rng.standard_normal(n)
        u = policy.control(t, states[-1], alpha)
        try:
            if not np.all(np.isfinite(u)):
                raise DivergenceError("control diverged")
            nxt = step(model, correction, states[-1], u, dt, xi_F, xi_G)
        except DivergenceError:
            diverged = True
            logger.debug("rollout diverged at step %d", t)
            break
        controls.append(u)
        states.append(nxt)
    X = np.array(states)
    U = np.array(controls).reshape(len(controls), m)
    Y = X + obs_noise * obs_rng.standard_normal(X.shape) if obs_noise > 0 else X
    if len(U):
        inputs = np.concatenate([Y[:-1], U], axis=1)
        targets = Y[1:] - Y[:-1] - mean_drift(Y[:-1], U) * dt
    else:
        inputs = np.zeros((0, n + m))
        targets = np.zeros((0, n))
    return RolloutResult(Trajectory(X, U, dt), inputs, targets, diverged, Y)
