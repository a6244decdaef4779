"""Robust iterative LQG.

The backward pass expands the value function to second order around a nominal
trajectory with first-order dynamics. Besides the usual iLQR terms it carries
trace terms for two noise channels: process noise ``F`` and model-correction
uncertainty ``G``, both entering the step as ``M(x, u) xi sqrt(dt)``. With
``G = 0`` it reduces to iLQG and with ``F = G = 0`` to iLQR.

Tensor arguments follow ``M_x[a, i, b] = d M[a, i] / d x_b``: the slice
``M_x[:, i, :]`` is the Jacobian of column ``i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import linalg

from gpilqg.costs import CostModel
from gpilqg.dynamics import (
    CorrectedDynamics,
    DivergenceError,
    DynamicsModel,
    StepDerivatives,
    _check_finite,
    step,
)
from gpilqg.trajectory import AffinePolicy, Trajectory

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """The problem could not be solved (e.g. H indefinite at maximal regularization)."""


class NotPositiveDefinite(linalg.LinAlgError):
    pass


def tensor_vec(T: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Contract the derivative axis: column ``i`` of the result is ``T[:, i, :] @ v``."""
    T = np.asarray(T, dtype=float)
    v = np.asarray(v, dtype=float)
    if T.ndim != 3 or v.ndim != 1 or T.shape[2] != v.shape[0]:
        raise ValueError(f"cannot contract tensor of shape {T.shape} with vector of shape {v.shape}")
    # accumulate in index order so results do not depend on BLAS summation order
    out = np.zeros(T.shape[:2])
    for b in range(T.shape[2]):
        out += T[:, :, b] * v[b]
    return out


@dataclass
class QTerms:
    q: float
    q_vec: np.ndarray
    Q: np.ndarray
    g_vec: np.ndarray
    G_cross: np.ndarray  # (m, n)
    H: np.ndarray


@dataclass
class NoiseTerms:
    """Column-summed contributions of one noise channel ``M`` to the Q-terms."""

    const: float
    x: np.ndarray
    xx: np.ndarray
    u: np.ndarray
    xu: np.ndarray
    uu: np.ndarray


def noise_terms(M, M_x, M_u, S, dt) -> NoiseTerms:
    SM = S @ M
    SMx = np.einsum("ac,cib->aib", S, M_x)
    SMu = np.einsum("ac,cib->aib", S, M_u)
    return NoiseTerms(
        const=0.5 * dt * float(np.sum(M * SM)),
        x=dt * np.einsum("aib,ai->b", M_x, SM),
        xx=dt * np.einsum("aib,aic->bc", M_x, SMx),
        u=dt * np.einsum("aib,ai->b", M_u, SM),
        xu=dt * np.einsum("aib,aic->bc", M_x, SMu),
        uu=dt * np.einsum("aib,aic->bc", M_u, SMu),
    )


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def q_terms(
    l: float,
    l_x: np.ndarray,
    l_u: np.ndarray,
    l_xx: np.ndarray,
    l_uu: np.ndarray,
    A: np.ndarray,
    B: np.ndarray,
    s_next: float,
    s_vec_next: np.ndarray,
    S_next: np.ndarray,
    dt: float,
    channels: Sequence[tuple] = (),
) -> QTerms:
    """Local quadratic model of the cost-to-go.

    ``channels`` holds ``(M, M_x, M_u)`` triples, one per noise source.
    """
    SA = S_next @ A
    SB = S_next @ B
    q = l + s_next
    q_vec = A.T @ s_vec_next + l_x
    Q = A.T @ SA + l_xx
    g_vec = B.T @ s_vec_next + l_u
    cross = A.T @ SB  # (n, m)
    H = B.T @ SB + l_uu
    for M, M_x, M_u in channels:
        nt = noise_terms(M, M_x, M_u, S_next, dt)
        q += nt.const
        q_vec = q_vec + nt.x
        Q = Q + nt.xx
        g_vec = g_vec + nt.u
        cross = cross + nt.xu
        H = H + nt.uu
    return QTerms(float(q), q_vec, _sym(Q), g_vec, cross.T, _sym(H))


@dataclass
class BackwardResult:
    k: np.ndarray  # (T, m)
    K: np.ndarray  # (T, m, n)
    s: np.ndarray  # (T+1,)
    s_vec: np.ndarray  # (T+1, n)
    S: np.ndarray  # (T+1, n, n)
    d1: float  # sum k^T g
    d2: float  # sum k^T H k

    def expected_change(self, alpha: float) -> float:
        return alpha * self.d1 + 0.5 * alpha**2 * self.d2


def _channels(derivs: StepDerivatives, t: int) -> list:
    ch = []
    for M, M_x, M_u in ((derivs.F, derivs.F_x, derivs.F_u), (derivs.G, derivs.G_x, derivs.G_u)):
        # an all-zero channel contributes exactly zero
        if M is not None and (M[t].any() or M_x[t].any() or M_u[t].any()):
            ch.append((M[t], M_x[t], M_u[t]))
    return ch


def backward_pass(traj: Trajectory, cost: CostModel, derivs: StepDerivatives, reg: float = 0.0) -> BackwardResult:
    """Value recursion from ``S_T = l_xx(T)`` back to ``t = 0``.

    Raises ``NotPositiveDefinite`` if ``H + reg I`` is not positive definite at
    some step.
    """
    X, U, dt = traj.states, traj.controls, traj.dt
    T, m = U.shape
    n = X.shape[1]
    if derivs.horizon != T:
        raise ValueError("derivative horizon does not match trajectory")
    k = np.zeros((T, m))
    K = np.zeros((T, m, n))
    s = np.zeros(T + 1)
    s_vec = np.zeros((T + 1, n))
    S = np.zeros((T + 1, n, n))
    lT_x, lT_xx = cost.final_derivs(X[T])
    s[T] = cost.final(X[T])
    s_vec[T] = lT_x
    S[T] = _sym(lT_xx)
    d1 = d2 = 0.0
    eye = np.eye(m)
    for t in range(T - 1, -1, -1):
        l_x, l_u, l_xx, l_uu = cost.running_derivs(X[t], U[t], t)
        qt = q_terms(
            cost.running(X[t], U[t], t), l_x, l_u, l_xx, l_uu,
            derivs.A[t], derivs.B[t], s[t + 1], s_vec[t + 1], S[t + 1], dt, _channels(derivs, t),
        )
        H_reg = qt.H + reg * eye
        try:
            np.linalg.cholesky(H_reg)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(f"H not positive definite at step {t} (reg={reg:g})") from exc
        sol = -np.linalg.solve(H_reg, np.column_stack([qt.g_vec, qt.G_cross]))
        k[t] = sol[:, 0]
        K[t] = sol[:, 1:]
        S[t] = _sym(qt.Q + qt.G_cross.T @ K[t])
        s_vec[t] = qt.q_vec + qt.G_cross.T @ k[t]
        s[t] = qt.q + 0.5 * qt.g_vec @ k[t]
        d1 += k[t] @ qt.g_vec
        d2 += k[t] @ qt.H @ k[t]
    return BackwardResult(k, K, s, s_vec, S, float(d1), float(d2))


@dataclass
class ForwardResult:
    trajectory: Trajectory
    cost: float
    alpha: float


def simulate_policy(policy: AffinePolicy, dynamics: CorrectedDynamics, alpha: float = 1.0) -> Trajectory:
    """Deterministic closed-loop simulation of ``policy`` on the planner drift."""
    dt = policy.dt
    X = np.empty_like(policy.nominal_states)
    U = np.empty_like(policy.nominal_controls)
    X[0] = policy.nominal_states[0]
    for t in range(policy.horizon):
        U[t] = policy.control(t, X[t], alpha)
        X[t + 1] = _check_finite(dynamics.next_state(X[t], U[t], dt))
    return Trajectory(X, U, dt)


def forward_pass(
    policy: AffinePolicy,
    dynamics: CorrectedDynamics,
    cost: CostModel,
    alphas: Sequence[float],
    current_cost: Optional[float] = None,
) -> ForwardResult:
    """Backtracking line search: accept the first ``alpha`` that lowers the total cost."""
    nominal = policy.nominal()
    if current_cost is None:
        current_cost = cost.total(nominal.states, nominal.controls)
    for alpha in alphas:
        try:
            traj = simulate_policy(policy, dynamics, alpha)
        except DivergenceError:
            continue
        J = cost.total(traj.states, traj.controls)
        if np.isfinite(J) and J < current_cost:
            return ForwardResult(traj, J, float(alpha))
    return ForwardResult(nominal, current_cost, 0.0)


@dataclass
class SolverOptions:
    max_iter: int = 100
    tol: float = 1e-6
    reg_init: float = 1e-6
    reg_min: float = 1e-9
    reg_max: float = 1e10
    reg_increase: float = 10.0
    reg_decrease: float = 0.5
    alphas: tuple = tuple(2.0**-i for i in range(11))
    use_noise: bool = True
    use_uncertainty: bool = True


@dataclass
class SolveResult:
    policy: AffinePolicy
    cost_history: list
    iterations: int
    converged: bool
    reg: float
    diagnostics: list = field(default_factory=list)

    @property
    def cost(self) -> float:
        return self.cost_history[-1]


def _select(derivs: StepDerivatives, opts: SolverOptions) -> StepDerivatives:
    if not opts.use_noise:
        derivs = StepDerivatives(derivs.A, derivs.B, None, None, None, derivs.G, derivs.G_x, derivs.G_u)
    if not opts.use_uncertainty:
        derivs = StepDerivatives(derivs.A, derivs.B, derivs.F, derivs.F_x, derivs.F_u)
    return derivs


def solve(
    dynamics: CorrectedDynamics,
    cost: CostModel,
    x0: np.ndarray,
    init: Union[np.ndarray, AffinePolicy],
    dt: float,
    opts: Optional[SolverOptions] = None,
) -> SolveResult:
    """Alternate backward and forward passes until the relative cost decrease drops below ``tol``.

    ``init`` is either a ``(T, m)`` open-loop control sequence or a policy whose
    feedback law generates the first nominal trajectory from ``x0``. The
    returned policy's nominal is the final trajectory, its gains come from a
    backward pass at that trajectory, and its feedforward is zero.
    """
    opts = opts or SolverOptions()
    x0 = np.asarray(x0, dtype=float)
    if isinstance(init, AffinePolicy):
        try:
            traj = _shifted_start(init, dynamics, x0)
        except DivergenceError as exc:
            raise SolverError("initial policy diverges on the planning model") from exc
    else:
        U0 = np.asarray(init, dtype=float)
        try:
            traj = simulate_policy(
                AffinePolicy.open_loop(np.zeros((len(U0) + 1, len(x0))) + x0, U0, dt), dynamics
            )
        except DivergenceError as exc:
            raise SolverError("initial controls diverge on the planning model") from exc
    J = cost.total(traj.states, traj.controls)
    history = [J]
    diagnostics = []
    reg = opts.reg_init
    converged = False
    back = None
    it = 0

    def backward_at(tr, reg):
        derivs = _select(dynamics.derivatives(tr.states, tr.controls, dt), opts)
        while True:
            try:
                return backward_pass(tr, cost, derivs, reg), reg
            except NotPositiveDefinite:
                reg *= opts.reg_increase
                if reg > opts.reg_max:
                    return None, reg

    for it in range(1, opts.max_iter + 1):
        if back is None:
            back, reg = backward_at(traj, reg)
            if back is None:
                if it == 1:
                    raise SolverError("backward pass failed at maximal regularization")
                break
        if -back.d1 <= opts.tol * max(abs(J), 1e-12):
            converged = True
            break
        policy = AffinePolicy(traj.states, traj.controls, back.k, back.K, dt)
        fwd = forward_pass(policy, dynamics, cost, opts.alphas, J)
        diagnostics.append({"iteration": it, "cost": fwd.cost, "reg": reg, "alpha": fwd.alpha})
        logger.debug("iter=%d cost=%.6g reg=%.3g alpha=%.4g", it, fwd.cost, reg, fwd.alpha)
        if fwd.alpha > 0.0:
            rel = (J - fwd.cost) / max(abs(J), 1e-12)
            traj, J = fwd.trajectory, fwd.cost
            history.append(J)
            reg = max(reg * opts.reg_decrease, opts.reg_min)
            back = None
            if rel < opts.tol:
                converged = True
                break
        else:
            reg *= opts.reg_increase
            back = None
            if reg > opts.reg_max:
                break
    if back is None or reg > opts.reg_init:
        # feedback gains must not inherit the damping left over from failed line searches
        back, _ = backward_at(traj, opts.reg_min)
    K = back.K if back is not None else np.zeros((traj.horizon, traj.controls.shape[1], traj.states.shape[1]))
    policy = AffinePolicy(traj.states, traj.controls, np.zeros_like(traj.controls), K, dt)
    return SolveResult(policy, history, it, converged, reg, diagnostics)


def _shifted_start(policy: AffinePolicy, dynamics: CorrectedDynamics, x0: np.ndarray) -> Trajectory:
    """Closed-loop simulation of a warm-start policy launched from ``x0``."""
    dt = policy.dt
    X = np.empty_like(policy.nominal_states)
    U = np.empty_like(policy.nominal_controls)
    X[0] = x0
    for t in range(policy.horizon):
        U[t] = policy.control(t, X[t])
        X[t + 1] = _check_finite(dynamics.next_state(X[t], U[t], dt))
    return Trajectory(X, U, dt)


@dataclass
class MPCResult:
    trajectory: Trajectory
    plans: list


def mpc_solve(
    dynamics: CorrectedDynamics,
    cost,
    x0: np.ndarray,
    full_horizon: int,
    short_horizon: int,
    replan_interval: int,
    dt: float,
    init_controls: Optional[np.ndarray] = None,
    plant: Optional[DynamicsModel] = None,
    seed=None,
    opts: Optional[SolverOptions] = None,
) -> MPCResult:
    """Receding-horizon Robust-iLQG.

    Each plan covers ``[t, min(t + short_horizon, full_horizon))`` and its first
    ``replan_interval`` steps are executed on ``plant`` (noisy, seeded) or, if
    ``plant`` is None, on the deterministic planner model. ``cost`` must
    provide ``window(t0, length, full_horizon)``.
    """
    if short_horizon > full_horizon or short_horizon < 1:
        raise ValueError("need 1 <= short_horizon <= full_horizon")
    if not 1 <= replan_interval <= short_horizon:
        raise ValueError("need 1 <= replan_interval <= short_horizon")
    m = dynamics.m
    x0 = np.asarray(x0, dtype=float)
    guess = np.zeros((full_horizon, m)) if init_controls is None else np.asarray(init_controls, dtype=float)
    rng = np.random.default_rng(seed)
    states = [x0]
    controls = []
    plans = []
    t = 0
    while t < full_horizon:
        H = min(short_horizon, full_horizon - t)
        window = cost.window(t, H, full_horizon)
        res = solve(dynamics, window, states[-1], guess[t : t + H], dt, opts)
        plans.append((t, res.policy))
        n_exec = min(replan_interval, H)
        pol = res.policy
        for j in range(n_exec):
            x = states[-1]
            u = pol.control(j, x)
            if plant is None:
                nxt = _check_finite(dynamics.next_state(x, u, dt))
            else:
                nxt = step(plant, None, x, u, dt, rng.standard_normal(plant.p))
            controls.append(u)
            states.append(nxt)
        guess = guess.copy()
        guess[t : t + H] = pol.nominal_controls
        t += n_exec
    return MPCResult(Trajectory(np.array(states), np.array(controls), dt), plans)
