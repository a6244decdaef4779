"""Quadratic tracking costs with analytic derivatives (``l_ux`` is identically zero)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class CostModel:
    """Interface consumed by the solver.

    ``running`` and ``running_derivs`` are indexed by step ``t``; derivatives are
    returned as ``(l_x, l_u, l_xx, l_uu)`` and ``(l_x, l_xx)`` for the final cost.
    """

    def running(self, x: np.ndarray, u: np.ndarray, t: int) -> float:
        raise NotImplementedError

    def final(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def running_derivs(self, x: np.ndarray, u: np.ndarray, t: int):
        raise NotImplementedError

    def final_derivs(self, x: np.ndarray):
        raise NotImplementedError

    def total(self, states: np.ndarray, controls: np.ndarray) -> float:
        """Deterministic trajectory cost: final cost plus summed running costs."""
        J = self.final(states[len(controls)])
        for t in range(len(controls)):
            J += self.running(states[t], controls[t], t)
        return float(J)


@dataclass
class QuadraticCost(CostModel):
    """``l = 0.5 (x-r_t)^T Q (x-r_t) + 0.5 (u-v_t)^T R (u-v_t)``; final ``0.5 (x-r_T)^T Qf (x-r_T)``.

    ``x_ref`` is either one goal state or a ``(T+1, n)`` reference; ``u_ref``
    likewise for controls.
    """

    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray
    x_ref: np.ndarray
    u_ref: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.Qf = np.asarray(self.Qf, dtype=float)
        self.x_ref = np.asarray(self.x_ref, dtype=float)
        m = self.R.shape[0]
        self.u_ref = np.zeros(m) if self.u_ref is None else np.asarray(self.u_ref, dtype=float)
        for name in ("Q", "R", "Qf"):
            M = getattr(self, name)
            if not np.allclose(M, M.T):
                raise ValueError(f"{name} must be symmetric")

    def _xr(self, t: int) -> np.ndarray:
        return self.x_ref if self.x_ref.ndim == 1 else self.x_ref[min(t, len(self.x_ref) - 1)]

    def _ur(self, t: int) -> np.ndarray:
        return self.u_ref if self.u_ref.ndim == 1 else self.u_ref[min(t, len(self.u_ref) - 1)]

    def running(self, x, u, t):
        dx = x - self._xr(t)
        du = u - self._ur(t)
        return 0.5 * dx @ self.Q @ dx + 0.5 * du @ self.R @ du

    def final(self, x):
        dx = x - (self.x_ref if self.x_ref.ndim == 1 else self.x_ref[-1])
        return 0.5 * dx @ self.Qf @ dx

    def running_derivs(self, x, u, t):
        dx = x - self._xr(t)
        du = u - self._ur(t)
        return self.Q @ dx, self.R @ du, self.Q, self.R

    def final_derivs(self, x):
        dx = x - (self.x_ref if self.x_ref.ndim == 1 else self.x_ref[-1])
        return self.Qf @ dx, self.Qf

    def window(self, t0: int, length: int, full_horizon: int) -> "QuadraticCost":
        """Cost for steps ``t0 .. t0+length`` of a ``full_horizon`` problem.

        Every window keeps the final weight at its own end; a running-weight
        terminal is too weak to stabilize short windows on unstable systems.
        """
        if t0 < 0 or length < 1 or t0 + length > full_horizon:
            raise ValueError("window must lie inside the full horizon")
        end = t0 + length
        x_ref = self.x_ref if self.x_ref.ndim == 1 else self.x_ref[t0 : end + 1]
        u_ref = self.u_ref if self.u_ref.ndim == 1 else self.u_ref[t0:end]
        return QuadraticCost(self.Q, self.R, self.Qf, x_ref, u_ref)


def cartpole_cost(weights: dict, dt: float) -> QuadraticCost:
    """Swing-up toward the upright state ``[0, 0, pi, 0]``; running weights are per second."""
    Q = np.diag(weights["state"]) * dt
    R = np.diag(np.atleast_1d(weights["control"])) * dt
    Qf = np.diag(weights["final"])
    goal = np.array([0.0, 0.0, np.pi, 0.0])
    return QuadraticCost(Q, R, Qf, goal)


def quadrotor_line_cost(
    start: np.ndarray, goal: np.ndarray, horizon: int, dt: float, weights: dict, u_ref=None
) -> QuadraticCost:
    """Track the straight segment from ``start`` to ``goal`` over ``horizon`` steps.

    Position weights are ``[lateral, lateral, height]`` per second; the
    reference velocity is the constant segment velocity.
    """
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    s = np.linspace(0.0, 1.0, horizon + 1)[:, None]
    ref = np.zeros((horizon + 1, 12))
    ref[:, 0:3] = start + s * (goal - start)
    ref[:-1, 3:6] = (goal - start) / (horizon * dt)
    pos = [weights["lateral"], weights["lateral"], weights["height"]]
    q = np.concatenate([pos, [weights["velocity"]] * 3, [weights["attitude"]] * 3, [weights["rate"]] * 3])
    Q = np.diag(q) * dt
    R = np.eye(4) * weights["control"] * dt
    qf = np.concatenate(
        [np.array(pos) * weights["final_scale"], [weights["final_velocity"]] * 3, [weights["attitude"]] * 3, [weights["rate"]] * 3]
    )
    return QuadraticCost(Q, R, np.diag(qf), ref, u_ref)
