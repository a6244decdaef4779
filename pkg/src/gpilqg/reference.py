"""Plain iLQR and iLQG backward passes.

These are deliberately separate, loop-based implementations in the usual
Q-function notation (``Q_x, Q_u, Q_xx, Q_ux, Q_uu``). They exist so the robust
backward pass can be checked against them when its extra terms vanish.
"""

from __future__ import annotations

import numpy as np

from gpilqg.costs import CostModel
from gpilqg.dynamics import StepDerivatives
from gpilqg.trajectory import Trajectory


def ilqr_backward(traj: Trajectory, cost: CostModel, A, B, reg: float = 0.0):
    """Deterministic iLQR. Returns ``(k, K, S)`` with ``S`` of shape ``(T+1, n, n)``."""
    X, U = traj.states, traj.controls
    T, m = U.shape
    n = X.shape[1]
    k = np.zeros((T, m))
    K = np.zeros((T, m, n))
    S = np.zeros((T + 1, n, n))
    V_x, V_xx = cost.final_derivs(X[T])
    S[T] = V_xx
    for t in reversed(range(T)):
        l_x, l_u, l_xx, l_uu = cost.running_derivs(X[t], U[t], t)
        Q_x = l_x + A[t].T @ V_x
        Q_u = l_u + B[t].T @ V_x
        Q_xx = l_xx + A[t].T @ V_xx @ A[t]
        Q_ux = B[t].T @ V_xx @ A[t]
        Q_uu = l_uu + B[t].T @ V_xx @ B[t] + reg * np.eye(m)
        Q_uu_inv = np.linalg.inv(Q_uu)
        k[t] = -Q_uu_inv @ Q_u
        K[t] = -Q_uu_inv @ Q_ux
        V_x = Q_x - Q_ux.T @ Q_uu_inv @ Q_u
        V_xx = Q_xx - Q_ux.T @ Q_uu_inv @ Q_ux
        V_xx = 0.5 * (V_xx + V_xx.T)
        S[t] = V_xx
    return k, K, S


def ilqg_backward(traj: Trajectory, cost: CostModel, derivs: StepDerivatives, reg: float = 0.0):
    """iLQG with control- and state-dependent noise ``F``, expanded column by column."""
    X, U, dt = traj.states, traj.controls, traj.dt
    T, m = U.shape
    n = X.shape[1]
    k = np.zeros((T, m))
    K = np.zeros((T, m, n))
    S = np.zeros((T + 1, n, n))
    V_x, V_xx = cost.final_derivs(X[T])
    S[T] = V_xx
    for t in reversed(range(T)):
        A, B = derivs.A[t], derivs.B[t]
        l_x, l_u, l_xx, l_uu = cost.running_derivs(X[t], U[t], t)
        Q_x = l_x + A.T @ V_x
        Q_u = l_u + B.T @ V_x
        Q_xx = l_xx + A.T @ V_xx @ A
        Q_ux = B.T @ V_xx @ A
        Q_uu = l_uu + B.T @ V_xx @ B
        F = derivs.F[t]
        for i in range(F.shape[1]):
            c = F[:, i]
            Cx = derivs.F_x[t][:, i, :]
            Cu = derivs.F_u[t][:, i, :]
            Q_x = Q_x + dt * Cx.T @ V_xx @ c
            Q_u = Q_u + dt * Cu.T @ V_xx @ c
            Q_xx = Q_xx + dt * Cx.T @ V_xx @ Cx
            Q_ux = Q_ux + dt * Cu.T @ V_xx @ Cx
            Q_uu = Q_uu + dt * Cu.T @ V_xx @ Cu
        Q_uu = Q_uu + reg * np.eye(m)
        Q_uu_inv = np.linalg.inv(Q_uu)
        k[t] = -Q_uu_inv @ Q_u
        K[t] = -Q_uu_inv @ Q_ux
        V_x = Q_x - Q_ux.T @ Q_uu_inv @ Q_u
        V_xx = Q_xx - Q_ux.T @ Q_uu_inv @ Q_ux
        V_xx = 0.5 * (V_xx + V_xx.T)
        S[t] = V_xx
    return k, K, S
