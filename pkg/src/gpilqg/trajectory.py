"""Trajectory and affine policy containers shared by the dynamics, solver and loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Trajectory:
    """States ``(T+1, n)`` and controls ``(T, m)`` sampled every ``dt`` seconds."""

    states: np.ndarray
    controls: np.ndarray
    dt: float

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.states.ndim != 2 or self.controls.ndim != 2:
            raise ValueError("states and controls must be 2-D arrays")
        if self.states.shape[0] != self.controls.shape[0] + 1:
            raise ValueError(
                f"expected {self.controls.shape[0] + 1} states for "
                f"{self.controls.shape[0]} controls, got {self.states.shape[0]}"
            )
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]


@dataclass
class AffinePolicy:
    """Time-varying affine feedback law around a nominal trajectory.

    At step ``t`` the applied control is
    ``u_t = u_nom[t] + alpha * k[t] + K[t] @ (x_t - x_nom[t])``.
    """

    nominal_states: np.ndarray
    nominal_controls: np.ndarray
    k: np.ndarray
    K: np.ndarray
    dt: float

    def __post_init__(self) -> None:
        self.nominal_states = np.asarray(self.nominal_states, dtype=float)
        self.nominal_controls = np.asarray(self.nominal_controls, dtype=float)
        self.k = np.asarray(self.k, dtype=float)
        self.K = np.asarray(self.K, dtype=float)
        T, m = self.nominal_controls.shape
        n = self.nominal_states.shape[1]
        if self.nominal_states.shape != (T + 1, n):
            raise ValueError("nominal_states must have horizon + 1 rows")
        if self.k.shape != (T, m):
            raise ValueError(f"k must have shape {(T, m)}, got {self.k.shape}")
        if self.K.shape != (T, m, n):
            raise ValueError(f"K must have shape {(T, m, n)}, got {self.K.shape}")

    @classmethod
    def open_loop(cls, states: np.ndarray, controls: np.ndarray, dt: float) -> "AffinePolicy":
        T, m = np.shape(controls)
        n = np.shape(states)[1]
        return cls(states, controls, np.zeros((T, m)), np.zeros((T, m, n)), dt)

    @property
    def horizon(self) -> int:
        return self.nominal_controls.shape[0]

    @property
    def n(self) -> int:
        return self.nominal_states.shape[1]

    @property
    def m(self) -> int:
        return self.nominal_controls.shape[1]

    def control(self, t: int, x: np.ndarray, alpha: float = 1.0) -> np.ndarray:
        dx = x - self.nominal_states[t]
        return self.nominal_controls[t] + alpha * self.k[t] + self.K[t] @ dx

    def nominal(self) -> Trajectory:
        return Trajectory(self.nominal_states, self.nominal_controls, self.dt)
