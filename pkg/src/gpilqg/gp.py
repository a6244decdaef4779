"""Residual Gaussian Process with the simulator as its mean function.

Each output dimension gets an independent GP over ``z = [x, u]`` with the ARD
squared-exponential kernel ``sf2 * exp(-(a - b)^T diag(lam)^-1 (a - b))``.
The GP models the per-step residual ``dx - f_sim(x, u) dt``; its prior mean is
zero, so far from data every prediction falls back to the simulator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg, optimize

from gpilqg.dynamics import CorrectedDrift

logger = logging.getLogger(__name__)

_CHUNK = 256
_LOG2PI = np.log(2.0 * np.pi)


@dataclass
class ResidualDataset:
    """Rows of ``[x, u]`` inputs with per-step residual targets."""

    inputs: np.ndarray
    targets: np.ndarray
    dt: float

    def __post_init__(self) -> None:
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets must have the same number of rows")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("dataset contains nonfinite values")

    def __len__(self) -> int:
        return len(self.inputs)

    @classmethod
    def empty(cls, input_dim: int, output_dim: int, dt: float) -> "ResidualDataset":
        return cls(np.zeros((0, input_dim)), np.zeros((0, output_dim)), dt)

    def extend(self, inputs: np.ndarray, targets: np.ndarray) -> "ResidualDataset":
        return ResidualDataset(
            np.concatenate([self.inputs, np.asarray(inputs).reshape(-1, self.inputs.shape[1])]),
            np.concatenate([self.targets, np.asarray(targets).reshape(-1, self.targets.shape[1])]),
            self.dt,
        )

    def subset(self, idx) -> "ResidualDataset":
        return ResidualDataset(self.inputs[idx], self.targets[idx], self.dt)

    def split(self, holdout_fraction: float, seed) -> tuple["ResidualDataset", "ResidualDataset"]:
        """Uniform random split into (train, holdout)."""
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(self))
        n_hold = int(round(holdout_fraction * len(self)))
        if len(self) > 1:
            n_hold = min(max(n_hold, 1), len(self) - 1)
        else:
            n_hold = 0
        hold = np.sort(perm[:n_hold])
        train = np.sort(perm[n_hold:])
        return self.subset(train), self.subset(hold)


@dataclass
class KernelHyperparams:
    signal_variance: float
    length_scales: np.ndarray  # diagonal of Lambda (squared-distance scale)
    noise_variance: float

    def __post_init__(self) -> None:
        self.signal_variance = float(self.signal_variance)
        self.noise_variance = float(self.noise_variance)
        self.length_scales = np.asarray(self.length_scales, dtype=float).ravel()
        if self.signal_variance < 0:
            raise ValueError("signal_variance must be non-negative")
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be positive")
        if np.any(self.length_scales <= 0):
            raise ValueError("length_scales must be positive")

    def to_log(self) -> np.ndarray:
        return np.concatenate(
            [[np.log(self.signal_variance)], np.log(self.length_scales), [np.log(self.noise_variance)]]
        )

    @classmethod
    def from_log(cls, theta: np.ndarray) -> "KernelHyperparams":
        theta = np.asarray(theta, dtype=float)
        return cls(np.exp(theta[0]), np.exp(theta[1:-1]), np.exp(theta[-1]))

    def to_dict(self) -> dict:
        return {
            "signal_variance": self.signal_variance,
            "length_scales": [float(v) for v in self.length_scales],
            "noise_variance": self.noise_variance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelHyperparams":
        return cls(d["signal_variance"], d["length_scales"], d["noise_variance"])


def kernel(a: np.ndarray, b: np.ndarray, h: KernelHyperparams) -> np.ndarray:
    """ARD squared-exponential kernel; broadcasts over leading axes of ``a`` and ``b``."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if d.shape[-1] != h.length_scales.shape[0]:
        raise ValueError("input dimension does not match length_scales")
    return h.signal_variance * np.exp(-np.sum(d * d / h.length_scales, axis=-1))


def kernel_matrix(A: np.ndarray, B: np.ndarray, h: KernelHyperparams) -> np.ndarray:
    return kernel(A[:, None, :], B[None, :, :], h)


def _cholesky(K: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, adding diagonal jitter until it succeeds."""
    n = len(K)
    jitter = 0.0
    base = max(np.trace(K) / max(n, 1), 1e-300)
    for _ in range(12):
        try:
            return linalg.cholesky(K + jitter * np.eye(n), lower=True)
        except linalg.LinAlgError:
            jitter = 1e-10 * base if jitter == 0.0 else jitter * 10.0
    raise linalg.LinAlgError("kernel matrix is not positive definite even with jitter")


def log_marginal_likelihood(
    X: np.ndarray, y: np.ndarray, h: KernelHyperparams, sqdist: Optional[np.ndarray] = None
):
    """Log marginal likelihood of zero-mean GP targets ``y`` and its gradient in log-parameters.

    Returns ``(value, grad)`` with ``grad`` ordered as ``KernelHyperparams.to_log``.
    """
    N = len(X)
    if sqdist is None:
        sqdist = (X[:, None, :] - X[None, :, :]) ** 2
    Kf = h.signal_variance * np.exp(-(sqdist @ (1.0 / h.length_scales)))
    K = Kf + h.noise_variance * np.eye(N)
    L = linalg.cholesky(K, lower=True)
    alpha = linalg.cho_solve((L, True), y)
    value = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * N * _LOG2PI
    W = np.outer(alpha, alpha) - linalg.cho_solve((L, True), np.eye(N))
    WK = W * Kf
    grad = np.empty(len(h.length_scales) + 2)
    grad[0] = 0.5 * np.sum(WK)
    grad[1:-1] = 0.5 * np.einsum("ij,ijb->b", WK, sqdist) / h.length_scales
    grad[-1] = 0.5 * h.noise_variance * np.trace(W)
    return value, grad


def default_hyperparams(X: np.ndarray, y: np.ndarray) -> KernelHyperparams:
    var_y = max(float(np.var(y)) if len(y) > 1 else float(np.mean(y**2)), 1e-12)
    var_x = np.var(X, axis=0) if len(X) > 1 else np.ones(X.shape[1])
    var_x = np.where(var_x > 1e-10, var_x, 1.0)
    return KernelHyperparams(var_y, 2.0 * var_x, 0.01 * var_y)


def _bounds(X: np.ndarray, y: np.ndarray, min_noise: float = 0.0) -> list:
    var_y = max(float(np.var(y)), float(np.mean(y**2)), 1e-12)
    var_x = np.var(X, axis=0)
    var_x = np.where(var_x > 1e-10, var_x, 1.0)
    b = [(np.log(var_y * 1e-6), np.log(var_y * 1e2))]
    # length scales below ~10% of the input spread only ever fit noise
    b += [(np.log(v * 1e-2), np.log(v * 1e6)) for v in var_x]
    lo = np.log(max(var_y * 1e-8, 1e-16, min_noise))
    b += [(lo, max(np.log(var_y * 1e1), lo + 1.0))]
    return b


def optimize_hyperparams(
    X: np.ndarray,
    y: np.ndarray,
    init: Optional[KernelHyperparams] = None,
    restarts: int = 4,
    max_iter: int = 200,
    seed=0,
    min_noise: float = 0.0,
) -> KernelHyperparams:
    """Multi-start L-BFGS-B on the log marginal likelihood in log-parameter space.

    ``min_noise`` bounds the noise variance from below. Without it a kernel
    with tiny length scales is as likely as white noise, and the optimizer may
    pick the one that interpolates the noise.
    """
    start = init if init is not None else default_hyperparams(X, y)
    if np.max(np.abs(y), initial=0.0) < 1e-14:
        # nothing to explain; a vanishing signal keeps the posterior at the prior mean
        return KernelHyperparams(1e-14, start.length_scales, 1e-12)
    bounds = _bounds(X, y, min_noise)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    sqdist = (X[:, None, :] - X[None, :, :]) ** 2

    def objective(theta):
        try:
            v, g = log_marginal_likelihood(X, y, KernelHyperparams.from_log(theta), sqdist)
        except (linalg.LinAlgError, ValueError):
            return 1e25, np.zeros_like(theta)
        if not np.isfinite(v):
            return 1e25, np.zeros_like(theta)
        return -v, -g

    rng = np.random.default_rng(seed)
    theta0 = np.clip(start.to_log(), lo, hi)
    starts = [theta0]
    if init is not None:
        # a warm start alone can pin the fit to a stale optimum
        starts.append(np.clip(default_hyperparams(X, y).to_log(), lo, hi))
    while len(starts) < max(restarts, 1):
        base = starts[len(starts) % (2 if init is not None else 1)]
        starts.append(np.clip(base + rng.normal(0.0, 1.0, theta0.shape), lo, hi))
    best_theta, best_val = None, np.inf
    for th in starts:
        try:
            res = optimize.minimize(
                objective, th, jac=True, method="L-BFGS-B", bounds=bounds, options={"maxiter": max_iter}
            )
        except (ValueError, FloatingPointError) as exc:
            logger.warning("hyperparameter restart failed: %s", exc)
            continue
        if np.isfinite(res.fun) and res.fun < best_val:
            best_theta, best_val = res.x, res.fun
    if best_theta is None or best_val >= 1e25:
        logger.warning("hyperparameter optimization failed; keeping starting values")
        return start
    return KernelHyperparams.from_log(best_theta)


@dataclass
class ResidualGP:
    """Fitted per-dimension residual GPs sharing one retained input subset."""

    X: np.ndarray  # (N, d) retained inputs
    Y: np.ndarray  # (N, n) retained residual targets
    hypers: list
    dt: float
    mean_fn: Optional[Callable] = None  # simulator drift (rate); None means zero mean
    n_state: Optional[int] = None
    alpha: np.ndarray = field(init=False, repr=False)
    K_inv: np.ndarray = field(init=False, repr=False)
    L: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float).reshape(len(self.X), -1)
        if len(self.hypers) != self.Y.shape[1]:
            raise ValueError("need one hyperparameter set per output dimension")
        if self.n_state is None:
            self.n_state = self.Y.shape[1]
        N = len(self.X)
        n_out = self.Y.shape[1]
        self.L = np.empty((n_out, N, N))
        self.alpha = np.empty((n_out, N))
        self.K_inv = np.empty((n_out, N, N))
        eye = np.eye(N)
        for o, h in enumerate(self.hypers):
            K = kernel_matrix(self.X, self.X, h) + h.noise_variance * eye
            L = _cholesky(K)
            self.L[o] = L
            self.alpha[o] = linalg.cho_solve((L, True), self.Y[:, o])
            self.K_inv[o] = linalg.cho_solve((L, True), eye)
        self._sf2 = np.array([h.signal_variance for h in self.hypers])
        self._inv_lam = np.array([1.0 / h.length_scales for h in self.hypers])

    @property
    def n_out(self) -> int:
        return self.Y.shape[1]

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def _query(self, Z: np.ndarray, want_var: bool, want_grad: bool):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        Nq, d = Z.shape
        no = self.n_out
        mean = np.zeros((Nq, no))
        var = np.zeros((Nq, no)) if want_var else None
        mean_g = np.zeros((Nq, no, d)) if want_grad else None
        var_g = np.zeros((Nq, no, d)) if want_grad and want_var else None
        if len(self.X) == 0:
            if want_var:
                var[:] = self._sf2
            return mean, var, mean_g, var_g
        for s in range(0, Nq, _CHUNK):
            q = Z[s : s + _CHUNK]
            diff = q[:, None, :] - self.X[None, :, :]  # (C, N, d)
            sq = diff * diff
            for o in range(no):
                Kq = self._sf2[o] * np.exp(-(sq @ self._inv_lam[o]))  # (C, N)
                mean[s : s + len(q), o] = Kq @ self.alpha[o]
                if want_var:
                    v = Kq @ self.K_inv[o]
                    var[s : s + len(q), o] = self._sf2[o] - np.sum(v * Kq, axis=1)
                if want_grad:
                    mean_g[s : s + len(q), o] = (
                        -2.0 * np.einsum("cjb,cj->cb", diff, Kq * self.alpha[o]) * self._inv_lam[o]
                    )
                    if want_var:
                        var_g[s : s + len(q), o] = (
                            4.0 * np.einsum("cjb,cj->cb", diff, Kq * v) * self._inv_lam[o]
                        )
        if want_var:
            var = np.maximum(var, 0.0)
        return mean, var, mean_g, var_g

    def residual_mean(self, Z: np.ndarray) -> np.ndarray:
        """Posterior mean of the per-step residual at inputs ``Z`` (not divided by dt)."""
        return self._query(Z, False, False)[0]

    def residual_mean_var(self, Z: np.ndarray):
        m, v, _, _ = self._query(Z, True, False)
        return m, v

    def increment_mean(self, Z: np.ndarray) -> np.ndarray:
        """Predicted full increment: mean function times dt plus residual mean."""
        Z = np.atleast_2d(Z)
        out = self.residual_mean(Z)
        if self.mean_fn is not None:
            n = self.n_state
            out = out + self.mean_fn(Z[:, :n], Z[:, n:]) * self.dt
        return out

    def _jitter(self) -> float:
        return 1e-10 * max(float(np.max(self._sf2)), 1e-300)

    # Correction protocol used by the dynamics layer

    def mean_rate(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        Z = np.concatenate([np.atleast_2d(x), np.atleast_2d(u)], axis=-1)
        out = self.residual_mean(Z) / self.dt
        return out[0] if x.ndim == 1 else out

    def predict(self, x: np.ndarray, u: np.ndarray) -> CorrectedDrift:
        Z = np.concatenate([np.asarray(x, dtype=float), np.asarray(u, dtype=float)])[None]
        m, v = self.residual_mean_var(Z)
        cov_diag = (v[0] + self._jitter()) / self.dt
        return CorrectedDrift(m[0] / self.dt, np.diag(cov_diag), np.diag(np.sqrt(cov_diag)))

    def rate_derivatives(self, x: np.ndarray, u: np.ndarray) -> dict:
        """Batched rate mean, diagonal root and their input derivatives."""
        X = np.atleast_2d(np.asarray(x, dtype=float))
        Z = np.concatenate([X, np.atleast_2d(u)], axis=1)
        n = X.shape[1]
        m, v, mg, vg = self._query(Z, True, True)
        root = np.sqrt((v + self._jitter()) / self.dt)
        root_g = vg / (2.0 * self.dt * root[..., None])
        mg = mg / self.dt
        return {
            "mean": m / self.dt,
            "mean_x": mg[..., :n],
            "mean_u": mg[..., n:],
            "root": root,
            "root_x": root_g[..., :n],
            "root_u": root_g[..., n:],
        }

    def hyperparams_dict(self) -> list:
        return [h.to_dict() for h in self.hypers]


def fit(
    data: ResidualDataset,
    mean_fn: Optional[Callable] = None,
    cap: int = 300,
    seed=0,
    init: Optional[Sequence[KernelHyperparams]] = None,
    restarts: int = 4,
    max_iter: int = 200,
    hypers: Optional[Sequence[KernelHyperparams]] = None,
    n_state: Optional[int] = None,
    noise_floor: Optional[Sequence[float]] = None,
) -> ResidualGP:
    """Subsample ``min(cap, len(data))`` rows uniformly and fit one GP per output.

    ``data.targets`` are residuals with the mean-function increment already
    removed. Pass ``hypers`` to skip optimization. ``noise_floor`` gives a
    lower bound on each output's noise variance.
    """
    if len(data) < 1:
        raise ValueError("cannot fit a GP to an empty dataset")
    rng = np.random.default_rng(seed)
    N = len(data)
    idx = np.sort(rng.choice(N, size=min(cap, N), replace=False))
    X = data.inputs[idx]
    Y = data.targets[idx]
    if hypers is None:
        hypers = []
        for o in range(Y.shape[1]):
            start = init[o] if init is not None else None
            hypers.append(
                optimize_hyperparams(
                    X, Y[:, o], start, restarts=restarts, max_iter=max_iter, seed=[*np.atleast_1d(seed), o],
                    min_noise=0.0 if noise_floor is None else float(noise_floor[o]),
                )
            )
    gp = ResidualGP(X, Y, list(hypers), data.dt, mean_fn, n_state)
    gp.train_indices = idx
    return gp


def predict(gp: ResidualGP, x: np.ndarray, u: np.ndarray) -> CorrectedDrift:
    return gp.predict(x, u)


def predict_derivatives(gp: ResidualGP, x: np.ndarray, u: np.ndarray):
    """Jacobians of the correction rate and tensors of the root's columns.

    Returns ``(g_x (n,n), g_u (n,m), G_x (n,n,n), G_u (n,n,m))`` with
    ``G_x[a, i, b] = d G[a, i] / d x_b``.
    """
    d = gp.rate_derivatives(x, u)
    n = d["mean_x"].shape[1]
    m = d["mean_u"].shape[2]
    idx = np.arange(n)
    G_x = np.zeros((n, n, n))
    G_u = np.zeros((n, n, m))
    G_x[idx, idx, :] = d["root_x"][0]
    G_u[idx, idx, :] = d["root_u"][0]
    return d["mean_x"][0], d["mean_u"][0], G_x, G_u


def validate(gp: ResidualGP, holdout: ResidualDataset) -> float:
    """Mean squared residual prediction error over ``holdout``."""
    if len(holdout) == 0:
        raise ValueError("holdout must be nonempty")
    err = gp.residual_mean(holdout.inputs) - holdout.targets
    return float(np.mean(np.sum(err * err, axis=1)))
