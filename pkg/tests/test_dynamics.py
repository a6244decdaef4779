import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose
from scipy.linalg import expm
from scipy.spatial.transform import Rotation

import oracles
from gpilqg.dynamics import (
    SERIES_THRESHOLD,
    CartPole,
    CartPoleParams,
    CorrectedDrift,
    CorrectedDynamics,
    DivergenceError,
    Quadrotor,
    QuadrotorParams,
    axis_angle_rate,
    linearize,
    make_model,
    rollout,
    rotate_e3,
    skew,
    step,
)
from gpilqg.trajectory import AffinePolicy

finite = st.floats(-10, 10, allow_nan=False)


def random_cartpole_states(rng, k):
    return np.column_stack(
        [rng.uniform(-2, 2, k), rng.uniform(-3, 3, k), rng.uniform(-np.pi, 2 * np.pi, k), rng.uniform(-5, 5, k)]
    )


def random_quadrotor_states(rng, k):
    r = rng.normal(size=(k, 3))
    r *= rng.uniform(0.05, 2.5, (k, 1)) / np.linalg.norm(r, axis=1, keepdims=True)
    return np.column_stack([rng.normal(size=(k, 6)), r, rng.normal(size=(k, 3))])


# --- cart-pole ---------------------------------------------------------------


@pytest.mark.parametrize("length", [1.0, 1.3])
def test_cartpole_drift_matches_lagrangian(length):
    model = CartPole(CartPoleParams(1.0, 1.0, length))
    rng = np.random.default_rng(0)
    for x in random_cartpole_states(rng, 10):
        u = rng.uniform(-20, 20, 1)
        assert_allclose(model.drift(x, u), oracles.cartpole_rate(x, u, model.params), rtol=1e-10, atol=1e-10)


def test_cartpole_batched_drift_matches_single():
    model = make_model("cartpole-real")
    rng = np.random.default_rng(1)
    X = random_cartpole_states(rng, 6)
    U = rng.normal(size=(6, 1))
    batched = model.drift(X, U)
    for i in range(6):
        assert_allclose(batched[i], model.drift(X[i], U[i]))


def test_cartpole_hanging_equilibrium():
    model = make_model("cartpole-sim")
    assert_allclose(model.drift(np.zeros(4), np.zeros(1)), np.zeros(4), atol=1e-15)
    assert_allclose(model.drift(np.array([0, 0, np.pi, 0]), np.zeros(1)), np.zeros(4), atol=1e-12)


def test_cartpole_control_matrix_is_input_derivative():
    model = make_model("cartpole-sim")
    x = np.array([0.3, -0.2, 1.1, 0.5])
    _, fu = oracles.cartpole_jacobians(x, np.array([2.0]), model.params)
    assert_allclose(model.control_matrix(x), fu, rtol=1e-10)


# --- quadrotor ---------------------------------------------------------------


def test_rotate_e3_matches_scipy_and_quaternion():
    rng = np.random.default_rng(2)
    for x in random_quadrotor_states(rng, 10):
        r = x[6:9]
        expected = Rotation.from_rotvec(r).apply([0, 0, 1])
        assert_allclose(rotate_e3(r), expected, atol=1e-12)
        assert_allclose(oracles.quat_rotate(r, np.array([0.0, 0, 1])), expected, atol=1e-12)


def test_right_jacobian_oracle_matches_body_rate():
    # self-check of the oracle: R(r + eps r_dot) = R(r) exp(eps [w])
    r = np.array([0.4, -0.7, 1.1])
    w = np.array([0.3, 0.9, -0.5])
    r_dot = np.linalg.solve(oracles.right_jacobian(r), w)
    eps = 1e-6
    lhs = Rotation.from_rotvec(r + eps * r_dot).as_matrix()
    rhs = Rotation.from_rotvec(r).as_matrix() @ expm(eps * skew(w))
    assert_allclose(lhs, rhs, atol=1e-10)


def test_quadrotor_drift_matches_quaternion_oracle():
    model = make_model("quadrotor-real")
    rng = np.random.default_rng(3)
    for x in random_quadrotor_states(rng, 10):
        u = rng.uniform(0.5, 3.0, 4)
        assert_allclose(model.drift(x, u), oracles.quadrotor_rate(x, u, model.params), rtol=1e-9, atol=1e-9)


def test_axis_angle_rate_continuous_across_series_threshold():
    w = np.array([0.3, -0.2, 0.5])
    direction = np.array([1.0, 2.0, -1.0]) / np.sqrt(6.0)
    below = axis_angle_rate(direction * SERIES_THRESHOLD * (1 - 1e-9), w)
    above = axis_angle_rate(direction * SERIES_THRESHOLD * (1 + 1e-9), w)
    # closed form loses ~eps/theta^2 to cancellation; the cross term itself is ~1e-7 here
    assert_allclose(below, above, rtol=0, atol=1e-11)
    assert_allclose(axis_angle_rate(np.zeros(3), w), w)


def test_quadrotor_hover_is_equilibrium():
    model = make_model("quadrotor-sim")
    x = np.zeros(12)
    x[2] = 5.0
    assert_allclose(model.drift(x, model.hover_control()), np.zeros(12), atol=1e-12)


def test_quadrotor_params_validation():
    with pytest.raises(ValueError):
        QuadrotorParams(0.1, 0.02, -1.0, np.eye(3).tolist(), 0.2)
    with pytest.raises(ValueError):
        CartPoleParams(1.0, 1.0, 0.0)


@given(arrays(float, 3, elements=finite), arrays(float, 3, elements=finite))
def test_skew_is_cross_product(r, v):
    S = skew(r)
    assert_allclose(S, -S.T)
    assert_allclose(S @ v, np.cross(r, v), atol=1e-9)


# --- linearization -----------------------------------------------------------


@pytest.mark.parametrize("system", ["cartpole", "quadrotor"])
def test_linearize_matches_symbolic_jacobians(system):
    rng = np.random.default_rng(4)
    dt = 0.02
    if system == "cartpole":
        model = make_model("cartpole-real")
        X = random_cartpole_states(rng, 20)
        U = rng.uniform(-20, 20, (20, 1))
    else:
        model = make_model("quadrotor-real")
        X = random_quadrotor_states(rng, 20)
        U = rng.uniform(0.5, 3.0, (20, 4))
    A, B = linearize(model.drift, X, U, dt)
    n = model.n
    for i in range(20):
        if system == "cartpole":
            fx, fu = oracles.cartpole_jacobians(X[i], U[i], model.params)
        else:
            z = np.concatenate([X[i], U[i]])
            jac = oracles.five_point_derivative(lambda q: oracles.quadrotor_rate(q[:n], q[n:], model.params), z)
            fx, fu = jac[:, :n], jac[:, n:]
        assert_allclose((A[i] - np.eye(n)) / dt, fx, rtol=1e-4, atol=1e-6)
        assert_allclose(B[i] / dt, fu, rtol=1e-4, atol=1e-6)


# --- stochastic step ---------------------------------------------------------


class ConstantCorrection:
    def __init__(self, mean, root):
        self.mean, self.root = mean, root

    def predict(self, x, u):
        return CorrectedDrift(self.mean, self.root @ self.root.T, self.root)

    def mean_rate(self, x, u):
        return np.broadcast_to(self.mean, np.shape(x))


def test_step_moments_match_euler_maruyama():
    model = make_model("cartpole-sim", noise_scale=0.5)
    G = np.diag([0.1, 0.4, 0.2, 0.3])
    G[3, 1] = 0.2
    corr = ConstantCorrection(np.array([0.0, 0.5, 0.0, -0.5]), G)
    x = np.array([0.1, 0.2, 2.0, -0.3])
    u = np.array([3.0])
    dt = 0.05
    N = 100_000
    rng = np.random.default_rng(5)
    xi_F = rng.standard_normal((N, model.p))
    xi_G = rng.standard_normal((N, 4))
    samples = np.array([step(model, corr, x, u, dt, a, b) for a, b in zip(xi_F, xi_G)])
    F = model.diffusion(x, u)
    mean = x + (model.drift(x, u) + corr.mean) * dt
    cov = (F @ F.T + G @ G.T) * dt
    emp = np.cov(samples.T)
    # sampling std of each covariance entry
    sd = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov**2) / N)
    assert np.all(np.abs(emp - cov) <= 3 * sd + 1e-15)
    assert np.all(np.abs(samples.mean(0) - mean) <= 3 * np.sqrt(np.diag(cov) / N) + 1e-15)


def test_step_without_noise_is_euler():
    model = make_model("quadrotor-sim")
    x = random_quadrotor_states(np.random.default_rng(6), 1)[0]
    u = np.full(4, 1.3)
    assert_allclose(step(model, None, x, u, 0.01), x + model.drift(x, u) * 0.01)


def test_step_rejects_bad_dt_and_divergence():
    model = make_model("cartpole-sim")
    with pytest.raises(ValueError):
        step(model, None, np.zeros(4), np.zeros(1), 0.0)
    with pytest.raises(DivergenceError):
        step(model, None, np.array([0, 1e9, 0, 0]), np.zeros(1), 0.1)


def test_corrected_dynamics_derivatives_shapes_and_values():
    model = make_model("cartpole-sim", noise_scale=0.1)
    dyn = CorrectedDynamics(model)
    rng = np.random.default_rng(7)
    X = random_cartpole_states(rng, 6)
    U = rng.normal(size=(5, 1))
    d = dyn.derivatives(X, U, 0.02)
    assert d.A.shape == (5, 4, 4) and d.B.shape == (5, 4, 1)
    assert d.F.shape == (5, 4, 1) and d.F_x.shape == (5, 4, 1, 4) and d.F_u.shape == (5, 4, 1, 1)
    assert d.G is None
    A, B = linearize(model.drift, X[:5], U, 0.02)
    assert_allclose(d.A, A)
    assert_allclose(d.B, B)
    # F is linear in u, so dF/du is the noise-scaled control matrix
    assert_allclose(d.F_u[..., 0], 0.1 * model.control_matrix(X[:5])[..., 0][..., None], rtol=1e-6)


# --- rollouts ----------------------------------------------------------------


def test_rollout_is_deterministic_per_seed():
    model = make_model("cartpole-real", noise_scale=0.1)
    policy = AffinePolicy.open_loop(np.zeros((31, 4)), np.ones((30, 1)), 0.02)
    a = rollout(model, policy, np.zeros(4), 0.02, seed=[3, 1], obs_noise=1e-3)
    b = rollout(model, policy, np.zeros(4), 0.02, seed=[3, 1], obs_noise=1e-3)
    c = rollout(model, policy, np.zeros(4), 0.02, seed=[3, 2], obs_noise=1e-3)
    assert np.array_equal(a.trajectory.states, b.trajectory.states)
    assert np.array_equal(a.targets, b.targets)
    assert not np.array_equal(a.trajectory.states, c.trajectory.states)


def test_rollout_targets_average_to_model_gap():
    sim = make_model("cartpole-sim")
    real = make_model("cartpole-real", noise_scale=0.1)
    dt = 0.02
    T = 50
    rng = np.random.default_rng(8)
    policy = AffinePolicy.open_loop(np.zeros((T + 1, 4)), rng.uniform(-5, 5, (T, 1)), dt)
    resid = []
    for r in range(200):
        res = rollout(real, policy, np.array([0, 0, 0.5, 0]), dt, seed=[9, r], mean_drift=sim.drift)
        X, U = res.inputs[:, :4], res.inputs[:, 4:]
        gap = (real.drift(X, U) - sim.drift(X, U)) * dt
        resid.append(res.targets - gap)
    resid = np.concatenate(resid)
    se = resid.std(0, ddof=1) / np.sqrt(len(resid))
    assert np.all(np.abs(resid.mean(0)) <= 3 * se + 1e-15)


def test_rollout_records_observation_noise_only_in_records():
    model = make_model("cartpole-sim", noise_scale=0.0)
    policy = AffinePolicy.open_loop(np.zeros((11, 4)), np.zeros((10, 1)), 0.02)
    res = rollout(model, policy, np.array([0, 0, 0.3, 0]), 0.02, seed=0, obs_noise=1e-2)
    clean = rollout(model, policy, np.array([0, 0, 0.3, 0]), 0.02, seed=0)
    assert_allclose(res.trajectory.states, clean.trajectory.states)
    assert not np.allclose(res.inputs[:, :4], clean.inputs[:, :4])
    assert_allclose(clean.targets, 0.0, atol=1e-15)


def test_rollout_flags_divergence():
    model = make_model("cartpole-sim", noise_scale=0.0)
    policy = AffinePolicy.open_loop(np.zeros((21, 4)), np.full((20, 1), 1e12), 0.1)
    res = rollout(model, policy, np.zeros(4), 0.1, seed=0)
    assert res.diverged
    assert res.trajectory.horizon < 20


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_diffusion_scales_with_noise_and_control(scale, s):
    model = Quadrotor(make_model("quadrotor-sim").params, noise_scale=scale)
    rng = np.random.default_rng(s)
    x = random_quadrotor_states(rng, 1)[0]
    u = rng.uniform(0, 3, 4)
    assert_allclose(model.diffusion(x, u), scale * model.control_matrix(x) * u[None, :], atol=1e-14)
