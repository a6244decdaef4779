"""GP-ILQG learning loop and its baselines.

A run alternates: plan on the (corrected) simulator, roll the policy out on the
real-world model, add the residuals to the dataset, refit the residual GP and
re-plan, until the nominal controls stop changing.

Modes:

``gp-ilqg``
    simulator drift as GP mean function, Robust-iLQG planning.
``ilqg-true``
    iLQG on the real-world model; never learns.
``ilqg-sim``
    iLQG on the simulator; never learns, so its curve is flat.
``data-only``
    same GP machinery with a zero mean function (no simulator prior).
"""

from __future__ import annotations

import copy
import logging
import zlib
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Callable, Optional

import numpy as np
import yaml

from gpilqg import gp as gplib
from gpilqg.costs import QuadraticCost, cartpole_cost, quadrotor_line_cost
from gpilqg.dynamics import CorrectedDynamics, DynamicsModel, Quadrotor, make_model, rollout
from gpilqg.ilqg import SolverError, SolverOptions, solve
from gpilqg.trajectory import AffinePolicy

logger = logging.getLogger(__name__)

MODES = ("gp-ilqg", "ilqg-true", "ilqg-sim", "data-only")

# stream ids for seeded generators
_EVAL, _COLLECT, _SPLIT, _FIT = 1, 2, 3, 4


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending key."""


@dataclass
class ExperimentConfig:
    task: str
    system: str
    sim_model: str
    real_model: str
    x0: list
    horizon: int
    dt: float
    cost: dict
    goal: Optional[list] = None
    mode: str = "gp-ilqg"
    rollouts: int = 5
    eval_rollouts: int = 10
    gamma: float = 1e-2
    max_iters: int = 5
    seeds: list = field(default_factory=lambda: [0])
    noise_scale: float = 0.1
    obs_noise: float = 1e-3
    gp: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    divergence_penalty: float = 10.0
    mpc: Optional[dict] = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode: unknown mode {self.mode!r}; expected one of {MODES}")
        if self.system not in ("cartpole", "quadrotor"):
            raise ConfigError(f"system: unknown system {self.system!r}")
        if int(self.rollouts) < 1:
            raise ConfigError("rollouts: must be at least 1")
        if int(self.eval_rollouts) < 1:
            raise ConfigError("eval_rollouts: must be at least 1")
        if int(self.horizon) < 1:
            raise ConfigError("horizon: must be at least 1")
        if not float(self.dt) > 0:
            raise ConfigError("dt: must be positive")
        if self.system == "quadrotor" and self.goal is None:
            raise ConfigError("goal: quadrotor tasks need a goal position")
        unknown = set(self.solver) - set(SolverOptions.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"solver.{sorted(unknown)[0]}: unknown solver option")
        unknown = set(self.gp) - set(GP_DEFAULTS)
        if unknown:
            raise ConfigError(f"gp.{sorted(unknown)[0]}: unknown GP option")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown config key")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **kw) -> "ExperimentConfig":
        d = copy.deepcopy(self.to_dict())
        d.update(kw)
        return ExperimentConfig.from_dict(d)

    @property
    def gp_options(self) -> dict:
        return {**GP_DEFAULTS, **self.gp}

    def solver_options(self) -> SolverOptions:
        opts = dict(self.solver)
        if "alphas" in opts:
            opts["alphas"] = tuple(opts["alphas"])
        return SolverOptions(**opts)


GP_DEFAULTS = {
    "cap": 300,
    "restarts": 4,
    "max_iter": 200,
    "holdout": 0.2,
    "resample_attempts": 1,
}


def load_task(name: str) -> ExperimentConfig:
    """Load a checked-in task preset (``cartpole-1``, ``quadrotor-2`` ...)."""
    path = resources.files("gpilqg.presets").joinpath(f"{name}.yaml")
    if not path.is_file():
        raise ConfigError(f"task: unknown task preset {name!r}")
    return ExperimentConfig.from_dict(yaml.safe_load(path.read_text()))


def available_tasks() -> list:
    root = resources.files("gpilqg.presets")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml") and p.name != "models.yaml")


def build_models(config: ExperimentConfig):
    sim = make_model(config.sim_model, config.noise_scale)
    real = make_model(config.real_model, config.noise_scale)
    return sim, real


def build_cost(config: ExperimentConfig) -> QuadraticCost:
    if config.system == "cartpole":
        return cartpole_cost(config.cost, config.dt)
    start = np.asarray(config.x0[:3], dtype=float)
    # the planner only knows the simulator, so thrust is referenced to its hover point
    hover = make_model(config.sim_model).hover_control()
    return quadrotor_line_cost(start, config.goal, config.horizon, config.dt, config.cost, hover)


def initial_controls(config: ExperimentConfig, sim: DynamicsModel) -> np.ndarray:
    if isinstance(sim, Quadrotor):
        return np.tile(sim.hover_control(), (config.horizon, 1))
    return np.zeros((config.horizon, sim.m))


def _rng_key(seed: int, task: str, *parts: int) -> list:
    return [int(seed), zlib.crc32(task.encode()), *[int(p) for p in parts]]


def policy_divergence(a: AffinePolicy, b: AffinePolicy) -> float:
    """``max_t |u_a[t] - u_b[t]| / (1 + |u_b[t]|)`` over nominal controls."""
    if a.nominal_controls.shape != b.nominal_controls.shape:
        raise ValueError("policies have different horizons or control dimensions")
    num = np.linalg.norm(a.nominal_controls - b.nominal_controls, axis=1)
    den = 1.0 + np.linalg.norm(b.nominal_controls, axis=1)
    return float(np.max(num / den)) if len(num) else 0.0


def evaluate(
    policy: AffinePolicy,
    real: DynamicsModel,
    cost: QuadraticCost,
    x0: np.ndarray,
    n_rollouts: int,
    seed,
    penalty: float = np.inf,
):
    """Monte-Carlo mean and standard error of the total cost on ``real``.

    Divergent rollouts are charged ``penalty``.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be at least 1")
    costs = np.empty(n_rollouts)
    for k in range(n_rollouts):
        res = rollout(real, policy, x0, policy.dt, [*np.atleast_1d(seed), k])
        if res.diverged:
            logger.info("evaluation rollout %d diverged; charging penalty %.4g", k, penalty)
            costs[k] = penalty
        else:
            costs[k] = cost.total(res.trajectory.states, res.trajectory.controls)
    stderr = float(np.std(costs, ddof=1) / np.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0
    return float(np.mean(costs)), stderr


@dataclass
class LearnerState:
    dataset: Optional[gplib.ResidualDataset] = None
    gp: Optional[gplib.ResidualGP] = None
    policy: Optional[AffinePolicy] = None
    iteration: int = 0
    cost_history: list = field(default_factory=list)  # (iteration, mean, stderr)
    policy_changes: list = field(default_factory=list)
    validation_errors: list = field(default_factory=list)
    aborted: bool = False
    converged: bool = False


@dataclass
class RunResult:
    state: LearnerState
    rows: list  # cost-curve rows (dicts)
    mode: str
    task: str
    seed: int


def _planner(config: ExperimentConfig, sim, real, gp_model) -> CorrectedDynamics:
    if config.mode == "ilqg-true":
        return CorrectedDynamics(real)
    if config.mode == "ilqg-sim":
        return CorrectedDynamics(sim)
    return CorrectedDynamics(sim, gp_model, use_model_drift=config.mode == "gp-ilqg")


def _mean_drift(config: ExperimentConfig, sim):
    if config.mode == "data-only":
        return lambda x, u: np.zeros(np.shape(x))
    return sim.drift


def target_noise_floor(config: ExperimentConfig, sim: DynamicsModel, data: gplib.ResidualDataset) -> np.ndarray:
    """Per-step target noise the simulator predicts: sensor noise on two states plus process noise."""
    n = sim.n
    F = sim.diffusion(data.inputs[:, :n], data.inputs[:, n:])
    process = config.dt * np.median(np.sum(F**2, axis=-1), axis=0)
    return 2.0 * config.obs_noise**2 + process


def _refit(config, state: LearnerState, sim, seed: int, iteration: int) -> None:
    """Refit on a fresh subsample; keep the previous GP if validation error gets worse."""
    opts = config.gp_options
    data = state.dataset
    mean_fn = sim.drift if config.mode == "gp-ilqg" else None
    train, hold = data.split(opts["holdout"], _rng_key(seed, config.task, _SPLIT, iteration))
    if len(train) == 0:
        train = data
    prev = state.gp
    prev_err = gplib.validate(prev, hold) if prev is not None and len(hold) else np.inf
    init = prev.hypers if prev is not None else None
    floor = target_noise_floor(config, sim, train)
    best, best_err = None, np.inf
    for attempt in range(1 + int(opts["resample_attempts"])):
        cand = gplib.fit(
            train,
            mean_fn,
            cap=int(opts["cap"]),
            seed=_rng_key(seed, config.task, _FIT, iteration, attempt),
            init=init,
            restarts=int(opts["restarts"]),
            max_iter=int(opts["max_iter"]),
            n_state=sim.n,
            noise_floor=floor,
        )
        err = gplib.validate(cand, hold) if len(hold) else 0.0
        if err < best_err or best is None:
            best, best_err = cand, err
        if err <= prev_err:
            break
    if best_err > prev_err:
        logger.info("iteration %d: validation error %.4g > previous %.4g; keeping previous GP", iteration, best_err, prev_err)
        state.validation_errors.append(prev_err)
        return
    state.gp = best
    state.validation_errors.append(best_err)


def _solve(config, planner, cost, x0, init) -> AffinePolicy:
    return solve(planner, cost, x0, init, config.dt, config.solver_options()).policy


def run(
    config: ExperimentConfig,
    seed: Optional[int] = None,
    state: Optional[LearnerState] = None,
    normalizer: Optional[float] = None,
    on_iteration: Optional[Callable[[int, LearnerState], None]] = None,
) -> RunResult:
    """Run one mode of one task for one seed.

    ``state`` seeds the learner with an existing dataset/GP (task transfer).
    ``normalizer`` divides the reported costs; when omitted the ilqg-sim
    policy's evaluated cost on this task is used. ``on_iteration`` is called
    after every learning iteration (used for dataset snapshots).
    """
    seed = config.seeds[0] if seed is None else seed
    sim, real = build_models(config)
    cost = build_cost(config)
    x0 = np.asarray(config.x0, dtype=float)
    eval_key = _rng_key(seed, config.task, _EVAL)
    state = LearnerState() if state is None else copy.copy(state)
    state.cost_history = []
    state.policy_changes = []
    state.validation_errors = []
    state.iteration = 0
    state.aborted = state.converged = False
    learns = config.mode in ("gp-ilqg", "data-only")
    if not learns:
        state.dataset = None
        state.gp = None
    if learns and state.dataset is None:
        state.dataset = gplib.ResidualDataset.empty(sim.n + sim.m, sim.n, config.dt)
    if learns and len(state.dataset) and state.gp is None:
        _refit(config, state, sim, seed, 0)

    if normalizer is None:
        normalizer = reference_cost(config, seed)

    planner = _planner(config, sim, real, state.gp if learns else None)
    try:
        if state.policy is None:
            state.policy = _solve(config, planner, cost, x0, initial_controls(config, sim))
    except SolverError:
        logger.error("initial solve failed")
        state.aborted = True
        return RunResult(state, [], config.mode, config.task, seed)

    nominal_cost = cost.total(state.policy.nominal_states, state.policy.nominal_controls)
    penalty = config.divergence_penalty * max(nominal_cost, 1.0)
    mean, err = evaluate(state.policy, real, cost, x0, config.eval_rollouts, eval_key, penalty)
    state.cost_history.append((0, mean, err))

    if learns:
        mean_drift = _mean_drift(config, sim)
        for it in range(1, config.max_iters + 1):
            for r in range(config.rollouts):
                res = rollout(
                    real, state.policy, x0, config.dt,
                    _rng_key(seed, config.task, _COLLECT, it, r),
                    mean_drift=mean_drift, obs_noise=config.obs_noise,
                )
                if res.diverged:
                    logger.info("collection rollout %d diverged after %d steps", r, res.trajectory.horizon)
                state.dataset = state.dataset.extend(res.inputs, res.targets)
            _refit(config, state, sim, seed, it)
            planner = _planner(config, sim, real, state.gp)
            try:
                new_policy = _solve(config, planner, cost, x0, state.policy)
            except SolverError:
                try:
                    new_policy = _solve(config, planner, cost, x0, initial_controls(config, sim))
                except SolverError:
                    logger.error("solver failed at iteration %d; aborting", it)
                    state.aborted = True
                    break
            change = policy_divergence(new_policy, state.policy)
            state.policy = new_policy
            state.iteration = it
            state.policy_changes.append(change)
            mean, err = evaluate(state.policy, real, cost, x0, config.eval_rollouts, eval_key, penalty)
            state.cost_history.append((it, mean, err))
            logger.info("%s %s seed=%d iter=%d cost=%.4g change=%.3g", config.task, config.mode, seed, it, mean, change)
            if on_iteration is not None:
                on_iteration(it, state)
            if change <= config.gamma:
                state.converged = True
                break

    rows = [
        {
            "mode": config.mode,
            "task": config.task,
            "seed": seed,
            "iteration": it,
            "mean_cost": mean,
            "stderr": err,
            "normalized_cost": mean / normalizer,
        }
        for it, mean, err in state.cost_history
    ]
    return RunResult(state, rows, config.mode, config.task, seed)


_REFERENCE_CACHE: dict = {}


def reference_cost(config: ExperimentConfig, seed: int) -> float:
    """Evaluated real-world cost of the simulator-only iLQG policy (the curve normalizer)."""
    key = (yaml.safe_dump({**config.to_dict(), "mode": None, "seeds": None}), seed)
    if key not in _REFERENCE_CACHE:
        sim, real = build_models(config)
        cost = build_cost(config)
        x0 = np.asarray(config.x0, dtype=float)
        policy = _solve(config, CorrectedDynamics(sim), cost, x0, initial_controls(config, sim))
        nominal = cost.total(policy.nominal_states, policy.nominal_controls)
        mean, _ = evaluate(
            policy, real, cost, x0, config.eval_rollouts, _rng_key(seed, config.task, _EVAL),
            config.divergence_penalty * max(nominal, 1.0),
        )
        _REFERENCE_CACHE[key] = mean
    return _REFERENCE_CACHE[key]


def transfer(state: LearnerState, new_config: ExperimentConfig, seed: Optional[int] = None, **kw) -> RunResult:
    """Run ``new_config`` starting from a previous task's dataset and GP."""
    if state.dataset is None or len(state.dataset) == 0:
        raise ValueError("transfer needs a nonempty dataset")
    warm = LearnerState(dataset=state.dataset, gp=state.gp)
    return run(new_config, seed, warm, **kw)


def final_trajectory(config: ExperimentConfig, policy: AffinePolicy, seed: int):
    """One real-world rollout of ``policy`` on the first evaluation stream."""
    _, real = build_models(config)
    x0 = np.asarray(config.x0, dtype=float)
    return rollout(real, policy, x0, config.dt, [*_rng_key(seed, config.task, _EVAL), 0]).trajectory
