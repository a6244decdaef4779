"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 I/O error.
The default output root is ``$GPILQG_OUT`` (falling back to ``./out``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from gpilqg import gp as gplib
from gpilqg import io
from gpilqg.ilqg import SolverError
from gpilqg.loop import (
    MODES,
    ConfigError,
    ExperimentConfig,
    LearnerState,
    build_cost,
    build_models,
    evaluate,
    final_trajectory,
    load_task,
    reference_cost,
    run,
    transfer,
    _rng_key,
    _EVAL,
)

logger = logging.getLogger("gpilqg")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
OUT_ENV = "GPILQG_OUT"


class RunFailed(RuntimeError):
    """A run aborted because the solver failed."""


def parse_seeds(text: str) -> list:
    """``"3"`` -> [3]; ``"0..4"`` -> [0, 1, 2, 3, 4] (inclusive); ``"1,5"`` -> [1, 5]."""
    seeds = []
    for part in str(text).split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ConfigError(f"seeds: empty range {part!r}")
            seeds.extend(range(lo, hi + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise ConfigError("seeds: no seeds given")
    return seeds


def resolve_config(args) -> ExperimentConfig:
    """Preset named by ``--task`` with ``--config`` file and flag overrides applied."""
    base = {}
    if getattr(args, "task", None):
        base = load_task(args.task).to_dict()
    if getattr(args, "config", None):
        try:
            override = yaml.safe_load(Path(args.config).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config: cannot parse {args.config}: {exc}") from exc
        if not isinstance(override, dict):
            raise ConfigError("config: file must hold a mapping")
        base.update(override)
    if not base:
        raise ConfigError("task: give --task or --config")
    for flag, key in (("mode", "mode"), ("max_iters", "max_iters"), ("gamma", "gamma"), ("rollouts", "rollouts")):
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    if getattr(args, "seeds", None) is not None:
        base["seeds"] = parse_seeds(args.seeds)
    return ExperimentConfig.from_dict(base)


def _out_root(args) -> Path:
    return Path(args.out if args.out else os.environ.get(OUT_ENV, "out"))


def _run_cell(config: ExperimentConfig, seed: int, out: Path, state=None) -> dict:
    """One (mode, seed) run with all its files; returns the cost rows."""
    out.mkdir(parents=True, exist_ok=True)
    files = []
    snapshots = out / "datasets"

    def snapshot(it, st):
        path = snapshots / f"iter_{it:02d}.csv"
        io.write_dataset(path, st.dataset)
        files.append(path)

    if state is None:
        result = run(config, seed, on_iteration=snapshot)
    else:
        result = transfer(state, config, seed, on_iteration=snapshot)
    if result.state.aborted and not result.rows:
        raise RunFailed(f"{config.task} {config.mode} seed {seed}: solver failed")
    paths = {
        "cost_curve": out / "cost_curve.csv",
        "trajectory": out / "trajectory.csv",
        "nominal": out / "nominal.csv",
        "policy": out / "policy.npz",
        "config": out / "config.yaml",
    }
    io.write_cost_curve(paths["cost_curve"], result.rows)
    io.write_trajectory(paths["trajectory"], final_trajectory(config, result.state.policy, seed))
    io.write_trajectory(paths["nominal"], result.state.policy.nominal())
    io.save_policy(paths["policy"], result.state.policy)
    io.write_config(paths["config"], config.replace(seeds=[seed]))
    files.extend(paths.values())
    if result.state.gp is not None:
        hp = out / "hyperparams.yaml"
        io.write_hyperparams(hp, result.state.gp.hypers)
        files.append(hp)
    if result.state.dataset is not None and len(result.state.dataset):
        ds = out / "dataset.csv"
        io.write_dataset(ds, result.state.dataset)
        files.append(ds)
    io.write_manifest(out, config.replace(seeds=[seed]), files)
    if result.state.aborted:
        raise RunFailed(f"{config.task} {config.mode} seed {seed}: solver failed mid-run")
    return result.rows


def cmd_run(args) -> int:
    config = resolve_config(args)
    seed = args.seed if args.seed is not None else config.seeds[0]
    out = _out_root(args) / config.task / config.mode / f"seed{seed}"
    rows = _run_cell(config, seed, out)
    for r in rows:
        print(f"{r['mode']} {r['task']} seed={r['seed']} iter={r['iteration']} normalized_cost={r['normalized_cost']:.6g}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = resolve_config(args)
    root = _out_root(args) / config.task
    rows = []
    for seed in config.seeds:
        for mode in MODES:
            cell = config.replace(mode=mode)
            rows.extend(_run_cell(cell, seed, root / mode / f"seed{seed}"))
    io.write_cost_curve(root / "cost_curve.csv", rows)
    print(f"wrote {root / 'cost_curve.csv'} ({len(rows)} rows)")
    return EXIT_OK


def cmd_transfer(args) -> int:
    config = resolve_config(args)
    if config.mode not in ("gp-ilqg", "data-only"):
        raise ConfigError("mode: transfer needs a learning mode (gp-ilqg or data-only)")
    seed = args.seed if args.seed is not None else config.seeds[0]
    data = io.read_dataset(args.dataset)
    gp_model = None
    if args.hyperparams:
        sim, _ = build_models(config)
        hypers = io.read_hyperparams(args.hyperparams)
        mean_fn = sim.drift if config.mode == "gp-ilqg" else None
        gp_model = gplib.fit(
            data, mean_fn, cap=int(config.gp_options["cap"]), seed=_rng_key(seed, config.task, 0),
            hypers=hypers, n_state=sim.n,
        )
    out = _out_root(args) / config.task / f"{config.mode}-transfer" / f"seed{seed}"
    rows = _run_cell(config, seed, out, LearnerState(dataset=data, gp=gp_model))
    for r in rows:
        print(f"{r['mode']} {r['task']} seed={r['seed']} iter={r['iteration']} normalized_cost={r['normalized_cost']:.6g}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = resolve_config(args)
    seed = args.seed if args.seed is not None else config.seeds[0]
    policy = io.load_policy(args.policy)
    if policy.horizon != config.horizon:
        raise ConfigError(f"horizon: policy has {policy.horizon} steps, task expects {config.horizon}")
    _, real = build_models(config)
    cost = build_cost(config)
    n = args.n_rollouts or config.eval_rollouts
    mean, err = evaluate(policy, real, cost, np.asarray(config.x0, float), n, _rng_key(seed, config.task, _EVAL))
    norm = reference_cost(config, seed)
    print("mean_cost,stderr,normalized_cost")
    print(f"{mean!r},{err!r},{mean / norm!r}")
    return EXIT_OK


def gp_demo_data(n_grid: int = 241, seed: int = 0):
    """1-D corrective GP: wrong mean function, a few observations, posterior over a grid."""
    true_fn = lambda x: np.sin(x) + 0.8 * np.cos(2.0 * x)
    mean_fn = lambda x: np.sin(x)
    rng = np.random.default_rng(seed)
    xs = np.array([-1.6, -0.9, -0.2, 0.4, 1.1, 1.7])
    ys = true_fn(xs) + 0.02 * rng.standard_normal(len(xs))
    data = gplib.ResidualDataset(xs[:, None], (ys - mean_fn(xs))[:, None], 1.0)
    model = gplib.fit(data, seed=seed)
    grid = np.linspace(-8.0, 8.0, n_grid)
    resid, var = model.residual_mean_var(grid[:, None])
    post = mean_fn(grid) + resid[:, 0]
    band = 1.96 * np.sqrt(var[:, 0])
    table = np.column_stack([grid, true_fn(grid), mean_fn(grid), post, post - band, post + band])
    return table, np.column_stack([xs, ys]), model


def cmd_gp_demo(args) -> int:
    table, obs, model = gp_demo_data(seed=args.seed or 0)
    out = _out_root(args) / "gp-demo"
    io.write_table(out / "grid.csv", ["x", "true", "mean_function", "posterior_mean", "lower95", "upper95"], table)
    io.write_table(out / "observations.csv", ["x", "y"], obs)
    io.write_hyperparams(out / "hyperparams.yaml", model.hypers)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpilqg", description="GP-corrected Robust-iLQG experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=False):
        sp.add_argument("--task", help="task preset, e.g. cartpole-1")
        sp.add_argument("--config", help="YAML file overriding the preset")
        sp.add_argument("--mode", choices=MODES)
        sp.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./out)")
        sp.add_argument("--max-iters", type=int, dest="max_iters")
        sp.add_argument("--gamma", type=float)
        sp.add_argument("--rollouts", type=int)
        if seeds:
            sp.add_argument("--seeds", help="e.g. 0..4 or 1,3")
        else:
            sp.add_argument("--seed", type=int)

    common(sub.add_parser("run", help="one mode of one task"))
    common(sub.add_parser("sweep", help="all modes over several seeds"), seeds=True)
    sp = sub.add_parser("transfer", help="learning run seeded with a saved dataset")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--hyperparams")
    sp = sub.add_parser("eval", help="re-evaluate a saved policy on the real-world model")
    common(sp)
    sp.add_argument("--policy", required=True)
    sp.add_argument("--n-rollouts", type=int, dest="n_rollouts")
    sp = sub.add_parser("gp-demo", help="1-D corrective GP demonstration")
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)
    return p


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "transfer": cmd_transfer, "eval": cmd_eval, "gp-demo": cmd_gp_demo}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, RunFailed) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
