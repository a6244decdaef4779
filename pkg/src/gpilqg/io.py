"""Plain-text result files: cost curves, trajectories, datasets, hyperparameters, manifests.

Tables are comma-separated with one header row. Floats are written with
``repr`` so identical values always produce identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
from pathlib import Path
from typing import Iterable

import numpy as np
import yaml

from gpilqg.gp import KernelHyperparams, ResidualDataset
from gpilqg.loop import ExperimentConfig
from gpilqg.trajectory import AffinePolicy, Trajectory

COST_COLUMNS = ("mode", "task", "seed", "iteration", "mean_cost", "stderr", "normalized_cost")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path: Path, header: Iterable[str], rows: Iterable[Iterable]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_cost_curve(path, rows: list) -> None:
    write_table(path, COST_COLUMNS, ([r[c] for c in COST_COLUMNS] for r in rows))


def read_cost_curve(path) -> list:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        r["iteration"] = int(r["iteration"])
        for c in ("mean_cost", "stderr", "normalized_cost"):
            r[c] = float(r[c])
    return rows


def write_trajectory(path, traj: Trajectory) -> None:
    """Columns ``t, x0..x{n-1}, u0..u{m-1}``; the terminal row has empty controls."""
    n = traj.states.shape[1]
    m = traj.controls.shape[1]
    header = ["t"] + [f"x{i}" for i in range(n)] + [f"u{j}" for j in range(m)]
    rows = []
    for t in range(len(traj.states)):
        u = list(traj.controls[t]) if t < traj.horizon else [""] * m
        rows.append([t * traj.dt, *traj.states[t], *u])
    write_table(path, header, rows)


def read_trajectory(path, n: int, dt: float) -> Trajectory:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    X = np.array([[float(v) for v in r[1 : 1 + n]] for r in rows])
    U = np.array([[float(v) for v in r[1 + n :]] for r in rows[:-1]])
    return Trajectory(X, U.reshape(len(rows) - 1, -1), dt)


def write_dataset(path, data: ResidualDataset) -> None:
    """First line ``# dt=<dt>``, then a table of inputs ``z*`` and targets ``y*``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d, o = data.inputs.shape[1], data.targets.shape[1]
    with path.open("w", newline="") as fh:
        fh.write(f"# dt={data.dt!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"z{i}" for i in range(d)] + [f"y{i}" for i in range(o)])
        for z, y in zip(data.inputs, data.targets):
            w.writerow([_fmt(v) for v in (*z, *y)])


def read_dataset(path) -> ResidualDataset:
    with Path(path).open(newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# dt="):
            raise ValueError(f"{path}: missing '# dt=' header")
        dt = float(first[len("# dt=") :])
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in r] for r in reader]).reshape(-1, len(header))
    d = sum(1 for h in header if h.startswith("z"))
    return ResidualDataset(rows[:, :d], rows[:, d:], dt)


def write_hyperparams(path, hypers: list) -> None:
    doc = [
        {
            "signal_variance": float(h.signal_variance),
            "length_scales": [float(v) for v in h.length_scales],
            "noise_variance": float(h.noise_variance),
        }
        for h in hypers
    ]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True))


def read_hyperparams(path) -> list:
    return [KernelHyperparams.from_dict(d) for d in yaml.safe_load(Path(path).read_text())]


def save_policy(path, policy: AffinePolicy) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("wb") as fh:
        np.savez(
            fh,
            nominal_states=policy.nominal_states,
            nominal_controls=policy.nominal_controls,
            k=policy.k,
            K=policy.K,
            dt=np.array(policy.dt),
        )


def load_policy(path) -> AffinePolicy:
    with np.load(path) as f:
        return AffinePolicy(f["nominal_states"], f["nominal_controls"], f["k"], f["K"], float(f["dt"]))


def config_text(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)


def write_config(path, config: ExperimentConfig) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(config_text(config))


def read_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(yaml.safe_load(Path(path).read_text()))


def content_hash(text: str) -> str:
    """Git blob hash of ``text``."""
    data = text.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, config: ExperimentConfig, files: Iterable) -> Path:
    """``manifest.yaml`` with the config snapshot, its hash and checksums of ``files``."""
    out_dir = Path(out_dir)
    doc = {
        "config": config.to_dict(),
        "config_hash": content_hash(config_text(config)),
        "output_dir": str(out_dir),
        "files": {str(Path(f).relative_to(out_dir)): file_checksum(f) for f in sorted(map(str, files))},
    }
    path = out_dir / "manifest.yaml"
    path.write_text(yaml.safe_dump(doc, sort_keys=True))
    return path


def read_manifest(path) -> dict:
    doc = yaml.safe_load(Path(path).read_text())
    doc["config"] = ExperimentConfig.from_dict(doc["config"])
    return doc
