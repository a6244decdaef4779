import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import tiny_cartpole
from gpilqg import cli, io
from gpilqg.gp import KernelHyperparams, ResidualDataset
from gpilqg.ilqg import SolverError
from gpilqg.loop import ConfigError, MODES
from gpilqg.trajectory import AffinePolicy, Trajectory


@pytest.fixture
def tiny_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(io.config_text(tiny_cartpole()))
    return path


def test_parse_seeds():
    assert cli.parse_seeds("3") == [3]
    assert cli.parse_seeds("0..4") == [0, 1, 2, 3, 4]
    assert cli.parse_seeds("1,5, 7..8") == [1, 5, 7, 8]
    for bad in ("4..2", ""):
        with pytest.raises(ConfigError):
            cli.parse_seeds(bad)


def test_table_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    rows = [
        {"mode": "gp-ilqg", "task": "t", "seed": 1, "iteration": i, "mean_cost": float(v), "stderr": 0.1 * i, "normalized_cost": float(v) / 3}
        for i, v in enumerate(rng.random(3))
    ]
    io.write_cost_curve(tmp_path / "c.csv", rows)
    assert io.read_cost_curve(tmp_path / "c.csv") == rows

    traj = Trajectory(rng.normal(size=(6, 4)), rng.normal(size=(5, 2)), 0.05)
    io.write_trajectory(tmp_path / "t.csv", traj)
    back = io.read_trajectory(tmp_path / "t.csv", 4, 0.05)
    assert_array_equal(back.states, traj.states)
    assert_array_equal(back.controls, traj.controls)

    data = ResidualDataset(rng.normal(size=(7, 5)), rng.normal(size=(7, 4)), 0.02)
    io.write_dataset(tmp_path / "d.csv", data)
    back = io.read_dataset(tmp_path / "d.csv")
    assert_array_equal(back.inputs, data.inputs)
    assert_array_equal(back.targets, data.targets)
    assert back.dt == data.dt

    hypers = [KernelHyperparams(1.5, np.array([0.3, 2.0]), 1e-3), KernelHyperparams(0.2, np.array([1.0, 4.0]), 1e-5)]
    io.write_hyperparams(tmp_path / "h.yaml", hypers)
    for a, b in zip(io.read_hyperparams(tmp_path / "h.yaml"), hypers):
        assert_array_equal(a.to_log(), b.to_log())

    pol = AffinePolicy(rng.normal(size=(6, 4)), rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), rng.normal(size=(5, 2, 4)), 0.05)
    io.save_policy(tmp_path / "p.npz", pol)
    back = io.load_policy(tmp_path / "p.npz")
    for name in ("nominal_states", "nominal_controls", "k", "K"):
        assert_array_equal(getattr(back, name), getattr(pol, name))

    cfg = tiny_cartpole()
    io.write_config(tmp_path / "cfg.yaml", cfg)
    assert io.read_config(tmp_path / "cfg.yaml") == cfg


def test_read_dataset_requires_header(tmp_path):
    (tmp_path / "d.csv").write_text("z0,y0\n1,2\n")
    with pytest.raises(ValueError, match="dt"):
        io.read_dataset(tmp_path / "d.csv")


def test_content_hash_matches_git():
    # `printf 'hello\n' | git hash-object --stdin`
    assert io.content_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_run_writes_outputs_and_manifest(tmp_path, tiny_file, capsys):
    code = cli.main(["run", "--config", str(tiny_file), "--out", str(tmp_path / "o"), "--seed", "2", "--max-iters", "1"])
    assert code == cli.EXIT_OK
    out = tmp_path / "o" / "tiny" / "gp-ilqg" / "seed2"
    for name in ("cost_curve.csv", "trajectory.csv", "nominal.csv", "policy.npz", "config.yaml",
                 "hyperparams.yaml", "dataset.csv", "manifest.yaml", "datasets/iter_01.csv"):
        assert (out / name).is_file(), name
    man = io.read_manifest(out / "manifest.yaml")
    assert man["config"].seeds == [2] and man["config"].max_iters == 1
    assert man["config_hash"] == io.content_hash((out / "config.yaml").read_text())
    for rel, digest in man["files"].items():
        assert io.file_checksum(out / rel) == digest
    rows = io.read_cost_curve(out / "cost_curve.csv")
    assert [r["iteration"] for r in rows] == [0, 1]
    assert "normalized_cost=" in capsys.readouterr().out

    # the saved policy re-evaluates to the last logged cost
    capsys.readouterr()
    code = cli.main(["eval", "--config", str(out / "config.yaml"), "--policy", str(out / "policy.npz"), "--seed", "2"])
    assert code == cli.EXIT_OK
    mean = float(capsys.readouterr().out.splitlines()[1].split(",")[0])
    assert mean == rows[-1]["mean_cost"]


def test_run_is_byte_deterministic(tmp_path, tiny_file):
    for d in ("a", "b"):
        assert cli.main(["run", "--config", str(tiny_file), "--out", str(tmp_path / d), "--max-iters", "1"]) == 0
    base = [tmp_path / d / "tiny" / "gp-ilqg" / "seed0" for d in ("a", "b")]
    for name in ("cost_curve.csv", "trajectory.csv", "dataset.csv", "hyperparams.yaml", "config.yaml"):
        assert (base[0] / name).read_bytes() == (base[1] / name).read_bytes(), name


def test_sweep_and_transfer(tmp_path, tiny_file):
    out = tmp_path / "o"
    assert cli.main(["sweep", "--config", str(tiny_file), "--out", str(out), "--seeds", "0..1", "--max-iters", "1"]) == 0
    rows = io.read_cost_curve(out / "tiny" / "cost_curve.csv")
    assert {(r["mode"], r["seed"]) for r in rows} == {(m, s) for m in MODES for s in (0, 1)}
    assert all(r["normalized_cost"] == 1.0 for r in rows if r["mode"] == "ilqg-sim")

    src = out / "tiny" / "gp-ilqg" / "seed0"
    code = cli.main([
        "transfer", "--config", str(tiny_file), "--out", str(out), "--max-iters", "1",
        "--dataset", str(src / "dataset.csv"), "--hyperparams", str(src / "hyperparams.yaml"),
    ])
    assert code == 0
    moved = out / "tiny" / "gp-ilqg-transfer" / "seed0"
    assert len(io.read_dataset(moved / "dataset.csv")) > len(io.read_dataset(src / "dataset.csv"))


def test_exit_codes(tmp_path, tiny_file, monkeypatch):
    bad = tmp_path / "bad.yaml"
    bad.write_text("task: x\nhorizon: -1\n")
    assert cli.main(["run", "--task", "cartpole-1", "--config", str(bad), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--task", "no-such-task"]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--config", str(tiny_file), "--mode", "ilqg-true", "--out", str(tiny_file)]) == cli.EXIT_IO
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--mode", "bogus"])
    assert exc.value.code == 2

    def fail(*a, **k):
        raise SolverError("forced")

    monkeypatch.setattr("gpilqg.loop.solve", fail)
    out = tmp_path / "s"
    assert cli.main(["run", "--config", str(tiny_file), "--mode", "ilqg-true", "--out", str(out)]) == cli.EXIT_SOLVER


def test_out_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.main(["gp-demo"]) == 0
    assert (tmp_path / "env" / "gp-demo" / "grid.csv").is_file()


def test_gp_demo_reverts_to_mean_function():
    table, obs, model = cli.gp_demo_data()
    x, true, mean_fn, post, lo, hi = table.T
    assert np.all(lo <= post) and np.all(post <= hi)
    far = np.abs(x) > 7.5
    assert_allclose(post[far], mean_fn[far], atol=1e-6)
    # wide bands far away, tight near the data
    near = np.abs(x - obs[2, 0]) < 0.05
    assert np.max((hi - lo)[near]) < 0.3 * np.min((hi - lo)[far])
    idx = [np.argmin(np.abs(x - xo)) for xo in obs[:, 0]]
    assert np.max(np.abs(post[idx] - true[idx])) < 0.1
