import csv
import json
from pathlib import Path

import numpy as np
import pytest

from dyneq.cli import main


def run_cli(*args):
    return main([str(a) for a in args])


@pytest.fixture()
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert run_cli("gen", "toy-longrange", "--T", 4, "--seed", 1, "--out", out) == 0
    return out


def test_gen_writes_dataset_and_run_json(data_dir):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["n"] == 10 and manifest["T"] == 4
    run = json.loads((data_dir / "run.json").read_text())
    assert run["command"] == "gen"
    assert run["args"]["num_snapshots"] == 4
    assert "backend" in run and "package_version" in run


def test_gen_rejects_unknown_generator(tmp_path, capsys):
    with pytest.raises(SystemExit):
        run_cli("gen", "nosuch", "--T", 3, "--out", tmp_path / "x")


def test_train_writes_log_params_metrics(tmp_path, data_dir):
    out = tmp_path / "run"
    code = run_cli(
        "train", "--data", data_dir, "--out", out,
        "--trainer", "bilevel", "--steps", 5, "--deterministic",
    )
    assert code == 0
    with open(out / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5
    assert list(rows[0]) == ["step", "loss", "residual", "wall_ms"]
    assert all(r["wall_ms"] == "0.0" for r in rows)
    assert (out / "params.npz").exists()
    metrics = json.loads((out / "metrics.json").read_text())
    assert "accuracy" in metrics


def test_deterministic_reruns_are_byte_identical(tmp_path, data_dir):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    args = ["train", "--data", data_dir, "--trainer", "sgd", "--steps", 3,
            "--deterministic", "--seed", 5]
    assert run_cli(*args, "--out", out1) == 0
    assert run_cli(*args, "--out", out2) == 0
    assert (out1 / "train_log.csv").read_bytes() == (out2 / "train_log.csv").read_bytes()
    assert (out1 / "metrics.json").read_bytes() == (out2 / "metrics.json").read_bytes()


def test_config_file_replays_run(tmp_path, data_dir):
    out1 = tmp_path / "orig"
    assert run_cli(
        "train", "--data", data_dir, "--out", out1, "--trainer", "bilevel",
        "--steps", 4, "--lr", 0.1, "--deterministic", "--seed", 7,
    ) == 0
    # A previous run.json works directly as --config; flags given on the
    # command line (here: the output directory) win over the file.
    out2 = tmp_path / "replay"
    assert run_cli("train", "--config", out1 / "run.json", "--out", out2) == 0
    assert (out1 / "train_log.csv").read_bytes() == (out2 / "train_log.csv").read_bytes()
    run2 = json.loads((out2 / "run.json").read_text())
    assert run2["args"]["lr"] == 0.1
    assert run2["args"]["steps"] == 4


def test_config_flag_overrides_file(tmp_path, data_dir):
    cfgfile = tmp_path / "c.json"
    cfgfile.write_text(json.dumps({"steps": 4, "trainer": "bilevel", "deterministic": True}))
    out = tmp_path / "o"
    assert run_cli(
        "train", "--data", data_dir, "--out", out, "--config", cfgfile, "--steps", 2,
    ) == 0
    run = json.loads((out / "run.json").read_text())
    assert run["args"]["steps"] == 2
    assert run["args"]["trainer"] == "bilevel"


def test_eval_writes_metrics_and_embeddings(tmp_path, data_dir):
    run_dir = tmp_path / "run"
    assert run_cli(
        "train", "--data", data_dir, "--out", run_dir, "--steps", 3, "--deterministic",
    ) == 0
    eval_dir = tmp_path / "eval"
    assert run_cli(
        "eval", "--data", data_dir, "--params", run_dir / "params.npz",
        "--out", eval_dir, "--which", "all",
    ) == 0
    metrics = json.loads((eval_dir / "metrics.json").read_text())
    assert "accuracy" in metrics and "dirichlet_energy" in metrics
    with open(eval_dir / "embeddings.csv") as fh:
        rows = list(csv.reader(fh))
    # Header plus one row per node; one column per embedding dimension.
    assert len(rows) == 1 + 10
    assert len(rows[0]) == 16
    assert rows[0][0] == "dim_0"
    values = np.array([[float(x) for x in r] for r in rows[1:]])
    assert np.all(np.isfinite(values))


def test_eval_zero_recurrence_embeddings_match_input_projection(tmp_path, data_dir):
    # Save parameters with zero recurrence weights: the equilibrium
    # embeddings must equal activation(V X) of the final snapshot.
    from dyneq.graphs import load_dataset
    from dyneq.model import get_activation, init_params, save_params

    params = init_params(4, 10, 10, hidden_dim=3, seed=2)
    for w in params.weights:
        w[:] = 0.0
    pfile = tmp_path / "zero.npz"
    save_params(params, pfile)
    eval_dir = tmp_path / "eval0"
    assert run_cli(
        "eval", "--data", data_dir, "--params", pfile, "--out", eval_dir, "--which", "all",
    ) == 0
    with open(eval_dir / "embeddings.csv") as fh:
        rows = list(csv.reader(fh))
    values = np.array([[float(x) for x in r] for r in rows[1:]])  # (n, d)
    ds = load_dataset(data_dir)
    act = get_activation(params.activation)
    expected = act.f(params.input_maps[0] @ ds.graphs[0].snapshots[-1].features)
    np.testing.assert_allclose(values.T, expected, atol=1e-12)


def test_train_with_validation_keeps_best_params(tmp_path, data_dir):
    out = tmp_path / "val"
    code = run_cli(
        "train", "--data", data_dir, "--out", out, "--steps", 6,
        "--split", "transductive", "--val-every", 2, "--deterministic",
    )
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["num_nodes_evaluated"] == 1  # 10 nodes, 10% validation


def test_bench_writes_timings_and_slopes(tmp_path):
    out = tmp_path / "bench"
    code = run_cli(
        "bench", "--out", out, "--sizes", "10,20", "--trainers", "bilevel",
        "--timed-steps", 2, "--warmup-steps", 1, "--hidden-dim", 4,
    )
    assert code == 0
    with open(out / "timings.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert list(rows[0]) == ["trainer", "num_nodes", "step_ms", "backend"]
    slopes = json.loads((out / "slopes.json").read_text())
    assert "bilevel" in slopes["slopes"]


def test_bench_repeats_alias_and_timing_stability(tmp_path):
    # One timed step and five timed steps agree within 50% per size.
    t = {}
    for reps, name in ((1, "a"), (5, "b")):
        out = tmp_path / name
        assert run_cli(
            "bench", "--out", out, "--sizes", "15", "--trainers", "bilevel",
            "--repeats", reps, "--hidden-dim", 4,
        ) == 0
        with open(out / "timings.csv") as fh:
            t[reps] = float(next(csv.DictReader(fh))["step_ms"])
    assert abs(t[1] - t[5]) / max(t[1], t[5]) <= 0.5


def test_oracle_check_exits_zero():
    assert run_cli("oracle-check", "--seed", 0) == 0


def test_missing_params_file_reports_error(tmp_path, data_dir, capsys):
    code = run_cli(
        "eval", "--data", data_dir, "--params", tmp_path / "nope.npz",
        "--out", tmp_path / "x",
    )
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_bad_dataset_reports_error(tmp_path, capsys):
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "manifest.json").write_text("{}")
    code = run_cli("train", "--data", bad, "--out", tmp_path / "o", "--steps", 1)
    assert code == 1
    assert "error:" in capsys.readouterr().err
