import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from randsketch.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, heldout_accuracy, heldout_loss, main
from randsketch.nn import DenseLinear, Model, ReLU, SkLinear, model_load, model_save


def run(*argv):
    return main([str(a) for a in argv])


def test_help_mentions_default_trials(capsys):
    assert run("bench", "linear", "--help") == EXIT_OK
    assert "default 200" in capsys.readouterr().out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "randsketch", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "bench" in proc.stdout


def test_usage_errors_exit_one(tmp_path):
    assert run() == EXIT_USAGE
    assert run("bench", "linear", "--din", "x", "--dout", "4", "--out", tmp_path / "a.csv") == EXIT_USAGE
    assert run("bench", "decomp", "--kind", "cqrrpt", "--rows", 10, "--cols", 20, "--out", tmp_path / "b.csv") == EXIT_USAGE
    assert run("bench", "attention", "--dmodel", 8, "--heads", 2, "--seqlen", 4, "--kernel", "cosine",
               "--out", tmp_path / "c.csv") == EXIT_USAGE
    assert run("bench", "linear", "--din", 8, "--dout", 8, "--trials", 0, "--out", tmp_path / "d.csv") == EXIT_USAGE


def test_bench_linear_writes_csv(tmp_path, capsys):
    out = tmp_path / "lin.csv"
    code = run("bench", "linear", "--din", 64, "--dout", 64, "--l", "1,2", "--k", "8,16",
               "--batch", 4, "--trials", 3, "--warmup", 1, "--out", out)
    assert code == EXIT_OK
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 5
    assert [r["skipped"] for r in rows] == ["false", "false", "false", "false", "true"]
    assert "wrote 5 records" in capsys.readouterr().out


def test_bench_conv_and_decomp(tmp_path):
    assert run("bench", "conv", "--cin", 4, "--cout", 8, "--kernel", 3, "--image", 8, "--l", 1, "--k", 4,
               "--trials", 2, "--warmup", 0, "--out", tmp_path / "c.csv") == EXIT_OK
    assert run("bench", "decomp", "--kind", "rsvd", "--rows", 60, "--cols", 40, "--rank", 5,
               "--trials", 2, "--warmup", 0, "--out", tmp_path / "d.csv") == EXIT_OK
    row = next(csv.DictReader(open(tmp_path / "d.csv")))
    assert float(row["recon_rel_err"]) <= 1e-8


def test_bench_attention_budget(tmp_path):
    out = tmp_path / "a.csv"
    assert run("bench", "attention", "--dmodel", 16, "--heads", 2, "--features", 8, "--kernel", "relu",
               "--seqlen", "4,64", "--mem-budget", 100_000, "--trials", 2, "--warmup", 0, "--out", out) == EXIT_OK
    rows = list(csv.DictReader(open(out)))
    assert [(r["impl"], r["N"], r["skip_reason"]) for r in rows] == [
        ("dense", "4", ""), ("sketched", "4", ""), ("dense", "64", "memory-budget"), ("sketched", "64", ""),
    ]


def test_unwritable_output_is_runtime_error(tmp_path):
    code = run("bench", "linear", "--din", 16, "--dout", 16, "--l", 1, "--k", 2, "--trials", 1, "--warmup", 0,
               "--out", tmp_path / "missing" / "x.csv")
    assert code == EXIT_RUNTIME


def test_model_inspect(tmp_path, capsys):
    path = tmp_path / "m.json"
    model_save(Model([("fc", SkLinear.init(8, 4, 1, 2, seed=3))]), path)
    assert run("model", "inspect", path) == EXIT_OK
    manifest = json.loads(capsys.readouterr().out)
    assert manifest["layers"][0]["kind"] == "SkLinear"
    (tmp_path / "bad.json").write_text("{}")
    assert run("model", "inspect", tmp_path / "bad.json") == EXIT_RUNTIME


def test_heldout_metrics():
    model = Model([("fc", DenseLinear(np.array([[1.0, 0.0]]), np.zeros(1)))])
    x = np.array([[2.0, -2.0], [0.0, 0.0]])
    y = np.array([1, 0])
    assert heldout_loss(model, x, y) == pytest.approx(np.log1p(np.exp(-2.0)))
    assert heldout_accuracy(model, x, y) == 1.0
    two = Model([("fc", DenseLinear(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.zeros(2)))])
    assert heldout_accuracy(two, x, np.array([0, 1])) == 1.0
    assert heldout_loss(two, x, np.array([0, 1])) == pytest.approx(np.log1p(np.exp(-4.0)))


@pytest.fixture
def saved_mlp(tmp_path):
    g = np.random.default_rng(0)
    model = Model([("fc1", DenseLinear.init(32, 64, seed=1)), ("act", ReLU()), ("fc2", DenseLinear.init(64, 2, seed=2))])
    path = tmp_path / "mlp.json"
    model_save(model, path)
    x = g.standard_normal((50, 32))
    y = (x[:, 0] > 0).astype(int)
    np.savez(tmp_path / "data.npz", x=x, y=y)
    return model, path, tmp_path


def test_tune_end_to_end(saved_mlp, capsys):
    model, path, tmp = saved_mlp
    out_model, report = tmp / "small.json", tmp / "report.csv"
    code = run("tune", "--model", path, "--data", tmp / "data.npz", "--select", "type:Linear", "--params", "auto",
               "--search", "grid", "--threshold", 100.0, "--seed", 5, "--out-model", out_model, "--report", report)
    assert code == EXIT_OK
    text = capsys.readouterr().out
    assert "skipped fc2: unsketchable" in text
    small = model_load(out_model)
    assert isinstance(small["fc1"], SkLinear) and small["fc1"].low_rank == 8
    rows = list(csv.DictReader(open(report)))
    assert [(r["layer"], r["l"], r["k"]) for r in rows] == [("fc1", "1", "8")]


def test_tune_explicit_pairs_joint(saved_mlp):
    _, path, tmp = saved_mlp
    report = tmp / "joint.csv"
    code = run("tune", "--model", path, "--data", tmp / "data.npz", "--select", "pattern:fc.", "--params", "1:2,1:4",
               "--joint", "--search", "grid", "--threshold", 100.0, "--report", report)
    assert code == EXIT_OK
    rows = list(csv.DictReader(open(report)))
    assert len(rows) == 8 and {r["trial_index"] for r in rows} == {"0", "1", "2", "3"}


def test_tune_infeasible_is_runtime_error(saved_mlp, capsys):
    _, path, tmp = saved_mlp
    code = run("tune", "--model", path, "--data", tmp / "data.npz", "--select", "names:fc1",
               "--metric", "accuracy", "--higher-is-better", "--threshold", 1.1, "--n-trials", 3)
    assert code == EXIT_RUNTIME
    assert "threshold" in capsys.readouterr().err


def test_tune_bad_selector_is_usage_error(saved_mlp):
    _, path, tmp = saved_mlp
    assert run("tune", "--model", path, "--data", tmp / "data.npz", "--select", "names:nope", "--threshold", 1) == EXIT_USAGE
    assert run("tune", "--model", path, "--data", tmp / "data.npz", "--select", "junk", "--threshold", 1) == EXIT_USAGE
    assert run("tune", "--model", path, "--data", tmp / "data.npz", "--select", "type:Linear",
               "--params", "1-8", "--threshold", 1) == EXIT_USAGE


def test_tune_missing_data_arrays(saved_mlp):
    _, path, tmp = saved_mlp
    np.savez(tmp / "bad.npz", a=np.zeros(3))
    assert run("tune", "--model", path, "--data", tmp / "bad.npz", "--select", "type:Linear", "--threshold", 1) == EXIT_USAGE
