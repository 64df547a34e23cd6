import math
import subprocess
import sys

import numpy as np
import pytest

from eldp import experiments as ex
from eldp.accountant import gaussian_sigma_squared, sgd_epsilon
from eldp.cli import main, read_counts, read_pairs


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def counts_files(tmp_path):
    counts, part = tmp_path / "c.csv", tmp_path / "p.tsv"
    assert run("gen", "counts", "--n", 40, "--m", 6, "--d", 12, "--K", 3, "--seed", 1,
               "--partition", part, "-o", counts) == 0
    return counts, part


def test_gen_counts_shape(counts_files):
    counts, part = counts_files
    items, arr = read_counts(counts)
    assert items[:2] == ["i0", "i1"] and arr.shape == (40, 12)
    assert np.all(arr.sum(axis=1) == 6)
    assert len(part.read_text().splitlines()) == 12


def test_read_counts_without_header(tmp_path):
    f = tmp_path / "c.csv"
    f.write_text("1,2\n0,3\n")
    items, arr = read_counts(f)
    assert items == ["0", "1"] and arr.tolist() == [[1, 2], [0, 3]]


def test_heavy_hitters_release_and_budget(counts_files, tmp_path):
    counts, part = counts_files
    out = tmp_path / "h.csv"
    assert run("heavy-hitters", counts, "--partition", part, "--eps", 1, "--delta", 1e-5, "-o", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "item,value" and len(lines) == 14
    budget = dict(kv.split("=") for kv in lines[-1].split()[2:])
    assert float(budget["sensitivity"]) == pytest.approx(2.0)  # 12 items in 3 blocks of 4
    assert float(budget["sigma"]) == pytest.approx(2.0 * math.sqrt(gaussian_sigma_squared(1.0, 1e-5)))


def test_heavy_hitters_rejects_small_rho(counts_files, capsys):
    counts, part = counts_files
    assert run("heavy-hitters", counts, "--partition", part, "--eps", 1, "--rho", 1.0) == 2
    assert "sensitivity" in capsys.readouterr().err


def test_histogram_is_deterministic(counts_files, tmp_path):
    counts, part = counts_files
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for f in (a, b):
        assert run("histogram", counts, "--partition", part, "--eps", 1, "--rho", 3, "--seed", 5, "-o", f) == 0
    assert a.read_bytes() == b.read_bytes()


def test_histogram_requires_rho(counts_files):
    counts, part = counts_files
    with pytest.raises(SystemExit) as e:
        run("histogram", counts, "--partition", part, "--eps", 1)
    assert e.value.code == 2


def test_account_command(tmp_path):
    plan = tmp_path / "acct.toml"
    plan.write_text('delta = 1e-5\n[[events]]\nmechanism = "subsampled-gaussian"\nq = 0.01\nsigma = 1.1\nT = 1000\n')
    out = tmp_path / "o.csv"
    assert run("account", plan, "-o", out) == 0
    row = ex.read_csv(out)[0]
    assert float(row["epsilon"]) == pytest.approx(sgd_epsilon(1000, 0.01, 1.1, 1e-5), rel=1e-9)
    assert float(row["delta"]) == 1e-5


@pytest.mark.parametrize("body", ["delta = 1e-5\n", 'delta = 1e-5\n[[events]]\nmechanism = "x"\nsigma = 1\n',
                                  "delta = \n", '[[events]]\nmechanism = "gaussian"\nsigma = 1\n'])
def test_account_config_errors_exit_2(tmp_path, body, capsys):
    plan = tmp_path / "bad.toml"
    plan.write_text(body)
    assert run("account", plan) == 2
    assert str(plan) in capsys.readouterr().err


def test_missing_file_exits_2(tmp_path):
    assert run("account", tmp_path / "nope.toml") == 2


def test_sgd_sim_matches_library_and_reproduces(tmp_path):
    args = ["sgd-sim", "--n", 40, "--m", 6, "--K", 4, "--k-per-user", 2, "--dim", 3, "--T", 15,
            "--eps", 2, "--seed", 3, "--replicates", 2]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(*args, "-o", a) == 0 and run(*args, "-o", b) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = ex.read_csv(a)
    setup = ex.LogisticSetup(n=40, m=6, K=4, k_per_user=2, dim=3, T=15)
    lib = ex.logistic_trial(setup, 2.0, ex.default_delta(40), 4)
    assert float(rows[1]["error"]) == lib["error"]


def test_sgd_sim_on_generated_pairs(tmp_path):
    pairs, truth = tmp_path / "pairs.csv", tmp_path / "truth.txt"
    assert run("gen", "logistic", "--n", 30, "--m", 5, "--K", 4, "--k-per-user", 2, "--dim", 3, "--seed", 2,
               "-o", pairs, "--truth", truth) == 0
    sample = read_pairs(pairs)
    assert sample.n == 30 and sample.dim == 3
    out = tmp_path / "o.csv"
    assert run("sgd-sim", "--data", pairs, "--truth", truth, "--T", 10, "--K", 4, "--m", 5,
               "--privacy", "none", "-o", out) == 0
    row = ex.read_csv(out)[0]
    assert row["eps"] == "inf" and float(row["error"]) >= 0


def test_sgd_sim_unknown_config_field(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[setup]\nlearning_rate = 1\n")
    assert run("sgd-sim", "--config", cfg) == 2


def test_run_plan_and_summarize(tmp_path):
    plan = tmp_path / "plan.toml"
    plan.write_text('experiment = "histogram"\neps = [1.0]\nreplicates = 3\n'
                    '[setup]\nn = 60\nm = 8\nd = 16\n[[variants]]\nK = 1\n[[variants]]\nK = 4\n')
    res, summ = tmp_path / "r.csv", tmp_path / "s.csv"
    assert run("run-plan", plan, "-o", res) == 0
    rows = ex.read_csv(res)
    assert len(rows) == 6 and "wall_time" not in rows[0]
    assert run("summarize", res, "--by", "K", "--value", "mse", "-o", summ) == 0
    s = ex.read_csv(summ)
    assert [r["K"] for r in s] == ["1", "4"] and all(r["n"] == "3" for r in s)
    again = tmp_path / "r2.csv"
    assert run("run-plan", plan, "-o", again) == 0 and again.read_bytes() == res.read_bytes()
    assert run("summarize", res, "--by", "nope", "--value", "mse") == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "eldp", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "run-plan" in out.stdout
