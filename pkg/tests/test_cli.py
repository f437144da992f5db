import csv
import json

import numpy as np
import pytest

from fluidsched.cli import main, read_control, write_control
from fluidsched.data import bonferroni_ci, synthetic_records, write_records
from fluidsched.distributions import Normal, Uniform
from fluidsched.fluid import Grid

NORMAL = """
[problem]
mu = 100.0
r = 0.0

[model]
kind = "normal"
mean = -0.1
sd = 0.05

[grid]
K = {K}

[simulate]
service = "exponential"
replications = 20
seed = 3
"""


def _config(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _files(d):
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_solve_normal_scenario(tmp_path):
    cfg = _config(tmp_path, NORMAL.format(K=1000))
    assert main(["solve", "--config", cfg, "--out-dir", str(tmp_path / "out")]) == 0
    out = tmp_path / "out"
    assert len(_rows(out / "profile.csv")) == 1001
    assert len(_rows(out / "control.csv")) == 1000
    sol = json.loads((out / "solution.json").read_text())
    assert sol["drift"] <= 1e-6 and sol["K"] == 1000
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "solve" and man["config"]["model"]["kind"] == "normal"
    assert len(man["inputs"]["config"]["sha256"]) == 64


def test_reward_sweep_mass_nondecreasing(tmp_path):
    text = NORMAL.format(K=1000).replace("r = 0.0", "rewards = [0.0, 1.0, 1.2, 1.5]")
    cfg = _config(tmp_path, text)
    assert main(["solve", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    sweep = json.loads((tmp_path / "sweep.json").read_text())
    assert [s["r"] for s in sweep] == [0.0, 1.0, 1.2, 1.5]
    for r in ("0", "1", "1.2", "1.5"):
        assert len(_rows(tmp_path / f"r_{r}" / "profile.csv")) == 1001
    mass = [s["total_mass"] for s in sweep]
    assert all(b >= a - 1e-6 for a, b in zip(mass, mass[1:]))


@pytest.mark.parametrize("r", [0.0, 1.2])
def test_zero_unpunctuality_close_to_closed_form(tmp_path, r):
    text = f"[problem]\nr = {r}\n[model]\nkind = \"point_mass\"\n[grid]\nK = 1000\n"
    cfg = _config(tmp_path, text)
    assert main(["solve", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    sol = json.loads((tmp_path / "solution.json").read_text())
    # upper_bound is the closed-form value; 0.5% of 0 is read as an absolute 1e-2
    assert abs(sol["value"] - sol["upper_bound"]) <= max(0.005 * abs(sol["upper_bound"]), 1e-2)


def _control_file(tmp_path, a, name="control.csv"):
    path = tmp_path / name
    write_control(path, Grid(len(a)), np.asarray(a, dtype=float))
    return str(path)


def _times(path):
    return [float(line.split()[1]) for line in open(path) if not line.startswith("#")]


def test_schedule_linear_profile(tmp_path):
    ctl = _control_file(tmp_path, np.full(100, 1.0))
    assert main(["schedule", ctl, "--out-dir", str(tmp_path)]) == 0
    t = _times(tmp_path / "schedule.txt")
    assert len(t) == 100
    assert np.allclose(np.diff(t), 0.01)


def test_schedule_single_atom_and_scale(tmp_path):
    a = np.zeros(10)
    a[5] = 10.0
    ctl = _control_file(tmp_path, a)
    assert main(["schedule", ctl, "--out-dir", str(tmp_path / "s1")]) == 0
    assert _times(tmp_path / "s1" / "schedule.txt") == [0.5] * 10
    assert main(["schedule", ctl, "--scale", "2", "--out-dir", str(tmp_path / "s2")]) == 0
    assert _times(tmp_path / "s2" / "schedule.txt") == [0.5] * 20


def test_control_roundtrip(tmp_path):
    a = np.random.default_rng(0).random(7)
    grid, back = read_control(_control_file(tmp_path, a))
    assert grid.K == 7 and np.array_equal(back, a)


def test_simulate_empty_schedule(tmp_path):
    cfg = _config(tmp_path, NORMAL.format(K=100))
    sched = tmp_path / "empty.txt"
    sched.write_text("# horizon 1.0\n")
    assert main(["simulate", str(sched), "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["objective_mean"] == -50.0
    assert summary["replications"] == 20


def _pipeline(cfg, out):
    assert main(["solve", "--config", cfg, "--out-dir", str(out / "solve")]) == 0
    assert main(["schedule", str(out / "solve" / "control.csv"), "--scale", "1",
                 "--out-dir", str(out / "sched")]) == 0
    assert main(["simulate", str(out / "sched" / "schedule.txt"), "--config", cfg,
                 "--seed", "9", "--out-dir", str(out / "sim")]) == 0


def test_pipeline_rerun_byte_identical(tmp_path):
    cfg = _config(tmp_path, NORMAL.format(K=200))
    out = tmp_path / "run"
    _pipeline(cfg, out)
    first = _files(out)
    _pipeline(cfg, out)
    assert _files(out) == first


def test_simulate_seed_override_changes_output(tmp_path):
    cfg = _config(tmp_path, NORMAL.format(K=100))
    sched = tmp_path / "s.txt"
    sched.write_text("# horizon 1.0\n0 0.1\n1 0.5\n2 0.9\n")
    for seed, sub in (("1", "a"), ("2", "b")):
        main(["simulate", str(sched), "--config", cfg, "--seed", seed,
              "--out-dir", str(tmp_path / sub)])
    assert (tmp_path / "a" / "replications.csv").read_bytes() != \
        (tmp_path / "b" / "replications.csv").read_bytes()


def test_simulate_horizon_mismatch(tmp_path, capsys):
    cfg = _config(tmp_path, NORMAL.format(K=100))
    sched = tmp_path / "s.txt"
    sched.write_text("# horizon 2.0\n0 0.1\n")
    assert main(["simulate", str(sched), "--config", cfg, "--out-dir", str(tmp_path)]) == 4
    assert "horizon" in capsys.readouterr().err


def test_gap_study(tmp_path):
    text = NORMAL.format(K=200) + "scales = [2.0, 8.0]\nseed_groups = 2\n"
    cfg = _config(tmp_path, text)
    assert main(["gap-study", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "gap.csv")
    assert len(rows) == 4
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["groups"] == 2 and len(s["mean_gap"]) == 2


COMPARE = """
[model]
kind = "uniform"
lo = -0.1
hi = 0.1

[compare]
replications = {reps}
min_patients_per_day = 20
policies = {policies}
model = "{source}"
"""


def _dataset(tmp_path, model, days, patients, seed=0):
    path = tmp_path / "data.csv"
    write_records(synthetic_records(model, days, patients, seed), path)
    return str(path)


def test_compare_end_to_end(tmp_path):
    data = _dataset(tmp_path, Normal(-0.05, 0.05), 5, 40)
    cfg = _config(tmp_path, COMPARE.format(reps=5, policies='["Actual", "ZU", "QP"]',
                                           source="empirical"))
    out = tmp_path / "out"
    assert main(["compare", data, "--config", cfg, "--out-dir", str(out)]) == 0
    rows = _rows(out / "table.csv")
    assert [float(r["c_i"]) for r in rows] == [50, 75, 100, 150]
    ing = json.loads((out / "ingest.json").read_text())
    assert ing["days"] == 5 and ing["records"] == 200
    assert "Bonferroni" in (out / "table.txt").read_text()
    out2 = tmp_path / "out2"
    assert main(["compare", data, "--config", cfg, "--out-dir", str(out2)]) == 0
    assert _files(out) == _files(out2)


def test_compare_identical_policies(tmp_path):
    data = _dataset(tmp_path, Normal(-0.05, 0.05), 5, 40)
    cfg = _config(tmp_path, COMPARE.format(reps=5, policies='["Actual", "QP", "QP@copy"]',
                                           source="empirical"))
    assert main(["compare", data, "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    for r in _rows(tmp_path / "table.csv"):
        assert r["QP_cost"] == r["QP@copy_cost"]
        assert r["QP_rel_imp"] == r["QP@copy_rel_imp"]


def test_compare_uniform_truth_qp_not_worse(tmp_path):
    data = _dataset(tmp_path, Uniform(-0.1, 0.1), 10, 100, seed=1)
    cfg = _config(tmp_path, COMPARE.format(reps=50, policies='["Actual", "ZU", "QP"]',
                                           source="config"))
    assert main(["compare", data, "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    reps = _rows(tmp_path / "replications.csv")
    for c_i in (50.0, 75.0, 100.0, 150.0):
        diffs = []
        for day in sorted({r["day_id"] for r in reps}):
            def mean(p):
                return np.mean([float(r["cost"]) for r in reps if r["day_id"] == day
                                and r["policy"] == p and float(r["c_i"]) == c_i])
            diffs.append(mean("QP") - mean("ZU"))
        m, h = bonferroni_ci(diffs)
        assert m[0] <= h[0], f"c_i={c_i:g}: QP costs {m[0]:.3f} ± {h[0]:.3f} more than ZU"


def test_compare_strict_bad_row(tmp_path):
    data = tmp_path / "bad.csv"
    data.write_text("clinic_id,doctor_id,day_id,scheduled,arrived\nc,d,1,9.0,\n")
    cfg = _config(tmp_path, COMPARE.format(reps=5, policies='["Actual", "ZU"]', source="empirical"))
    assert main(["compare", str(data), "--config", cfg, "--strict", "--out-dir",
                 str(tmp_path)]) == 4


@pytest.mark.parametrize("text", ["[problem]\nmu = -1\n", "[problem]\nbogus = 1\n",
                                  "[model]\nkind = \"cauchy\"\n", "not toml ["])
def test_config_errors_exit_2(tmp_path, text, capsys):
    cfg = _config(tmp_path, text)
    assert main(["solve", "--config", cfg, "--out-dir", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_exit_2(tmp_path):
    assert main(["solve", "--config", str(tmp_path / "none.toml")]) == 2


def test_missing_control_exit_4(tmp_path):
    assert main(["schedule", str(tmp_path / "none.csv"), "--out-dir", str(tmp_path)]) == 4


def test_solver_failure_exit_3(tmp_path, monkeypatch):
    from fluidsched import cli
    from fluidsched.admm import SolverError

    def boom(*args, **kwargs):
        raise SolverError("no convergence", [])
    monkeypatch.setattr(cli, "solve", boom)
    cfg = _config(tmp_path, NORMAL.format(K=50))
    assert main(["solve", "--config", cfg, "--out-dir", str(tmp_path)]) == 3
