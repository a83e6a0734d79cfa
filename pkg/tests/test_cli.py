import csv
import json
import math

import numpy as np
import pytest

from mobilemc import cli
from mobilemc.channel import table1_env
from mobilemc.cir_stats import CirStatistics
from mobilemc.drug_delivery import DrugDesignResult
from mobilemc.numerics import NonConvergenceError

ENV = """env:
  D_Tx_m2_per_s: 1.0e-14
  D_Rx_m2_per_s: {d_rx}
  D_X_m2_per_s: 8.0e-11
  a_tx_m: 1.0e-7
  a_rx_m: 1.0e-6
  r0_m: 1.0e-5
"""

CHANNEL = ENV.format(d_rx=0.0) + """channel_stats:
  t_list_s: [36, 360]
  tau_grid_s: {start: 0.1, stop: 1.0, num: 4}
  pdf_tau_s: 0.17
  h_points: 5
simulate:
  realizations: 2000
  t_list_s: [36]
  tau_grid_s: [0.17, 0.5]
  trajectory_horizon_s: 2.0
  step_s: 0.5
"""

DRUG = ENV.format(d_rx=0.0) + """drug:
  T_s: 5760
  T_Rx_s: 5760
  I: 20
  N: 3
  beta: 1
  theta_per_s: 1.0
drug_eval:
  between_releases: [5, 6]
  num: 3
  grid_resolution: 256
  monte_carlo_realizations: 500
"""

LINK = ENV.format(d_rx=1.0e-11) + """link:
  I: 8
  T_b_s: 10
  eta: 1
  A: 800
  psi: 0.02
  P: 0.8
  psi_list: [0.01, 0.02]
  t_grid_s: [10, 100]
"""


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_channel_stats_outputs(tmp_path):
    conf = write(tmp_path, "c.yaml", CHANNEL)
    out = tmp_path / "out"
    assert run("channel-stats", "--config", conf, "--out", out) == 0
    rows = read_csv(out / "moments.csv")
    assert len(rows) == 8
    stats = CirStatistics(table1_env())
    r = rows[5]
    t, tau = float(r["t_s"]), float(r["tau_s"])
    assert float(r["mean_per_s"]) == pytest.approx(stats.mean(t, tau), rel=1e-10)
    assert float(r["var_per_s2"]) == pytest.approx(stats.variance(t, tau), rel=1e-4)
    dist = read_csv(out / "distribution.csv")
    assert len(dist) == 10
    assert float(dist[4]["cdf"]) == 1.0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "channel-stats"
    assert manifest["outputs"] == ["distribution.csv", "moments.csv"]


def test_simulate_is_deterministic_per_seed(tmp_path):
    conf = write(tmp_path, "c.yaml", CHANNEL)
    for name, seed in (("a", 0), ("b", 0), ("c", 1)):
        assert run("simulate", "--config", conf, "--out", tmp_path / name, "--seed", seed) == 0
    a = (tmp_path / "a" / "mc_moments.csv").read_text()
    assert a == (tmp_path / "b" / "mc_moments.csv").read_text()
    assert a != (tmp_path / "c" / "mc_moments.csv").read_text()
    traj = read_csv(tmp_path / "a" / "trajectory.csv")
    assert len(traj) == 5
    assert float(traj[0]["distance_m"]) == pytest.approx(1e-5)
    assert (tmp_path / "a" / "mc_cdf.csv").exists()


def test_drug_design_and_evaluation(tmp_path):
    conf = write(tmp_path, "d.yaml", DRUG)
    out = tmp_path / "design"
    assert run("drug-design", "--config", conf, "--out", out) == 0
    prof = read_csv(out / "release_profile.csv")
    assert len(prof) == 20
    summary = read_csv(out / "design_summary.csv")[0]
    assert int(summary["total_A"]) == sum(int(r["alpha"]) for r in prof)
    assert float(summary["duality_gap"]) <= 1e-8

    ev = tmp_path / "eval"
    code = run("drug-eval", "--config", conf, "--out", ev, "--profile", out / "release_profile.csv")
    assert code == 0
    rows = read_csv(ev / "evaluation.csv")
    assert len(rows) == 3
    assert set(rows[0]) >= {"t_s", "E_g", "V_upper", "P_theta", "chebyshev_bound", "P_theta_mc", "P_theta_mc_se"}
    for r in rows:
        assert 288 * 4 < float(r["t_s"]) < 288 * 5
        assert float(r["E_g"]) - float(r["V_upper"]) >= 0.99
        assert 0 <= float(r["P_theta"]) <= 1


def test_scale_flag_overrides_release_count(tmp_path):
    conf = write(tmp_path, "d.yaml", DRUG.replace("beta: 1", "beta: 0"))
    out = tmp_path / "o"
    assert run("drug-design", "--config", conf, "--out", out, "--scale", "desk") == 0
    assert len(read_csv(out / "release_profile.csv")) == 300
    assert json.loads((out / "manifest.json").read_text())["scale"] == "desk"


def test_link_commands(tmp_path, capsys):
    conf = write(tmp_path, "l.yaml", LINK)
    assert run("mc-threshold", "--config", conf, "--out", tmp_path / "t") == 0
    assert "xi=" in capsys.readouterr().out
    thr = read_csv(tmp_path / "t" / "threshold.csv")[0]
    assert run("mc-release", "--config", conf, "--out", tmp_path / "r") == 0
    rel = read_csv(tmp_path / "r" / "release.csv")
    assert sum(int(r["alpha"]) for r in rel) == 800
    summ = read_csv(tmp_path / "r" / "release_summary.csv")[0]
    assert float(summ["max_ber"]) <= float(summ["uniform_max_ber"])
    assert float(summ["xi"]) == pytest.approx(float(thr["xi"]))
    assert run("mc-frame", "--config", conf, "--out", tmp_path / "f") == 0
    frame = read_csv(tmp_path / "f" / "frame.csv")[0]
    assert frame["status"] == "ok" and float(frame["T_star_s"]) > 10
    assert len(read_csv(tmp_path / "f" / "efficiency.csv")) == 4


def test_unknown_key_reports_line(tmp_path, capsys):
    conf = write(tmp_path, "bad.yaml", LINK + "  bogus: 3\n")
    out = tmp_path / "out"
    assert run("mc-frame", "--config", conf, "--out", out) == 2
    err = capsys.readouterr().err
    assert "bogus" in err and ":17" in err
    assert not out.exists()


@pytest.mark.parametrize(
    "text",
    [
        LINK.replace("A: 800", "A: -5"),
        LINK.replace("eta: 1", "eta: [1]"),
        LINK.replace("I: 8", "I: 2.5"),
        "env: [unclosed\n",
        "env:\n  r0_m: 1\n  r0_m: 2\n",
    ],
)
def test_invalid_configs_exit_2(tmp_path, text):
    conf = write(tmp_path, "bad.yaml", text)
    assert run("mc-release", "--config", conf, "--out", tmp_path / "o") == 2
    assert not (tmp_path / "o").exists()


def test_missing_config_and_arguments(tmp_path):
    assert run("mc-frame", "--config", tmp_path / "nope.yaml", "--out", tmp_path / "o") == 2
    assert cli.main(["mc-frame"]) == 2
    assert cli.main(["mc-frame", "--config", "x", "--out", "y", "--seed", "-1"]) == 2


def test_bad_profile(tmp_path):
    conf = write(tmp_path, "d.yaml", DRUG)
    prof = write(tmp_path, "p.csv", "release_time_s,alpha\n0,abc\n")
    assert run("drug-eval", "--config", conf, "--out", tmp_path / "o", "--profile", prof) == 2
    prof = write(tmp_path, "p2.csv", "time,alpha\n0,1\n")
    assert run("drug-eval", "--config", conf, "--out", tmp_path / "o", "--profile", prof) == 2


def test_infeasible_design_exit_3(tmp_path, monkeypatch):
    def infeasible(problem, tables=None):
        empty = np.zeros(problem.I)
        return DrugDesignResult(empty.astype(np.int64), 0, math.nan, False, empty)

    monkeypatch.setattr(cli, "design_release", infeasible)
    conf = write(tmp_path, "d.yaml", DRUG)
    out = tmp_path / "o"
    assert run("drug-design", "--config", conf, "--out", out) == 3
    assert not out.exists()


def test_nonconvergence_exit_4(tmp_path, monkeypatch):
    def fail(*a, **k):
        raise NonConvergenceError("stalled")

    monkeypatch.setattr(cli, "optimal_frame_duration", fail)
    conf = write(tmp_path, "l.yaml", LINK)
    out = tmp_path / "o"
    assert run("mc-frame", "--config", conf, "--out", out) == 4
    assert not out.exists()


def test_existing_outputs_replaced_atomically(tmp_path):
    conf = write(tmp_path, "l.yaml", LINK)
    out = tmp_path / "o"
    out.mkdir()
    (out / "frame.csv").write_text("stale\n")
    assert run("mc-frame", "--config", conf, "--out", out) == 0
    assert "stale" not in (out / "frame.csv").read_text()
    assert not [p for p in out.iterdir() if p.name.startswith(".")]


def test_shipped_configs_parse():
    from pathlib import Path

    from mobilemc.config import load_config

    root = Path(__file__).resolve().parents[1] / "configs"
    for name in ("channel.yaml", "drug.yaml", "link.yaml"):
        cfg = load_config(str(root / name))
        assert cfg.env().r0 == 1e-5
