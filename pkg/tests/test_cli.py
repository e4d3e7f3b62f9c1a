import json
import shutil

import numpy as np
import pytest
import yaml

from costmatch.cli import (EXIT_CONFIG, EXIT_GATE, EXIT_OK, load_theta, main, save_theta,
                           verify_stamp)
from costmatch.config import RunConfig, default_config
from costmatch.exceptions import ConfigError
from costmatch.valuation import ParamVector

# small but complete runs: 2 episodes x 40 steps, horizon 10
SMALL = ["collect.trajectories=2", "collect.steps=40", "learn.updates_per_round=5",
         "learn.horizon=10", "solver.horizon_N=10", "learn.batch_size=8", "diagnose.steps=30",
         "diagnose.trajectories=1", "diagnose.fd_instances=1"]


def run(*args, overrides=SMALL):
    argv = list(args)
    for o in overrides:
        argv += ["--set", o]
    return main(argv)


def tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_unknown_key_and_bad_values_exit_with_config_error(tmp_path, capsys):
    assert run("train", "--run-dir", str(tmp_path / "a"), overrides=["learn.nope=1"]) == EXIT_CONFIG
    assert run("train", "--run-dir", str(tmp_path / "b"), overrides=["learn.gamma=2"]) == EXIT_CONFIG
    assert run("train", "--run-dir", str(tmp_path / "c"), overrides=["learn.horizon=5"]) == EXIT_CONFIG
    bad = tmp_path / "bad.yaml"
    bad.write_text("learn: [1, 2\n")
    assert main(["train", "--config", str(bad), "--run-dir", str(tmp_path / "d")]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_CONFIG
    assert not (tmp_path / "a").exists()


def test_config_round_trip_and_hash():
    cfg = RunConfig.from_sources(overrides=["learn.rounds=2"])
    again = RunConfig(yaml.safe_load(cfg.to_yaml()))
    assert again.hash == cfg.hash
    assert RunConfig.from_sources().hash != cfg.hash
    with pytest.raises(ConfigError):
        RunConfig.from_sources(overrides=["gait.kind=custom"])
    raw = default_config()
    raw["gait"]["kind"] = "custom"
    raw["gait"]["schedule"] = RunConfig.from_sources().schedule.to_dict()
    assert RunConfig(raw).schedule.to_dict() == raw["gait"]["schedule"]


def test_theta_snapshot_round_trip(tmp_path):
    th = ParamVector(theta_hl=[0.9, 0.8, 1.1])
    save_theta(tmp_path / "t.json", th)
    assert np.array_equal(load_theta(tmp_path / "t.json").to_array(), th.to_array())
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(ConfigError):
        load_theta(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        load_theta(tmp_path / "missing.json")


def test_zero_rounds_writes_theta0_only(tmp_path):
    d = tmp_path / "r0"
    assert run("train", "--run-dir", str(d), overrides=SMALL + ["learn.rounds=0"]) == EXIT_OK
    assert (d / "theta0.json").exists() and not (d / "rounds").exists()
    assert (d / "train_curve.csv").read_text().count("\n") == 1
    assert verify_stamp(d)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    base = tmp_path_factory.mktemp("train")
    a, b = base / "a", base / "b"
    over = SMALL + ["learn.rounds=2"]
    assert run("train", "--run-dir", str(a), overrides=over) == EXIT_OK
    assert run("train", "--run-dir", str(b), overrides=over) == EXIT_OK
    return base, a, b, over


def test_train_is_deterministic(trained):
    _, a, b, _ = trained
    ta, tb = tree(a), tree(b)
    assert ta == tb
    for j in (0, 1):
        assert f"rounds/{j}/theta.json" in ta
        assert f"rounds/{j}/trajectories/episode_001.jsonl" in ta
        diag = json.loads(ta[f"rounds/{j}/diagnostics.json"])
        assert diag["solve_calls"] == 0 and len(diag["updates"]) == 5
        assert verify_stamp(a / "rounds" / str(j))


def test_resume_matches_uninterrupted_run(trained):
    base, a, _, over = trained
    c = base / "c"
    shutil.copytree(a, c)
    # simulate a crash after round 0: round 1 never reached its final write
    (c / "rounds" / "1" / "theta.json").unlink()
    (c / "train_curve.csv").unlink()
    assert run("train", "--run-dir", str(c), overrides=over) == EXIT_OK
    assert tree(c) == tree(a)


def test_resume_rejects_a_different_config(trained):
    base, a, _, over = trained
    d = base / "d"
    shutil.copytree(a, d)
    assert run("train", "--run-dir", str(d), overrides=over + ["learn.gamma=0.9"]) == EXIT_CONFIG


def test_stamp_detects_tampering(trained, tmp_path):
    _, a, _, _ = trained
    c = tmp_path / "copy"
    shutil.copytree(a, c)
    cfg = c / "config.yaml"
    cfg.write_text(cfg.read_text().replace("gamma: 0.985", "gamma: 0.9"))
    assert not verify_stamp(c)


BENCH = SMALL[:3] + SMALL[5:] + ["bench.seeds=[0]", "bench.offset=-10.0", "bench.steps=520"]


def test_bench_missing_snapshot_fails_cleanly(tmp_path):
    d = tmp_path / "bench"
    code = run("bench", "--run-dir", str(d), "--baseline", str(tmp_path / "nope.json"),
               "--learned", str(tmp_path / "nope.json"), overrides=BENCH)
    assert code == EXIT_CONFIG
    assert not d.exists() or not any(d.rglob("*"))


@pytest.mark.slow
def test_bench_same_snapshot_reports_zero_improvement(trained, tmp_path):
    _, a, _, _ = trained
    snap = a / "theta0.json"
    d = tmp_path / "bench"
    assert run("bench", "--run-dir", str(d), "--baseline", str(snap), "--learned", str(snap),
               overrides=BENCH) == EXIT_OK
    report = json.loads((d / "bench" / "report.json").read_text())
    assert report["baseline_sha256"] == report["learned_sha256"]
    for name, row in report["rows"].items():
        assert row["improvement_pct"] == 0.0, name
        assert np.isfinite(row["baseline_mean"]), name
    assert (d / "bench" / "curves" / "baseline_seed0.csv").exists()
    assert verify_stamp(d / "bench")


def test_diagnose_exact_configuration_matches_values(tmp_path):
    over = SMALL + ["plant.true_gain_lin=[1,1,1]", "plant.true_gain_ang=[1,1,1]",
                    "plant.actuator_tau=0.0", "learn.gamma=1.0", "diagnose.steps=10",
                    "diagnose.trajectories=3"]
    cfg = RunConfig.from_sources(overrides=over)
    th = cfg.theta0
    th.cost.theta_qf[:] = 0.0
    snap = tmp_path / "theta.json"
    save_theta(snap, th)
    d = tmp_path / "diag"
    assert run("diagnose", "--run-dir", str(d), "--theta", str(snap), overrides=over) == EXIT_OK
    match = json.loads((d / "diagnose" / "match.json").read_text())
    assert match["anchors"] == 3 and match["falls"] == 0
    rows = (d / "diagnose" / "density.csv").read_text().splitlines()[1:]
    for row in rows:
        q_mpc, q_meas = map(float, row.split(","))
        assert abs(q_mpc - q_meas) <= 1e-9 * abs(q_meas)
    audit = json.loads((d / "diagnose" / "gradient_audit.json").read_text())
    assert audit["max_rel_error"] < audit["gate"]


def test_check_gradients_gate(tmp_path):
    d = tmp_path / "g"
    assert run("check-gradients", "--run-dir", str(d), "--instances", "2") == EXIT_OK
    rep = json.loads((d / "check-gradients" / "report.json").read_text())
    assert len(rep["errors"]) == 2 and rep["max_rel_error"] < 1e-5
    assert run("check-gradients", "--run-dir", str(tmp_path / "h"), "--instances", "1",
               overrides=SMALL + ["diagnose.gate=1e-15"]) == EXIT_GATE
