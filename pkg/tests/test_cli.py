import json
import math
import subprocess
import sys
from pathlib import Path

import pytest

from iioss_lab import benchmarks
from iioss_lab.cli import main
from iioss_lab.parallel import default_jobs
from iioss_lab.sim import InputSignal, integrate

BENCH = Path(__file__).resolve().parents[1] / "bench"


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def _report(out_dir):
    return json.loads((Path(out_dir) / "report.json").read_text())


def _write_cfg(tmp_path, cfg, name="run.cfg"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def test_check_lyapunov_log_candidate(tmp_path, capsys):
    code, _ = _run(capsys, "check-lyapunov", BENCH / "linear_ln.cfg", "--out-dir", tmp_path)
    assert code == 0
    rep = _report(tmp_path)
    assert rep["exit_code"] == 0 and rep["tool"] == "iioss-lab"
    assert len(rep["config_sha256"]) == 64 and rep["seed"] == 0
    assert all(r.get("verdict", "holds") == "holds" for r in rep["reports"])


def test_falsify_u_squared_writes_witness(tmp_path, capsys):
    code, _ = _run(capsys, "falsify", BENCH / "xdot_u2.cfg", "--budget", 1000, "--out-dir", tmp_path)
    assert code == 1
    w = json.loads((tmp_path / "witness_input.json").read_text())
    sig = InputSignal.from_dict(w["input"])
    x1 = integrate(benchmarks.get("xdot_u2").system, w["xi"], sig, 1e-3, 1.0).states[-1, 0]
    assert abs(x1) >= 10 - 1e-6


def test_simulate_linear_flow_csv(tmp_path, capsys):
    code, out = _run(capsys, "simulate", BENCH / "linear.cfg", "--xi", 1, "--horizon", 1, "--format", "csv", "--out-dir", tmp_path)
    assert code == 0
    lines = out.out.splitlines()
    assert lines[0] == "t,x1,y1,u1"
    t, x1 = (float(v) for v in lines[-1].split(",")[:2])
    assert t == pytest.approx(1.0) and x1 == pytest.approx(math.exp(-1), abs=1e-6)
    assert (tmp_path / "trajectory.csv").read_text() == out.out


def test_json_is_default_format(tmp_path, capsys):
    code, out = _run(capsys, "simulate", BENCH / "linear.cfg", "--out-dir", tmp_path)
    assert code == 0
    assert json.loads(out.out)["subcommand"] == "simulate"


@pytest.mark.parametrize(
    "argv",
    [
        ["bogus"],
        ["simulate", "--no-such-flag"],
        ["simulate", "--format", "xml"],
        ["simulate", "--xi", "one"],
    ],
)
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_configuration_errors_exit_2(tmp_path, capsys):
    assert _run(capsys, "simulate")[0] == 2
    assert _run(capsys, "simulate", tmp_path / "missing.cfg")[0] == 2
    bad = _write_cfg(tmp_path, {"benchmark": "no_such_system"})
    assert _run(capsys, "simulate", bad, "--out-dir", tmp_path)[0] == 2
    code, out = _run(capsys, "check-iioss", BENCH / "linear.cfg", "--gain", "gamma2=s +* 2", "--out-dir", tmp_path)
    assert code == 2 and "error" in out.err
    assert _run(capsys, "falsify", BENCH / "xdot_u2.cfg", "--budget", 0, "--out-dir", tmp_path)[0] == 2
    assert _run(capsys, "simulate", BENCH / "linear.cfg", "--xi", "1,2", "--out-dir", tmp_path)[0] == 2


def test_process_exit_codes(tmp_path):
    base = [sys.executable, "-m", "iioss_lab.cli"]
    ok = subprocess.run(base + ["simulate", str(BENCH / "linear.cfg"), "--out-dir", str(tmp_path)], capture_output=True)
    assert ok.returncode == 0
    bad = subprocess.run(base + ["frobnicate"], capture_output=True, text=True)
    assert bad.returncode == 2 and "usage" in bad.stderr


def test_identical_runs_are_byte_identical(tmp_path, capsys):
    for sub, cfg, extra in (
        ("falsify", "xdot_u2.cfg", ["--budget", 300]),
        ("simulate", "linear.cfg", ["--xi", 2]),
        ("check-lyapunov", "linear_ln.cfg", []),
    ):
        a, b = tmp_path / f"{sub}_a", tmp_path / f"{sub}_b"
        _run(capsys, sub, BENCH / cfg, *extra, "--out-dir", a)
        _run(capsys, sub, BENCH / cfg, *extra, "--out-dir", b)
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        for name in names:
            assert (a / name).read_bytes() == (b / name).read_bytes(), (sub, name)


def test_seed_changes_config_hash(tmp_path, capsys):
    _run(capsys, "falsify", BENCH / "xdot_u2.cfg", "--budget", 50, "--out-dir", tmp_path / "a")
    _run(capsys, "falsify", BENCH / "xdot_u2.cfg", "--budget", 50, "--seed", 9, "--out-dir", tmp_path / "b")
    ra, rb = _report(tmp_path / "a"), _report(tmp_path / "b")
    assert ra["config_sha256"] != rb["config_sha256"]
    assert (ra["seed"], rb["seed"]) == (0, 9)


def test_list_benchmarks(capsys):
    code, out = _run(capsys, "list-benchmarks")
    assert code == 0
    assert out.out.splitlines()[0].startswith("name\tn\tm")
    code, out = _run(capsys, "list-benchmarks", "--format", "json")
    names = {row["name"] for row in json.loads(out.out)}
    assert {"xdot_u2", "linear_detectable_2d", "scalar_iiss", "scalar_linear", "passive_oscillator"} <= names


def test_gain_override_flips_verdict(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, {"benchmark": "scalar_linear", "sampling": {"samples": 50, "dt": 0.01, "horizon": 2.0}})
    assert _run(capsys, "check-iioss", cfg, "--out-dir", tmp_path / "a")[0] == 0
    # constant u = 1 from rest reaches 1 - e^-1 > 1/2 at t = 1
    code, _ = _run(capsys, "check-iioss", cfg, "--gain", "gamma2=0.25*s", "--out-dir", tmp_path / "b")
    assert code == 1
    assert (tmp_path / "b" / "witness_input.json").exists()


def test_dynamics_override(tmp_path, capsys):
    code, out = _run(
        capsys, "simulate", BENCH / "linear.cfg", "--dynamics=-2*x1", "--xi", 1, "--format", "csv", "--out-dir", tmp_path
    )
    assert code == 0
    assert float(out.out.splitlines()[-1].split(",")[1]) == pytest.approx(math.exp(-2), abs=1e-6)


def test_jobs_env_fallback_and_invariance(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("IIOSS_LAB_JOBS", "3")
    assert default_jobs() == 3
    _run(capsys, "falsify", BENCH / "xdot_u2.cfg", "--budget", 1200, "--out-dir", tmp_path / "env")
    monkeypatch.setenv("IIOSS_LAB_JOBS", "1")
    _run(capsys, "falsify", BENCH / "xdot_u2.cfg", "--budget", 1200, "--out-dir", tmp_path / "one")
    _run(capsys, "falsify", BENCH / "xdot_u2.cfg", "--budget", 1200, "--jobs", 4, "--out-dir", tmp_path / "flag")
    one = (tmp_path / "one" / "report.json").read_bytes()
    assert (tmp_path / "env" / "report.json").read_bytes() == one
    assert (tmp_path / "flag" / "report.json").read_bytes() == one


def test_exit_code_contract_across_benchmarks(tmp_path, capsys):
    sampling = {"samples": 40, "dt": 0.01, "horizon": 1.0, "budget": 200}
    for row in benchmarks.list_benchmarks():
        name = row["name"]
        cfg = _write_cfg(tmp_path, {"benchmark": name, "sampling": sampling}, f"{name}.cfg")
        subs = (["check-iioss", "falsify"] if row["gains"] else []) + (["check-lyapunov"] if row["candidate"] else [])
        for sub in subs:
            out = tmp_path / f"{name}_{sub}"
            code, _ = _run(capsys, sub, cfg, "--out-dir", out)
            rep = _report(out)
            violated = any(r.get("verdict") == "violated" or r.get("agree") is False for r in rep["reports"])
            assert code == (1 if violated else 0), (name, sub)
            assert rep["exit_code"] == code
            if violated and sub != "check-lyapunov":
                assert (out / "witness_input.json").exists(), (name, sub)
