import json
import os
import subprocess
import sys

import numpy as np
import pytest

from intraday_hjb.cli import PNL_COLUMNS, main
from intraday_hjb.config import dump_config, load_config
from intraday_hjb.pipeline import list_days, prepare_day

TINY = """[grid]
N_x = 4
N_y = 8
N_q = 12
N_m = 4
N_t = 50

[bounds]
mU_paths = 1000

[benchmark]
pf_n_q = 40

[run]
paths = 5
days = 1
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return str(p)


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def error_record(err):
    lines = [ln for ln in err.splitlines() if ln.startswith("{")]
    rec = json.loads(lines[-1])
    assert {"error", "message", "context"} <= set(rec)
    return rec


def read_bytes(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            path = os.path.join(d, f)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


# --- usage errors -----------------------------------------------------------

@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["bounds", "--bogus"],
                                  ["bounds", "--paths", "0"], ["bounds", "--seed", "x"],
                                  ["sweep-jumps", "--values", "a,b"],
                                  ["simulate", "--kind", "load"]])
def test_usage_errors_exit_2(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, err = run(argv, capsys)
    assert code == 2
    error_record(err)


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[grid]\nN_z = 3\n")
    code, _, err = run(["bounds", "--config", str(cfg)], capsys)
    assert code == 2 and error_record(err)["error"] == "ParameterError"


def test_module_entry_point_reports_usage():
    proc = subprocess.run([sys.executable, "-m", "intraday_hjb.cli", "bounds", "--bogus"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr.strip().splitlines()[-1])["error"] == "UsageError"


# --- data and solver errors -------------------------------------------------

def test_bad_data_exit_3(tiny, tmp_path, capsys):
    data = tmp_path / "data"
    data.mkdir()
    (data / "prices.csv").write_text("x,y\n")
    (data / "production_2023-01-01.csv").write_text("a\n1\n")
    code, _, err = run(["bounds", "--config", tiny, "--data", str(data)], capsys)
    assert code == 3 and error_record(err)["error"] == "DataError"


def test_corrupt_snapshot_exit_3(tiny, tmp_path, capsys):
    snap = tmp_path / "broken.snap"
    snap.write_bytes(b"not a snapshot\n")
    code, _, err = run(["evaluate", "--config", tiny, "--out", str(tmp_path / "o"),
                        "--snapshot", str(snap)], capsys)
    assert code == 3 and error_record(err)["error"] == "SnapshotError"


def test_solver_failure_exit_4(tmp_path, capsys):
    cfg = tmp_path / "big.ini"
    cfg.write_text("[model]\nsigma = 1e200\n\n" + TINY)
    code, _, err = run(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")], capsys)
    assert code == 4
    error_record(err)


# --- bounds -----------------------------------------------------------------

def test_bounds_passthrough(tiny, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, out, _ = run(["bounds", "--config", tiny], capsys)
    assert code == 0
    assert not (tmp_path / "out").exists()
    cfg = load_config(tiny)
    problem = prepare_day(list_days(1, 0)[0], cfg)
    kv = dict(line.split(" = ") for line in out.splitlines()[1:] if " = " in line)
    for key, value in problem.bounds.as_dict().items():
        assert float(kv[key]) == value
    assert float(kv["beta"]) == problem.params.beta
    assert int(kv["N_t"]) == problem.grid.N_t


def test_bounds_written_with_out(tiny, capsys, tmp_path):
    out_dir = tmp_path / "o"
    code, out, _ = run(["bounds", "--config", tiny, "--out", str(out_dir), "--days", "0,3"],
                       capsys)
    assert code == 0
    assert (out_dir / "bounds.txt").read_text() == out
    rec = json.loads((out_dir / "bounds.json").read_text())
    assert sorted(rec) == ["synthetic-0", "synthetic-3"]
    assert rec["synthetic-3"]["q_max"] > rec["synthetic-3"]["q_min"]


# --- workflows --------------------------------------------------------------

def test_benchmark_byte_identical(tiny, capsys, tmp_path):
    out_dir = str(tmp_path / "o")
    assert run(["benchmark", "--config", tiny, "--out", out_dir, "--seed", "7"], capsys)[0] == 0
    first = read_bytes(out_dir)
    assert run(["benchmark", "--config", tiny, "--out", out_dir, "--seed", "7"], capsys)[0] == 0
    assert read_bytes(out_dir) == first
    assert {"pnl.csv", "daily.csv", "gains.json", "trajectories.csv", "config.ini",
            os.path.join("snapshots", "synthetic-0.snap")} <= set(first)
    header = first["pnl.csv"].decode().splitlines()[0]
    assert tuple(header.split(",")) == PNL_COLUMNS
    assert run(["benchmark", "--config", tiny, "--out", out_dir, "--seed", "8"], capsys)[0] == 0
    assert read_bytes(out_dir)["pnl.csv"] != first["pnl.csv"]


def test_benchmark_rows_and_gains(tiny, capsys, tmp_path):
    out_dir = tmp_path / "o"
    assert run(["benchmark", "--config", tiny, "--out", str(out_dir), "--days", "2"],
               capsys)[0] == 0
    rows = (out_dir / "pnl.csv").read_text().splitlines()[1:]
    assert len(rows) == 2 * 3 * 5
    gains = json.loads((out_dir / "gains.json").read_text())
    assert gains["days"] == ["synthetic-0", "synthetic-1"]
    assert {"OT_vs_TWAP", "PF_vs_OT", "PF_vs_TWAP"} <= set(gains)
    for r in rows:
        f = r.split(",")
        assert float(f[7]) == pytest.approx(-(float(f[3]) + float(f[4])), rel=1e-12, abs=1e-6)


def test_config_echo_round_trips(tiny, capsys, tmp_path):
    out_dir = tmp_path / "o"
    run(["solve", "--config", tiny, "--out", str(out_dir), "--seed", "3"], capsys)
    text = (out_dir / "config.ini").read_text()
    cfg = load_config(out_dir / "config.ini")
    assert dump_config(cfg) == text
    assert cfg.run["seed"] == 3 and cfg.grid["N_q"] == 12


def test_solve_then_evaluate_matches_benchmark(tiny, capsys, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["solve", "--config", tiny, "--out", str(a)], capsys)[0] == 0
    assert (a / "slices" / "synthetic-0_t0.csv").exists()
    diag = (a / "diagnostics" / "synthetic-0.jsonl").read_text().splitlines()
    assert diag and all(json.loads(d) for d in diag)
    assert run(["evaluate", "--config", tiny, "--out", str(a)], capsys)[0] == 0
    assert run(["benchmark", "--config", tiny, "--out", str(b)], capsys)[0] == 0
    ev = (a / "pnl.csv").read_text().splitlines()
    bench = [r for r in (b / "pnl.csv").read_text().splitlines() if ",OT," in r]
    assert ev[1:] == bench


def test_evaluate_explicit_snapshot(tiny, capsys, tmp_path):
    a = tmp_path / "a"
    run(["solve", "--config", tiny, "--out", str(a)], capsys)
    code, _, _ = run(["evaluate", "--config", tiny, "--out", str(tmp_path / "e"),
                      "--snapshot", str(a / "snapshots" / "synthetic-0.snap"),
                      "--strategies", "OT,TWAP"], capsys)
    assert code == 0
    rows = (tmp_path / "e" / "pnl.csv").read_text().splitlines()[1:]
    assert {r.split(",")[1] for r in rows} == {"OT", "TWAP"}


def test_stale_snapshot_warns_but_runs(tiny, capsys, tmp_path):
    a = tmp_path / "a"
    run(["solve", "--config", tiny, "--out", str(a)], capsys)
    stale = tmp_path / "stale.ini"
    stale.write_text("[model]\ngamma = 0.03\n\n" + TINY)
    code, _, err = run(["evaluate", "--config", str(stale), "--out", str(a)], capsys)
    assert code == 0
    assert any(json.loads(ln).get("warning") == "StaleSnapshot"
               for ln in err.splitlines() if ln.startswith("{"))


def test_sweep_jumps_summary(tiny, capsys, tmp_path):
    out_dir = tmp_path / "o"
    code, _, _ = run(["sweep-jumps", "--config", tiny, "--out", str(out_dir),
                      "--values", "0,0.4167"], capsys)
    assert code == 0
    summary = (out_dir / "sweep_jumps_summary.csv").read_text().splitlines()
    assert summary[0].split(",")[:3] == ["lam", "n", "mean_pnl"]
    assert [float(r.split(",")[0]) for r in summary[1:]] == [0.0, 0.4167]
    assert all(int(r.split(",")[1]) == 5 for r in summary[1:])


def test_sweep_regularization_rows(tiny, capsys, tmp_path):
    out_dir = tmp_path / "o"
    code, _, _ = run(["sweep-regularization", "--config", tiny, "--out", str(out_dir),
                      "--values", "1e-2,1e-3"], capsys)
    assert code == 0
    rows = (out_dir / "regularization.csv").read_text().splitlines()
    assert rows[0] == "day,eps,sup_diff" and len(rows) == 3
    assert all(np.isfinite(float(r.split(",")[2])) for r in rows[1:])


def test_simulate_outputs_deterministic(tiny, capsys, tmp_path):
    out_dir = str(tmp_path / "o")
    argv = ["simulate", "--config", tiny, "--out", out_dir, "--kind", "both", "--dump",
            "--paths", "7"]
    assert run(argv, capsys)[0] == 0
    first = read_bytes(out_dir)
    assert run(argv, capsys)[0] == 0
    assert read_bytes(out_dir) == first
    header = first["simulate_both_summary.csv"].decode().splitlines()[0]
    assert header == "t,mean_X,var_X,mean_Y,var_Y"
    assert len(first["simulate_both_paths.csv"].decode().splitlines()) > 7
