import csv
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from mfgfp.cli import main
from mfgfp.config import ConfigError, RunSettings, parse_config
from mfgfp.core import StateGrid, closed_form_equilibrium
from mfgfp.fictitious_play import FpTrace
from mfgfp.flows import write_flow_csv

SMALL = """\
# small benchmark for quick runs
num_cells = 12
horizon = 20
num_iterations = 6
"""


def write_config(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def manifest_matches_directory(out):
    with open(os.path.join(out, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    return sorted(manifest["outputs"]) == sorted(os.listdir(out)), manifest


# ---------------------------------------------------------------- config parsing


def test_parse_config_values_and_comments():
    s = parse_config(SMALL + "diagnostics = off  # blind\nsolver = perturbed\nseed = 18446744073709551615\n")
    assert s.num_cells == 12 and s.horizon == 20 and s.num_iterations == 6
    assert s.diagnostics is False and s.solver == "perturbed" and s.seed == 2**64 - 1
    assert parse_config("horizon = auto").horizon is None


@pytest.mark.parametrize("text, message", [
    ("bogus = 1", "unknown key"),
    ("num_cells = 10\nnum_cells = 12", "duplicate"),
    ("num_cells 10", "key = value"),
    ("num_cells = ten", "bad value"),
    ("num_iterations = 0", "num_iterations must be ≥ 1"),
    ("diagnostics = maybe", "bad value for diagnostics"),
    ("mode = ergodic", "unknown mode"),
    ("seed = -1", "unsigned"),
])
def test_parse_config_rejects(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(text)


def test_settings_round_trip():
    s = parse_config(SMALL)
    d = s.to_dict()
    assert d["horizon"] == 20
    assert RunSettings().to_dict()["horizon"] == "auto"
    cfg = s.build()
    assert cfg.env.num_states == 12 and cfg.env.horizon == 20 and cfg.num_iterations == 6


# ---------------------------------------------------------------- run commands


def test_exact_fp_command(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    out = str(tmp_path / "exact")
    assert main(["exact-fp", "--config", cfg, "--out", out]) == 0
    rows = read_rows(os.path.join(out, "trace.csv"))
    assert len(rows) == 1 + 6
    ok, manifest = manifest_matches_directory(out)
    assert ok
    assert manifest["config"]["num_cells"] == 12 and manifest["seed"] == 0
    assert manifest["duration_seconds"] >= 0 and manifest["version"]
    flow = read_rows(os.path.join(out, "final_flow.csv"))
    assert len(flow) == 1 + 21 and len(flow[0]) == 13
    policy = read_rows(os.path.join(out, "final_policy.csv"))
    assert len(policy) == 1 + 20


def test_invalid_iterations_exit_nonzero(tmp_path, capsys):
    cfg = write_config(tmp_path, "num_iterations = 0\n")
    assert main(["exact-fp", "--config", cfg, "--out", str(tmp_path / "o")]) != 0
    assert "num_iterations must be ≥ 1" in capsys.readouterr().err


def test_missing_config_exit_nonzero(tmp_path, capsys):
    assert main(["exact-fp", "--config", str(tmp_path / "nope.cfg"), "--out",
                 str(tmp_path / "o")]) != 0
    assert "error" in capsys.readouterr().err


def test_exact_fp_rejects_other_solver(tmp_path):
    cfg = write_config(tmp_path, SMALL + "solver = perturbed\n")
    assert main(["exact-fp", "--config", cfg, "--out", str(tmp_path / "o")]) != 0


@pytest.mark.parametrize("command, extra", [
    ("exact-fp", ""),
    ("approx-fp", "solver = perturbed\n"),
    ("modelfree-fp", "q_episodes = 300\nnum_iterations = 3\n"),
])
def test_rerun_is_byte_identical(tmp_path, command, extra):
    cfg = write_config(tmp_path, SMALL.replace("num_iterations = 6\n", "") + extra)
    outs = []
    for k in range(2):
        out = str(tmp_path / f"run{k}")
        assert main([command, "--config", cfg, "--out", out, "--seed", "5", "--scale", "100"]) == 0
        with open(os.path.join(out, "trace.csv"), "rb") as fh:
            outs.append(fh.read())
    assert outs[0] == outs[1]


def test_approx_fp_diagnostic_schema(tmp_path):
    cfg = write_config(tmp_path, SMALL + "solver = perturbed\n")
    on, off = str(tmp_path / "on"), str(tmp_path / "off")
    assert main(["approx-fp", "--config", cfg, "--out", on, "--diagnostics", "on"]) == 0
    assert main(["approx-fp", "--config", cfg, "--out", off, "--diagnostics", "off"]) == 0
    header_on = read_rows(os.path.join(on, "trace.csv"))[0]
    header_off = read_rows(os.path.join(off, "trace.csv"))[0]
    for col in ("learning_error", "d1_star_hat", "d1_hat_lag"):
        assert col in header_on
    assert "learning_error" not in header_off


def test_approx_fp_q_learning_desk_scale(tmp_path):
    cfg = write_config(tmp_path, "num_cells = 20\nsolver = q_learning\n")
    start = time.perf_counter()
    assert main(["approx-fp", "--config", cfg, "--out", str(tmp_path / "q")]) == 0
    assert time.perf_counter() - start < 300


def test_modelfree_command(tmp_path, capsys):
    cfg = write_config(tmp_path, "num_cells = 12\nnum_iterations = 3\nq_episodes = 300\n")
    out = str(tmp_path / "mf")
    assert main(["modelfree-fp", "--config", cfg, "--out", out, "--scale", "100"]) == 0
    header = read_rows(os.path.join(out, "trace.csv"))[0]
    assert "buffer_size" in header and "learning_error" in header
    assert len(read_rows(os.path.join(out, "final_flow.csv"))) == 2
    assert manifest_matches_directory(out)[0]
    bad = write_config(tmp_path, "num_iterations = 0\n", "bad.cfg")
    assert main(["modelfree-fp", "--config", bad, "--out", str(tmp_path / "bad")]) != 0
    assert "num_iterations must be ≥ 1" in capsys.readouterr().err


# ---------------------------------------------------------------- report


def test_report_on_exact_run(tmp_path, capsys):
    cfg = write_config(tmp_path, SMALL)
    out = str(tmp_path / "exact")
    assert main(["exact-fp", "--config", cfg, "--out", out]) == 0
    assert main(["report", out]) == 0
    text = open(os.path.join(out, "theorem2_report.txt"), encoding="utf-8").read()
    assert "l2_density change from iteration 5 to 6" in text
    assert "average bound holds on holdout" in text
    rows = read_rows(os.path.join(out, "l2_density_by_iteration.csv"))
    assert rows[0] == ["iteration", "l2_density"] and len(rows) == 7
    trace = FpTrace.from_csv(os.path.join(out, "trace.csv"))
    assert "bound_rhs_average" in trace and "bound_rhs_lagged" in trace
    assert manifest_matches_directory(out)[0]
    assert main(["report", out]) == 0  # rerunning the report is idempotent
    assert manifest_matches_directory(out)[0]


def test_report_empty_directory(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) != 0
    assert "lacks run outputs" in capsys.readouterr().err


def test_report_on_closed_form_inputs(tmp_path):
    grid = StateGrid(16)
    a_star, mu_star = closed_form_equilibrium(grid)
    out = tmp_path / "cf"
    out.mkdir()
    write_flow_csv(out / "final_flow.csv", mu_star[None, :], grid)
    write_flow_csv(out / "final_policy.csv", a_star[None, :], grid)
    FpTrace({"l2_density": np.zeros(3), "l2_control": np.zeros(3)}).to_csv(out / "trace.csv")
    (out / "manifest.json").write_text(json.dumps({"outputs": ["trace.csv", "final_flow.csv",
                                                               "final_policy.csv",
                                                               "manifest.json"]}))
    assert main(["report", str(out)]) == 0
    for name, col in (("density_vs_closed_form.csv", 3), ("control_vs_closed_form.csv", 3)):
        rows = read_rows(out / name)[1:]
        assert all(float(r[col]) == 0.0 for r in rows)
    for name in ("l2_density_by_iteration.csv", "l2_control_by_iteration.csv"):
        assert all(float(r[1]) == 0.0 for r in read_rows(out / name)[1:])
    text = (out / "theorem2_report.txt").read_text()
    assert "final l2_density (from outputs): 0\n" in text
    assert "final l2_control (from outputs): 0\n" in text


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mfgfp.cli", "report", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode != 0 and "lacks run outputs" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "mfgfp.cli", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0 and "modelfree-fp" in proc.stdout
