import json
import subprocess
import sys

import pytest

from phigreen import cli_harness as cli


def run_cli(tmp_path, *args):
    return cli.main([*args, "--out", str(tmp_path)])


def read(tmp_path, name):
    return json.loads((tmp_path / name).read_text())


def test_spectrum_build_and_verify_file(tmp_path):
    assert run_cli(tmp_path, "spectrum", "build", "--domain", "interval", "--n-modes", "20") == 0
    path = read(tmp_path, "spectrum_build.json")["file"]
    assert run_cli(tmp_path, "spectrum", "verify", "--file", path) == 0
    assert read(tmp_path, "spectrum_verify.json")["passed"]


def test_corrupted_cache_exit_code(tmp_path):
    run_cli(tmp_path, "spectrum", "build", "--domain", "interval", "--n-modes", "20")
    path = tmp_path / "spectrum_interval_20.bin"
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0x55
    path.write_bytes(bytes(raw))
    assert run_cli(tmp_path, "spectrum", "verify", "--file", str(path)) == 2


def test_kernels_verify(tmp_path):
    assert run_cli(tmp_path, "kernels", "verify", "--n-modes", "60") == 0
    header = (tmp_path / "green_pairs.csv").read_text().splitlines()[0]
    assert header == "x1,x2,y1,y2,value,route"


def test_potentials_trace_and_profile(tmp_path):
    assert run_cli(tmp_path, "potentials", "trace", "--n-modes", "60") == 0
    rep = read(tmp_path, "potentials_trace.json")
    assert rep["pointwise_last"] == pytest.approx(rep["pointwise_reference"], rel=1e-3)
    assert run_cli(tmp_path, "potentials", "profile", "--beta", "2.5", "--n-modes", "60") == 0
    assert read(tmp_path, "potentials_profile.json")["classification"] == "infinite"
    assert run_cli(tmp_path, "potentials", "profile", "--beta", "0.5", "--n-modes", "60") == 0
    assert read(tmp_path, "potentials_profile.json")["band"] < 30


@pytest.mark.parametrize("args", [
    ["linear", "--source", "1"],
    ["monotone", "--f", "power:p=1.5", "--auto-m", "0.5"],
    ["nonpositive", "--f", "power:p=1.5,sign=-1"],
    ["signed", "--f", "sine:m=1", "--zeta", "cos:0,1"],
    ["bracket", "--f", "sine:m=1"],
])
def test_solve_kinds(tmp_path, args):
    assert run_cli(tmp_path, "solve", *args, "--n-modes", "60") == 0
    kind = args[0]
    assert read(tmp_path, f"solve_{kind}.json")["converged"]
    lines = (tmp_path / f"solve_{kind}_residual.csv").read_text().splitlines()
    assert lines[0].startswith("# schema:")


def test_failed_precondition_exit_code(tmp_path, capsys):
    code = run_cli(tmp_path, "solve", "monotone", "--f", "power:p=1.5,m=1e6", "--n-modes", "60")
    assert code == 3
    assert "precondition" in capsys.readouterr().err


def test_oracle_green_small(tmp_path):
    assert run_cli(tmp_path, "oracle", "green", "--paths", "500", "--n-modes", "60", "--seed", "1") in (0, 1)
    rep = read(tmp_path, "oracle_green.json")
    assert rep["paths"] == 500 and rep["f_id"] == "gauss0.15"


def test_unknown_experiment_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as err:
        run_cli(tmp_path, "experiment", "run", "EXP99")
    assert err.value.code == 2


def test_experiment_reports_are_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["experiment", "run", "EXP2", "--out", str(a)]) == 0
    assert cli.main(["experiment", "run", "EXP2", "--out", str(b)]) == 0
    assert (a / "exp2_report.json").read_bytes() == (b / "exp2_report.json").read_bytes()
    assert "runtime" in read(a, "exp2_timing.json")


def test_experiment_from_config_file(tmp_path):
    cfg = tmp_path / "exp3.json"
    cfg.write_text(json.dumps({"id": "EXP3", "seed": 4}))
    assert cli.main(["experiment", "run", "EXP3", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert read(tmp_path, "exp3_report.json")["config"]["seed"] == 4


def test_output_directory_override(tmp_path, monkeypatch):
    monkeypatch.setenv("PHIGREEN_OUT", str(tmp_path / "env"))
    assert cli.main(["spectrum", "verify", "--domain", "interval", "--n-modes", "10"]) == 0
    assert (tmp_path / "env" / "spectrum_verify.json").exists()


def test_config_rejects_unknown_id():
    with pytest.raises(KeyError):
        cli.ExperimentConfig("EXP0")


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "phigreen", "spectrum", "verify", "--domain", "interval",
                          "--n-modes", "10", "--out", str(tmp_path)], capture_output=True, text=True)
    assert out.returncode == 0
    assert json.loads(out.stdout)["passed"]
