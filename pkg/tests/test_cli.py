import json

import pytest

from permix.cli import EXIT_BUDGET, EXIT_USAGE, EXIT_VALIDATION, ExperimentConfig, run


def only_run_dir(root):
    dirs = [p for p in root.iterdir() if p.is_dir()]
    assert len(dirs) == 1
    return dirs[0]


def run_in(tmp_path, name, *argv):
    out = tmp_path / name
    code = run(["--out", str(out), "--quiet", *argv])
    return code, out


def test_validate_demo(tmp_path):
    code, out = run_in(tmp_path, "a", "validate", "--spec", "demo-96")
    assert code == 0
    d = only_run_dir(out)
    manifest = json.loads((d / "manifest.json").read_text())
    assert manifest["schema_version"] == 1
    assert manifest["config"]["command"] == "validate"
    for name in manifest["files"]:
        assert (d / name).exists()


def test_unknown_flag_is_usage_error(tmp_path):
    assert run_in(tmp_path, "a", "validate", "--spec", "demo-96", "--bogus")[0] == EXIT_USAGE
    assert run(["no-such-command"]) == EXIT_USAGE


def test_unknown_spec_is_validation_error(tmp_path):
    assert run_in(tmp_path, "a", "validate", "--spec", "nonsense-spec")[0] == EXIT_VALIDATION


def test_bad_parameter_is_validation_error(tmp_path):
    code, _ = run_in(tmp_path, "a", "pihat", "--spec", "demo-12", "--samples", "10", "--M", "0", "--s0", "3")
    assert code == EXIT_VALIDATION


def test_infeasible_trap_is_validation_error(tmp_path):
    code, _ = run_in(tmp_path, "a", "counterexample", "--n", "2", "--l", "5")
    assert code == EXIT_VALIDATION


def test_budget_exit_code(tmp_path):
    code, _ = run_in(tmp_path, "a", "cutoff-scan", "--spec", "demo", "--n", "96", "--seeds", "1", "--starts", "1",
                     "--t-max", "3")
    assert code == EXIT_BUDGET


def test_cutoff_scan_is_byte_identical(tmp_path):
    argv = ["cutoff-scan", "--spec", "demo", "--n", "96,192", "--seeds", "2", "--starts", "2", "--t-max", "400"]
    code1, out1 = run_in(tmp_path, "a", *argv)
    code2, out2 = run(["--out", str(tmp_path / "b"), "--quiet", "--workers", "2", *argv]), tmp_path / "b"
    assert code1 == code2 == 0
    d1, d2 = only_run_dir(out1), only_run_dir(out2)
    csvs = sorted(p.name for p in d1.glob("*.csv"))
    assert csvs
    for name in csvs:
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()


def test_reruns_append_new_directories(tmp_path):
    out = tmp_path / "a"
    for _ in range(2):
        assert run(["--out", str(out), "--quiet", "gen-env", "--spec", "demo-12"]) == 0
    dirs = sorted(p.name for p in out.iterdir())
    assert len(dirs) == 2 and dirs[0][:-1] == dirs[1][:-1]
    a, b = (sorted((out / d).glob("*.json")) for d in dirs)
    bodies = [[p.read_text() for p in files if p.name != "manifest.json"] for files in (a, b)]
    assert bodies[0] == bodies[1]


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PERMIX_OUT", str(tmp_path / "env"))
    assert run(["--quiet", "gen-env", "--spec", "demo-12"]) == 0
    assert only_run_dir(tmp_path / "env")


def test_config_digest_tracks_parameters():
    a = ExperimentConfig("x", "demo-12", 0, 1, {"eps": 0.25})
    b = ExperimentConfig("x", "demo-12", 0, 1, {"eps": 0.3})
    assert a.digest() != b.digest()
    assert a.digest() == ExperimentConfig("x", "demo-12", 0, 1, {"eps": 0.25}).digest()


def test_counterexample_small(tmp_path):
    code, out = run_in(tmp_path, "a", "counterexample", "--n", "64", "--l", "3", "--typical", "2",
                       "--t-grid", "10,100,1000")
    assert code == 0
    d = only_run_dir(out)
    report = json.loads((d / "trap_report.json").read_text())
    assert report["trap"]["mode"] == "PLANTED" and report["trap"]["match"]
    assert (d / "escape_curve.csv").read_text().startswith("t,in_ball,geometric_bound\n")


@pytest.mark.slow
def test_counterexample_default_depth(tmp_path):
    code, out = run_in(tmp_path, "a", "counterexample", "--delta", "0.05", "--l", "5", "--plant", "--typical", "1",
                       "--t-max", "20000")
    assert code == 0
    report = json.loads((only_run_dir(out) / "trap_report.json").read_text())
    assert report["trap"]["depth"] == 5 and report["trap"]["match"]
    assert report["median_escape"] > 1e6
