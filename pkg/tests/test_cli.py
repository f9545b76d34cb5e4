import csv
import json
import subprocess
import sys

import pytest

from mfsc.cli import ExperimentConfig, ConfigParse, UnknownExperiment, list_registered, main
from mfsc.configs import config_path


def load(name):
    return json.loads(config_path(name).read_text())


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def test_catalog_lists_shipped_names():
    text = "\n".join(list_registered())
    for name in ("advanced_deterministic", "monotone_follower", "reflected_exponential"):
        assert name in text


def test_unknown_filter_lists_nothing(capsys):
    assert main(["list", "no-such-thing"]) == 0
    assert capsys.readouterr().out == ""


def test_filter_narrows_catalog():
    lines = list_registered("reflected")
    assert lines and all("reflected" in line for line in lines)


def test_norms_run(tmp_path):
    assert main(["run", "point_mass_norms", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert all(abs(v - 2.0) < 1e-3 for v in report["results"]["norm_sq"])
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert set(manifest) == {"config_hash", "seed", "versions", "wall_time", "files"}
    assert {"numpy", "scipy", "python", "mfsc"} <= set(manifest["versions"])


def test_advanced_rbsde_run_writes_solution(tmp_path):
    assert main(["run", "advanced_deterministic", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "solution.csv") as fh:
        rows = list(csv.DictReader(fh))
    y0 = float(next(r["Y"] for r in rows if float(r["t"]) == 0.0))
    assert y0 == pytest.approx(2.125, abs=0.05)


def test_noncommensurate_delay_is_a_config_error(tmp_path, capsys):
    cfg = load("advanced_deterministic") | {"delta": 0.505}
    assert main(["run", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "ConfigParse" in err and "NonCommensurate" in err


def test_unknown_experiment(tmp_path):
    with pytest.raises(UnknownExperiment):
        ExperimentConfig.from_dict({"experiment": "teleport"})
    assert main(["run", write(tmp_path, {"experiment": "teleport"})]) == 1


def test_unknown_registered_name():
    cfg = load("advanced_deterministic") | {"driver": "nope"}
    with pytest.raises(ConfigParse):
        ExperimentConfig.from_dict(cfg)


def test_unreadable_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", str(bad)]) == 1


def test_failed_check_exits_two_and_is_named(tmp_path):
    cfg = load("advanced_deterministic") | {"expect": {"y0": 3.0, "tol": 0.05}}
    out = tmp_path / "o"
    assert main(["run", write(tmp_path, cfg), "--out", str(out)]) == 2
    report = json.loads((out / "report.json").read_text())
    assert report["failed_checks"] == ["y0_matches_expected"]


def test_decreasing_barrier_needs_flag(tmp_path):
    cfg = {"experiment": "rbsde", "T": 1.0, "dt": 0.01, "n_particles": 512, "seed": 1,
           "coefficients": "brownian", "coefficient_params": {"x0": 1.0, "sigma": 0.2},
           "driver": "linear_decay", "driver_params": {"rate": 0.0},
           "barrier": "discounted_put", "barrier_params": {"strike": 1.0, "rate": 0.05}}
    path = write(tmp_path, cfg)
    assert main(["run", path, "--out", str(tmp_path / "a")]) == 1
    with pytest.warns(UserWarning):
        code = main(["run", path, "--out", str(tmp_path / "b"), "--unsafe-barrier"])
    assert code in (0, 2)


def test_seed_flag_overrides_config(tmp_path):
    main(["run", "ou_simulate", "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["run", "ou_simulate", "--out", str(tmp_path / "b"), "--seed", "2"])
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert (a["seed"], b["seed"]) == (1, 2) and a["config_hash"] != b["config_hash"]
    assert (tmp_path / "a" / "moments.csv").read_bytes() != (tmp_path / "b" / "moments.csv").read_bytes()


def test_csvs_identical_across_runs_and_threads(tmp_path):
    cfg = load("ou_simulate") | {"n_particles": 64, "write_paths": True}
    path = write(tmp_path, cfg)
    for name, threads in (("a", "1"), ("b", "1"), ("c", "8")):
        assert main(["run", path, "--out", str(tmp_path / name), "--threads", threads]) == 0
    for fname in ("paths.csv", "moments.csv", "report.json"):
        ref = (tmp_path / "a" / fname).read_bytes()
        assert (tmp_path / "b" / fname).read_bytes() == ref
        assert (tmp_path / "c" / fname).read_bytes() == ref


def test_harvest_everything_fails_control_check(tmp_path):
    cfg = load("monotone_follower_check") | {"n_particles": 1024, "levels": [0.4, 0.5, 0.6],
                                             "slopes": [0.0], "control": "harvest_all"}
    out = tmp_path / "o"
    assert main(["run", write(tmp_path, cfg), "--out", str(out)]) == 2
    report = json.loads((out / "report.json").read_text())
    assert {"sign_condition", "complementarity"} & set(report["failed_checks"])


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mfsc.cli", "run", "reflected_exponential",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "solution.csv").exists() and (tmp_path / "picard.csv").exists()
