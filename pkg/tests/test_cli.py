import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from spatial_interference.cli import main
from spatial_interference.panel import write_panel_csv
from spatial_interference.simulation import SimConfig, generate


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, _ = generate(SimConfig(R=4, C=4, n=80, delta=(0.02,)), 0, 0.02)
    write_panel_csv(data, root / "panel.csv", root / "panel.json")
    return root


def run(*args):
    return main([str(a) for a in args])


def data_args(root):
    return ["--data", root / "panel.csv", "--meta", root / "panel.json"]


@pytest.fixture(scope="module")
def fitted(workdir):
    assert run("fit", *data_args(workdir), "--out", workdir / "fit.json", "--lambda", "0.05") == 0
    return workdir / "fit.json"


def test_simulate_minimal_and_sweep(tmp_path):
    (tmp_path / "one.json").write_text(json.dumps({"R": 8, "C": 8, "delta": [0.0], "replications": 10,
                                                   "n_boot": 50, "lam": 0.05}))
    assert run("simulate", "--config", tmp_path / "one.json", "--out", tmp_path / "one") == 0
    rows = list(csv.DictReader(open(tmp_path / "one" / "metrics.csv")))
    assert [r["method"] for r in rows] == ["birs", "stepdown"]
    prov = json.loads((tmp_path / "one" / "provenance.json").read_text())
    assert prov["seed"] == 0 and prov["config"]["replications"] == 10 and "version" in prov

    (tmp_path / "sweep.json").write_text(json.dumps({"R": 4, "C": 4, "n": 50, "delta": [0.0, 0.01, 0.02],
                                                     "replications": 2, "n_boot": 30, "lam": 0.05}))
    assert run("simulate", "--config", tmp_path / "sweep.json", "--out", tmp_path / "sweep") == 0
    rows = list(csv.DictReader(open(tmp_path / "sweep" / "metrics.csv")))
    assert len(rows) == 3 * 2
    assert [float(r["delta"]) for r in rows] == [0.0, 0.0, 0.01, 0.01, 0.02, 0.02]


def test_simulate_flag_overrides(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"R": 4, "C": 4, "n": 50, "replications": 5, "n_boot": 20,
                                                 "lam": 0.05}))
    assert run("simulate", "--config", tmp_path / "c.json", "--out", tmp_path / "o", "--replications", 1,
               "--seed", 9) == 0
    rows = list(csv.DictReader(open(tmp_path / "o" / "metrics.csv")))
    assert rows[0]["reps"] == "1"
    assert json.loads((tmp_path / "o" / "provenance.json").read_text())["seed"] == 9


def test_simulate_bad_config(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"delta": [-1.0]}))
    assert run("simulate", "--config", tmp_path / "bad.json", "--out", tmp_path / "o") == 2
    (tmp_path / "typo.json").write_text(json.dumps({"replicates": 3}))
    assert run("simulate", "--config", tmp_path / "typo.json", "--out", tmp_path / "o") == 2
    (tmp_path / "broken.json").write_text("{")
    assert run("simulate", "--config", tmp_path / "broken.json", "--out", tmp_path / "o") == 2


def test_fit_refuses_small_A(workdir):
    assert run("fit", *data_args(workdir), "--out", workdir / "x.json", "--lambda", 0, "--A", 0) == 2
    assert not (workdir / "x.json").exists()


def test_fit_artifact(fitted):
    doc = json.loads(fitted.read_text())
    assert doc["schema_version"].startswith("1.") and doc["kind"] == "fit"


def test_malformed_csv_reports_line(workdir, tmp_path, capsys):
    lines = (workdir / "panel.csv").read_text().splitlines()
    lines[6] = lines[6].replace(",", ",oops", 1)
    (tmp_path / "bad.csv").write_text("\n".join(lines) + "\n")
    code = run("fit", "--data", tmp_path / "bad.csv", "--meta", workdir / "panel.json", "--out", tmp_path / "f.json")
    assert code == 2 and ":7" in capsys.readouterr().err


def test_missing_file_and_bad_args(workdir, tmp_path):
    assert run("fit", "--data", tmp_path / "nope.csv", "--meta", workdir / "panel.json", "--out", tmp_path / "f") == 2
    assert run("fit", *data_args(workdir)) == 2
    assert run("test", *data_args(workdir), "--out", tmp_path / "t", "--fit", tmp_path / "f", "--threads", 0) == 2


def test_fit_data_mismatch(workdir, fitted, tmp_path):
    data, _ = generate(SimConfig(R=4, C=5, n=80), 0, 0.0)
    write_panel_csv(data, tmp_path / "other.csv", tmp_path / "other.json")
    code = run("test", "--data", tmp_path / "other.csv", "--meta", tmp_path / "other.json", "--fit", fitted,
               "--out", tmp_path / "t.json", "--boot", 20)
    assert code == 2


def test_zero_interference_fit_does_not_reject(workdir, tmp_path):
    assert run("fit", *data_args(workdir), "--out", tmp_path / "f.json", "--lambda", 0.05, "--A", 1e6) == 0
    assert not np.any(json.loads((tmp_path / "f.json").read_text())["S"])
    assert run("test", *data_args(workdir), "--fit", tmp_path / "f.json", "--out", tmp_path / "t.json",
               "--boot", 50) == 0
    doc = json.loads((tmp_path / "t.json").read_text())
    assert doc["reject"] is False and doc["T_n"] == 0.0


def test_detect_compare_and_ate(workdir, fitted, tmp_path):
    ens = tmp_path / "ens.bin"
    common = [*data_args(workdir), "--fit", fitted, "--boot", 200, "--ensemble", ens]
    assert run("detect", *common, "--method", "birs", "--out", tmp_path / "birs.json") == 0
    assert ens.exists()
    assert run("detect", *common, "--method", "stepdown", "--out", tmp_path / "step.json",
               "--compare", tmp_path / "birs.json") == 0
    birs = json.loads((tmp_path / "birs.json").read_text())
    step = json.loads((tmp_path / "step.json").read_text())
    cmp = step["comparison"]
    assert cmp["other_method"] == "birs"
    assert cmp["size"] == len(step["rejected"]) and cmp["other_size"] == len(birs["rejected"])
    assert cmp["subset_of_other"] == set(step["rejected"]).issubset(birs["rejected"])
    assert birs["rejected"], "strong interference should be detected"

    assert run("ate", *data_args(workdir), "--detected", tmp_path / "birs.json", "--out", tmp_path / "a.json") == 0
    assert run("ate", *data_args(workdir), "--mean-field", "--out", tmp_path / "mf.json") == 0
    post, mf = (json.loads((tmp_path / n).read_text()) for n in ("a.json", "mf.json"))
    assert post["estimator"] == "post_detection" and mf["estimator"] == "mean_field"
    assert len(post["per_unit"]) == 4 and np.isfinite(post["ate"])
    assert run("ate", *data_args(workdir), "--out", tmp_path / "x.json") == 2


def test_detect_persists_default_ensemble(workdir, fitted, tmp_path):
    assert run("detect", *data_args(workdir), "--fit", fitted, "--boot", 30, "--out", tmp_path / "d.json") == 0
    assert (tmp_path / "d.ensemble.bin").exists()


def test_entry_point_version():
    out = subprocess.run([sys.executable, "-m", "spatial_interference.cli", "--version"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and out.stdout.strip()
