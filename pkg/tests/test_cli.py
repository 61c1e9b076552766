import csv
import json

import numpy as np
import pytest

from mild.cli import main
from mild.hsidata import read_abundances, read_cube, validate_abundance

SMALL = {"t_count": 5, "height": 6, "width": 5, "bands": 12, "endmember_count": 3,
         "mutation_times": [2], "seed": 3}


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    (d / "spec.in.json").write_text(json.dumps(SMALL))
    assert main(["generate", "--spec", str(d / "spec.in.json"), "--out", str(d / "gen")]) == 0
    return d / "gen"


def run(argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:  # argparse usage errors
        return exc.code


def test_generate_is_byte_identical(tmp_path, small_dataset):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps(SMALL))
    assert run(["generate", "--spec", spec, "--out", tmp_path / "again"]) == 0
    for name in ("cube.hsc", "truth.hsa", "endmembers.csv", "spec.json"):
        assert (tmp_path / "again" / name).read_bytes() == (small_dataset / name).read_bytes()
    manifest = json.loads((small_dataset / "manifest.json").read_text())
    assert manifest["command"] == "generate"


def test_generate_seed_override(tmp_path, small_dataset):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps(SMALL))
    assert run(["generate", "--spec", spec, "--seed", 4, "--out", tmp_path / "o"]) == 0
    assert (tmp_path / "o" / "cube.hsc").read_bytes() != (small_dataset / "cube.hsc").read_bytes()


def test_usage_errors_exit_2(tmp_path):
    assert run(["generate", "--preset", "synth9", "--out", tmp_path]) == 2
    assert run(["no-such-command"]) == 2
    assert run(["train", "--cube", tmp_path / "x.hsc"]) == 2


def test_bad_spec_exits_1(tmp_path):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"t_count": 5, "nonsense": 1}))
    assert run(["generate", "--spec", spec, "--out", tmp_path / "o"]) == 1
    assert run(["baseline", "fcls", "--cube", tmp_path / "missing.hsc", "--out", tmp_path / "a.hsa", "-p", 3]) == 1


def test_train_unmix_baseline_evaluate(tmp_path, small_dataset):
    cube = small_dataset / "cube.hsc"
    model = tmp_path / "m.mldp"
    assert run(["train", "--cube", cube, "--out", model, "--epochs", 3, "--k", 1,
                "--endmembers", 3, "--seed", 1]) == 0
    assert run(["unmix", "--model", model, "--cube", cube, "--out", tmp_path / "mild.hsa",
                "--endmembers-out", tmp_path / "mild_e.csv"]) == 0
    a = read_abundances(tmp_path / "mild.hsa")
    assert validate_abundance(a).ok and a.t_count == 5
    assert run(["baseline", "fcls", "--cube", cube, "--out", tmp_path / "fcls.hsa", "-p", 3,
                "--endmembers-out", tmp_path / "fcls_e.csv"]) == 0
    out = tmp_path / "m.csv"
    for est, e in (("mild.hsa", "mild_e.csv"), ("fcls.hsa", "fcls_e.csv")):
        assert run(["evaluate", "--cube", cube, "--truth", small_dataset / "truth.hsa",
                    "--truth-endmembers", small_dataset / "endmembers.csv",
                    "--abundances", tmp_path / est, "--endmembers", tmp_path / e,
                    "--method", est.split(".")[0], "--out", out]) == 0
        rows = list(csv.DictReader(out.open()))
        assert list(rows[0]) == ["dataset", "method", "seed", "nrmse_a", "nrmse_y"]
        assert np.isfinite(float(rows[0]["nrmse_a"])) and float(rows[0]["nrmse_y"]) >= 0
    assert run(["export-maps", "--abundances", tmp_path / "mild.hsa", "--cube", cube,
                "--out", tmp_path / "maps"]) == 0
    assert len(list((tmp_path / "maps").glob("*.pgm"))) == 15


def test_evaluate_wall_time_column(tmp_path, small_dataset):
    out = tmp_path / "w.csv"
    assert run(["baseline", "fcls", "--cube", small_dataset / "cube.hsc", "--out", tmp_path / "f.hsa",
                "--endmembers", small_dataset / "endmembers.csv"]) == 0
    assert run(["evaluate", "--cube", small_dataset / "cube.hsc", "--truth", small_dataset / "truth.hsa",
                "--truth-endmembers", small_dataset / "endmembers.csv", "--abundances", tmp_path / "f.hsa",
                "--endmembers", small_dataset / "endmembers.csv", "--wall-time", 1.5, "--out", out]) == 0
    row = next(csv.DictReader(out.open()))
    assert float(row["wall_time"]) == 1.5


def test_verify_theorems(tmp_path, small_dataset):
    model = tmp_path / "m.mldp"
    assert run(["train", "--cube", small_dataset / "cube.hsc", "--out", model, "--epochs", 2, "--k", 1]) == 0
    report = tmp_path / "t.json"
    assert run(["verify-theorems", "--model", model, "--cube", small_dataset / "cube.hsc",
                "--random-models", 3, "--out", report]) == 0
    rep = json.loads(report.read_text())
    assert rep["passed"] is True
    assert len(rep["stability"]) == 4


def test_verify_corrupt_model_exits_1_with_report(tmp_path, small_dataset):
    model = tmp_path / "m.mldp"
    assert run(["train", "--cube", small_dataset / "cube.hsc", "--out", model, "--epochs", 1, "--k", 1]) == 0
    model.write_bytes(model.read_bytes()[:-16])
    report = tmp_path / "t.json"
    assert run(["verify-theorems", "--model", model, "--cube", small_dataset / "cube.hsc",
                "--random-models", 2, "--out", report]) == 1
    rep = json.loads(report.read_text())
    assert rep["passed"] is False
    assert rep["truncation"]  # analytic checks still ran


def test_pipeline_smoke(tmp_path):
    out = tmp_path / "run"
    assert run(["pipeline", "--seed", 7, "--epochs", 1, "--out", out]) == 0
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert [r["method"] for r in rows] == ["fcls", "mild"]
    for r in rows:
        assert np.isfinite(float(r["nrmse_a"])) and np.isfinite(float(r["nrmse_y"]))
    assert read_cube(out / "cube.hsc").t_count == 6
    assert (out / "model.mldp").exists() and (out / "timings.csv").exists()
    assert len(list((out / "maps").glob("mild_t*_e*.pgm"))) == 18
