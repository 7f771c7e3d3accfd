import csv
import json

import pytest
import yaml

from hetbounds import __version__
from hetbounds.cli import main, parse_grid


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--n", "1500", "--seed", "3", "--out", str(out)]) == 0
    schema = json.loads((out / "manifest.json").read_text())["schema"]
    return out, schema


def _estimate_config(tmp_path, simulated, **extra):
    out, schema = simulated
    cfg = {"data": {"path": str(out / "data.csv")}, "schema": schema, "folds": 2, "seed": 4,
           "heterogeneity": {"columns": [0]}, "grid": "0.1:0.9:9", **extra}
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_parse_grid_forms():
    assert parse_grid("0.1,0.5") == [0.1, 0.5]
    assert parse_grid("0:1:3") == [0.0, 0.5, 1.0]
    assert parse_grid({"start": 0, "stop": 1, "num": 2}) == [0.0, 1.0]


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0 and __version__ in capsys.readouterr().out


def test_simulate_writes_data_and_truth(simulated):
    out, schema = simulated
    assert len(_read(out / "data.csv")) == 1500
    truth = _read(out / "truth.csv")
    assert len(truth) == 50
    assert all(float(r["theta_L"]) <= float(r["theta"]) <= float(r["theta_U"]) for r in truth)


def test_estimate_is_byte_identical_across_runs_and_manifest_replay(tmp_path, simulated):
    cfg = _estimate_config(tmp_path, simulated)
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["estimate", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["estimate", "--config", str(cfg), "--out", str(b)]) == 0
    assert main(["estimate", "--config", str(a / "manifest.json"), "--out", str(c)]) == 0
    for name in ("curves.csv", "intervals.csv", "summary.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes() == (c / name).read_bytes(), name
    rows = _read(a / "intervals.csv")
    assert len(rows) == 9
    assert all(float(r["ci_lo"]) <= float(r["theta_L"]) for r in rows)


def test_constant_basis_curve_equals_summary(tmp_path, simulated):
    cfg = _estimate_config(tmp_path, simulated, basis={"candidates": [{"kind": "constant"}]})
    out = tmp_path / "o"
    assert main(["estimate", "--config", str(cfg), "--out", str(out)]) == 0
    summary = _read(out / "summary.csv")[0]
    for row in _read(out / "curves.csv"):
        assert float(row["theta_L"]) == pytest.approx(float(summary["theta_L"]), rel=1e-9)
        assert float(row["theta_U"]) == pytest.approx(float(summary["theta_U"]), rel=1e-9)


def test_estimate_with_bootstrap_writes_band(tmp_path, simulated):
    cfg = _estimate_config(tmp_path, simulated, bootstrap_reps=200, inference={"band_alpha": 0.1})
    out = tmp_path / "o"
    assert main(["estimate", "--config", str(cfg), "--out", str(out)]) == 0
    band = _read(out / "bands.csv")
    assert len(band) >= 101
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["bootstrap"]["c_lower"] < 0 < manifest["bootstrap"]["c_upper"]


def test_schema_error_exits_nonzero_with_structured_message(tmp_path, simulated, capsys):
    out, schema = simulated
    bad = dict(schema, outcome="no_such_column")
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"data": {"path": str(out / "data.csv")}, "schema": bad}))
    code = main(["estimate", "--config", str(path), "--out", str(tmp_path / "x")])
    assert code != 0
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert set(err) == {"error", "module", "message"}


def test_unknown_keys_and_zero_reps_are_config_errors(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    for bad in ({"roy": {"bogus": 1}}, {"learner": {}}):
        path.write_text(yaml.safe_dump(bad))
        assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "s")]) == 2
    assert main(["coverage", "--reps", "0", "--out", str(tmp_path / "c")]) == 2
    assert main(["estimate", "--out", str(tmp_path / "e")]) == 2
    assert "ConfigError" in capsys.readouterr().err


def test_coverage_run_writes_one_row_per_grid_point(tmp_path):
    out = tmp_path / "cov"
    code = main(["coverage", "--reps", "2", "--n", "800", "--threads", "1", "--seed", "1",
                 "--out", str(out)])
    assert code == 0
    rows = _read(out / "coverage.csv")
    assert len(rows) == 9
    assert all(0.0 <= float(r["coverage"]) <= 1.0 for r in rows)


def test_power_run_is_deterministic(tmp_path):
    args = ["power", "--reps", "2", "--n", "800", "--threads", "1", "--seed", "2"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "power.csv").read_bytes() == (tmp_path / "b" / "power.csv").read_bytes()
    assert len(_read(tmp_path / "a" / "power.csv")) == 22
