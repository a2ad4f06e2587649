import csv
import json
import math
import subprocess
import sys

import pytest

from glfluct.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, RunConfig, closed_sigma, main, one_variable_coeffs
from glfluct.intertwine import RSParams
from glfluct.trace_algebra import parse

SMALL_MC = ["--N", "4", "--samples", "200", "--steps", "40", "--batches", "10"]


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def sigma_of(rows, method):
    return [r for r in rows if r["kind"] == "cov" and r["method"] == method]


@pytest.mark.parametrize("r,s,exact", [(1, 0, 1 - math.exp(-1)), (0.5, 0.5, math.e - 1)])
def test_predict_anchor(tmp_path, r, s, exact):
    code = main(["predict", "--r", str(r), "--s", str(s), "--T", "1", "--poly", "tr(X1)",
                 "--N", "8", "--out", str(tmp_path)])
    assert code == EXIT_OK
    rows = read_csv(tmp_path / "predict.csv")
    for method in ("direct", "free", "closed"):
        (row,) = sigma_of(rows, method)
        assert float(row["re"]) == pytest.approx(exact, abs=1e-8)
    meta = json.loads((tmp_path / "predict.meta.json").read_text())
    assert meta["agreement_failures"] == []


def test_predict_json_and_exact_rows(tmp_path):
    code = main(["predict", "--poly", "tr(X1 X1)", "--poly", "tr(X1*)", "--N", "4", "16",
                 "--format", "json", "--out", str(tmp_path)])
    assert code == EXIT_OK
    recs = json.loads((tmp_path / "predict.json").read_text())
    assert {r["N"] for r in recs if r["method"] == "exact"} == {4, 16}


def test_predict_without_polys_is_config_error(tmp_path, capsys):
    assert main(["predict", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "no test functions" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["--r", "-1"],
    ["--T", "-0.5"],
    ["--poly", "tr(X1"],
    ["--poly", "tr(X3)"],
    ["--dmax", "1", "--poly", "tr(X1 X1)"],
])
def test_predict_bad_input(tmp_path, argv):
    assert main(["predict", "--out", str(tmp_path), "--poly", "tr(X1)"] + argv) == EXIT_CONFIG


def test_yaml_and_json_configs(tmp_path):
    (tmp_path / "c.yaml").write_text("r: 0.5\ns: 0.5\nT: 1.0\npolys: ['tr(X1)']\nN: 8\n")
    (tmp_path / "c.json").write_text(json.dumps({"r": 0.5, "s": 0.5, "T": [1.0], "polys": ["tr(X1)"], "N": [8]}))
    for name in ("c.yaml", "c.json"):
        out = tmp_path / name.split(".")[1]
        assert main(["predict", "--config", str(tmp_path / name), "--out", str(out)]) == EXIT_OK
        (row,) = sigma_of(read_csv(out / "predict.csv"), "direct")
        assert float(row["re"]) == pytest.approx(math.e - 1, abs=1e-8)


def test_flags_override_config(tmp_path):
    (tmp_path / "c.yaml").write_text("r: 0.5\ns: 0.5\npolys: ['tr(X1)']\nN: 8\n")
    assert main(["predict", "--config", str(tmp_path / "c.yaml"), "--r", "1", "--s", "0",
                 "--out", str(tmp_path)]) == EXIT_OK
    (row,) = sigma_of(read_csv(tmp_path / "predict.csv"), "direct")
    assert float(row["re"]) == pytest.approx(1 - math.exp(-1), abs=1e-8)


def test_config_errors(tmp_path):
    (tmp_path / "u.yaml").write_text("r: 1\nbogus: 3\n")
    (tmp_path / "l.yaml").write_text("- 1\n- 2\n")
    (tmp_path / "b.json").write_text("{not json")
    for name in ("u.yaml", "l.yaml", "b.json", "missing.yaml"):
        assert main(["predict", "--config", str(tmp_path / name), "--poly", "tr(X1)"]) == EXIT_CONFIG


def test_simulate_is_byte_identical(tmp_path):
    args = ["simulate", "--poly", "tr(X1)", "--poly", "tr(X1 X1*)", "--r", "0.5", "--s", "0.5"] + SMALL_MC
    assert main(args + ["--seed", "3", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--seed", "3", "--out", str(tmp_path / "b")]) == EXIT_OK
    assert main(args + ["--seed", "4", "--out", str(tmp_path / "c")]) == EXIT_OK
    assert main(args + ["--seed", "3", "--out", str(tmp_path / "d"), "--workers", "2"]) == EXIT_OK
    a, b, c, d = ((tmp_path / x / "simulate.csv").read_bytes() for x in "abcd")
    assert a == b == d and a != c


def test_simulate_saves_dataset(tmp_path):
    from glfluct.matrix_lab import PathDataset

    assert main(["simulate", "--save-dataset", "--out", str(tmp_path)] + SMALL_MC) == EXIT_OK
    ds = PathDataset.load(tmp_path / "paths.glbm")
    assert ds.mats.shape == (200, 1, 4, 4)


def test_simulate_bad_seed(tmp_path):
    assert main(["simulate", "--seed", "-1", "--out", str(tmp_path)] + SMALL_MC) == EXIT_CONFIG


def test_compare_passes_and_corrupted_sigma_fails(tmp_path, capsys):
    base = ["compare", "--poly", "tr(X1)", "--poly", "tr(X1 X1)", "--T", "1", "--seed", "1"] + SMALL_MC
    assert main(base + ["--out", str(tmp_path / "ok")]) == EXIT_OK
    rows = read_csv(tmp_path / "ok" / "compare.csv")
    assert {r["row"] for r in rows} == {"mean", "cov", "pcov", "third"}
    assert main(base + ["--out", str(tmp_path / "bad"), "--corrupt-sigma", "3"]) == EXIT_NUMERIC
    assert "z_limit" in capsys.readouterr().err


def test_parse_command(capsys):
    assert main(["parse", "tr(X2 X1) + tr(X1)^2"]) == EXIT_OK
    assert "tr(X1 X2)" in capsys.readouterr().out
    assert main(["parse", "--format", "json", "2*tr(X1 X1*)"]) == EXIT_OK
    d = json.loads(capsys.readouterr().out)
    assert d["degree"] == 2 and d["terms"][0]["re"] == 2
    assert main(["parse", "tr(X2)", "--indices", "1"]) == EXIT_CONFIG


def test_usage_errors_exit_with_config_code():
    with pytest.raises(SystemExit) as e:
        main(["predict", "--N", "many"])
    assert e.value.code == EXIT_CONFIG
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == EXIT_CONFIG


def test_parse_output_reparses(capsys):
    text = "tr(X2 X1) + (0.5-1j)*tr(X1)^2"
    main(["parse", text])
    out = capsys.readouterr().out.strip()
    assert parse(out) == parse(text)


def test_validate_half_and_literal(tmp_path, capsys):
    assert main(["validate", "--out", str(tmp_path)]) == EXIT_OK
    res = json.loads((tmp_path / "validate.json").read_text())
    assert all(r["passed"] for r in res)
    capsys.readouterr()
    assert main(["validate", "--convention", "paper-literal"]) != EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL intertwining oracle" in out and "median_ratio=2.0" in out


def test_calibrate(capsys):
    assert main(["calibrate", "--N", "8", "--T", "1", "--samples", "300", "--steps", "50"]) == EXIT_OK
    assert "confirmed" in capsys.readouterr().out


def test_one_variable_detection():
    assert one_variable_coeffs(parse("2*tr(X1 X1) - tr(X1)")) == ([0j, -1, 2], False)
    assert one_variable_coeffs(parse("tr(X1* X1*)")) == ([0j, 0j, 1], True)
    assert one_variable_coeffs(parse("tr(X1 X1*)")) is None
    assert one_variable_coeffs(parse("tr(X1)^2")) is None
    assert one_variable_coeffs(parse("tr(X1) + tr(X2)")) is None


@pytest.mark.parametrize("P,Q", [("tr(X1)", "tr(X1* X1*)"), ("tr(X1* X1*)", "tr(X1)"),
                                 ("tr(X1 X1)", "2*tr(X1)"), ("tr(X1*)", "1j*tr(X1* X1*)")])
def test_closed_sigma_dispatch(P, Q):
    from glfluct.covariance import sigma_direct

    rs, T = RSParams(2, 0.3), {1: 0.8}
    c = closed_sigma(parse(P), parse(Q), rs, T, 1e-10)
    assert c.value == pytest.approx(sigma_direct(parse(P), parse(Q), rs, T).value, abs=1e-9)


def test_runconfig_defaults():
    cfg = RunConfig()
    assert cfg.N == [64] and cfg.samples == 2000 and cfg.steps == 200
    assert cfg.times == {1: 1.0}


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "glfluct.cli", "parse", "tr(X1)"],
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "tr(X1)"
    bad = subprocess.run([sys.executable, "-m", "glfluct.cli", "predict", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert bad.returncode == EXIT_CONFIG
