import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from prutf import cli
from prutf.exceptions import ConditioningError, InputError


def _write(path, values, header=None, times=False):
    with open(path, "w") as fh:
        if header:
            fh.write(header + "\n")
        for i, v in enumerate(values):
            v = repr(float(v))
            fh.write(f"{i},{v}\n" if times else f"{v}\n")
    return str(path)


def _series(seed=0, n=120, delta=6.0):
    rng = np.random.default_rng(seed)
    f = np.zeros(n)
    f[40:80] = delta
    return f + rng.standard_normal(n)


def _run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


# -- reading input -----------------------------------------------------------------------

def test_read_series_with_header_and_times(tmp_path):
    y = _series()
    path = _write(tmp_path / "a.csv", y, header="t,y", times=True)
    np.testing.assert_array_equal(cli.read_series(path), y)


def test_read_series_skips_comments_and_blank_lines(tmp_path):
    path = tmp_path / "b.csv"
    path.write_text("# note\n\n1.5\n2.5\n\n# end\n3.5\n")
    np.testing.assert_array_equal(cli.read_series(str(path)), [1.5, 2.5, 3.5])


def test_read_series_from_stdin(monkeypatch):
    monkeypatch.setattr(sys, "stdin", io.StringIO("value\n1\n2\n3\n"))
    np.testing.assert_array_equal(cli.read_series("-"), [1.0, 2.0, 3.0])


@pytest.mark.parametrize("text, line", [
    ("1\n2\nabc\n", 3),
    ("1\n2\n3,4\n", 3),
    ("1,2,3\n", 1),
    ("1\nnan\n", 2),
])
def test_read_series_names_the_bad_line(tmp_path, text, line):
    path = tmp_path / "c.csv"
    path.write_text(text)
    with pytest.raises(InputError, match=f"line {line}"):
        cli.read_series(str(path))


def test_read_series_needs_rows(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("y\n")
    with pytest.raises(InputError):
        cli.read_series(str(path))
    with pytest.raises(InputError):
        cli.read_series(str(tmp_path / "missing.csv"))


# -- detect ----------------------------------------------------------------------------

def test_detect_json_report(tmp_path, capsys):
    path = _write(tmp_path / "y.csv", _series())
    code, out, _ = _run(["detect", "-i", path, "--stop", "--sigma", "1"], capsys)
    assert code == 0
    report = json.loads(out)
    assert report["schema"] == "prutf.detect/1"
    assert report["n"] == 120 and report["order"] == 0
    assert report["policy"] == {"kind": "stop", "alpha": 0.05, "sigma": 1.0, "sigma_mad": False}
    assert report["stop_reason"] == "stopping-rule"
    duals = [p["dual"] for p in report["change_points"]]
    assert {40, 80} <= set(duals)
    for p in report["change_points"]:
        assert p["primal"] == p["dual"] and p["sign"] in (-1, 1) and p["knot"] > 0


def test_detect_csv_output_to_file(tmp_path, capsys):
    path = _write(tmp_path / "y.csv", _series())
    out_path = tmp_path / "cp.csv"
    code, out, _ = _run(["detect", "-i", path, "--steps", "2", "--format", "csv", "-o", str(out_path)], capsys)
    assert code == 0 and out == ""
    rows = list(csv.reader(out_path.open()))
    assert rows[0] == ["dual", "primal", "sign", "knot"]
    assert sorted(int(r[0]) for r in rows[1:]) == [40, 80]


def test_constant_series_reports_lambda_zero(tmp_path, capsys):
    path = _write(tmp_path / "flat.csv", [2.0] * 30, header="y")
    code, out, _ = _run(["detect", "-i", path, "--steps", "5"], capsys)
    assert code == 0
    report = json.loads(out)
    assert report["change_points"] == []
    assert report["stop_reason"] == "λ=0"


def test_mad_policy_records_the_estimate(tmp_path, capsys):
    path = _write(tmp_path / "y.csv", _series())
    code, out, _ = _run(["detect", "-i", path, "--stop", "--sigma-mad"], capsys)
    assert code == 0
    assert json.loads(out)["sigma_used"] == pytest.approx(cli.mad_sigma(_series(), 0))


@pytest.mark.parametrize("flags", [
    [],
    ["--steps", "2", "--stop", "--sigma", "1"],
    ["--stop"],
    ["--stop", "--sigma", "1", "--sigma-mad"],
    ["--steps", "0"],
    ["--stop", "--sigma", "-1"],
])
def test_bad_policies_exit_with_input_error(tmp_path, capsys, flags):
    path = _write(tmp_path / "y.csv", _series())
    code, _, err = _run(["detect", "-i", path, *flags], capsys)
    assert code == 2 and "error" in err


def test_malformed_input_exits_two(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("".join(f"{v}\n" for v in range(36)) + "oops\n")
    code, _, err = _run(["detect", "-i", str(path), "--steps", "1"], capsys)
    assert code == 2 and "line 37" in err


def test_short_series_exits_two(tmp_path, capsys):
    path = _write(tmp_path / "s.csv", [1.0, 2.0, 3.0])
    code, _, _ = _run(["detect", "-i", path, "-r", "1", "--steps", "1"], capsys)
    assert code == 2


def test_numerical_failure_exits_three(tmp_path, capsys, monkeypatch):
    def fail(*args, **kwargs):
        raise ConditioningError("singular Gram matrix")

    monkeypatch.setattr(cli, "run_path", fail)
    path = _write(tmp_path / "y.csv", _series())
    code, _, err = _run(["detect", "-i", path, "--steps", "1"], capsys)
    assert code == 3 and "numerical" in err


# -- infer ----------------------------------------------------------------------------------

def test_infer_reuses_a_detection_report(tmp_path, capsys):
    path = _write(tmp_path / "y.csv", _series(1))
    report = tmp_path / "det.json"
    assert cli.main(["detect", "-i", path, "--stop", "--sigma", "1", "-o", str(report)]) == 0
    code, two_step, _ = _run(["infer", "-i", path, "--detection", str(report), "--sigma", "1"], capsys)
    assert code == 0
    code, one_shot, _ = _run(["infer", "-i", path, "--stop", "--sigma", "1"], capsys)
    assert code == 0
    a, b = json.loads(two_step), json.loads(one_shot)
    assert a["schema"] == "prutf.infer/1"
    assert a["results"] == b["results"]
    assert {r["method"] for r in a["results"]} == {"poly", "global", "local"}
    assert all(r["variance"] == "known" for r in a["results"])


def test_infer_rejects_a_report_for_other_data(tmp_path, capsys):
    report = tmp_path / "det.json"
    assert cli.main(["detect", "-i", _write(tmp_path / "y.csv", _series(1)), "--steps", "2",
                     "-o", str(report)]) == 0
    other = _write(tmp_path / "z.csv", _series(2, delta=0.0))
    code, _, err = _run(["infer", "-i", other, "--detection", str(report)], capsys)
    assert code == 2 and "does not match" in err
    bogus = tmp_path / "bogus.json"
    bogus.write_text('{"schema": "other"}')
    code, _, _ = _run(["infer", "-i", other, "--detection", str(bogus)], capsys)
    assert code == 2


def test_infer_unknown_variance_defaults(tmp_path, capsys):
    path = _write(tmp_path / "y.csv", _series(3))
    code, out, _ = _run(["infer", "-i", path, "--stop", "--sigma-mad"], capsys)
    assert code == 0
    modes = {r["method"]: r["variance"] for r in json.loads(out)["results"]}
    assert modes == {"poly": "pooled", "global": "mad", "local": "pooled"}


def test_infer_csv_columns(tmp_path, capsys):
    path = _write(tmp_path / "y.csv", _series(4))
    code, out, _ = _run(["infer", "-i", path, "--steps", "2", "--method", "poly", "--contrast", "segment",
                         "--format", "csv"], capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert tuple(rows[0]) == cli.INFER_COLUMNS
    assert len(rows) == 2
    for r in rows:
        assert r["contrast"] == "segment" and float(r["p_two_sided"]) < 1e-3
        json.loads(r["truncation"])


def test_infer_one_sided_and_level(tmp_path, capsys):
    path = _write(tmp_path / "y.csv", _series(5))
    code, out, _ = _run(["infer", "-i", path, "--steps", "2", "--method", "poly", "--sigma", "1",
                         "--sided", "one", "--level", "0.9"], capsys)
    assert code == 0
    for r in json.loads(out)["results"]:
        lo, hi = r["ci"]
        assert "inf" in (lo, hi) or "-inf" in (lo, hi)


@pytest.mark.parametrize("flags", [
    ["--variance", "known"],
    ["--method", "poly", "--variance", "mad"],
    ["--method", "global", "--contrast", "segment"],
    ["--contrast", "wide"],
    ["--contrast", "window:x"],
])
def test_infer_bad_requests_exit_two(tmp_path, capsys, flags):
    path = _write(tmp_path / "y.csv", _series(6))
    code, _, _ = _run(["infer", "-i", path, "--steps", "2", *flags], capsys)
    assert code == 2


def test_json_has_no_bare_infinities(tmp_path, capsys):
    path = _write(tmp_path / "y.csv", _series(7))
    code, out, _ = _run(["infer", "-i", path, "--steps", "2", "--sigma", "1", "--sided", "one"], capsys)
    assert code == 0
    assert "Infinity" not in out and "NaN" not in out
    json.loads(out)


# -- simulate -------------------------------------------------------------------------------------

def test_simulate_writes_summary_and_table(tmp_path):
    code = cli.main(["simulate", "--study", "power", "--reps", "2", "--delta-grid", "3,5", "--n", "500",
                     "--methods", "poly,local", "--out-dir", str(tmp_path)])
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["schema"] == "prutf.simulate/1" and summary["study"] == "power"
    assert summary["delta_grid"] == [3.0, 5.0]
    assert summary["config"]["methods"] == ["poly", "local"]
    assert [r["delta"] for r in summary["rows"]] == [3.0, 3.0, 5.0, 5.0]
    rows = list(csv.DictReader((tmp_path / "power.csv").open()))
    assert len(rows) == 4


def test_simulate_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["simulate", "--reps", "2", "--delta-grid", "4", "--seed", "11", "--out-dir", str(a)]) == 0
    assert cli.main(["simulate", "--reps", "2", "--delta-grid", "4", "--seed", "11", "--out-dir", str(b)]) == 0
    assert (a / "coverage.csv").read_bytes() == (b / "coverage.csv").read_bytes()


def test_simulate_qq(tmp_path):
    assert cli.main(["simulate", "--study", "qq", "--reps", "20", "--out-dir", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary["ks_pvalues"]) == {"truncated_z", "untruncated_z", "truncated_t", "untruncated_t"}
    assert summary["reps_used"] == 20
    assert (tmp_path / "qq.csv").read_text().startswith("series,index,pivot,uniform\n")


def test_simulate_bad_method_exits_two(tmp_path):
    assert cli.main(["simulate", "--methods", "oracle", "--reps", "1", "--out-dir", str(tmp_path)]) == 2


def test_console_script_runs(tmp_path):
    path = _write(tmp_path / "y.csv", _series())
    proc = subprocess.run([sys.executable, "-m", "prutf.cli", "detect", "-i", path, "--steps", "2"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["steps"] == 2
