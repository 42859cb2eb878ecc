import json
import os

import numpy as np
import pytest

from mflqg.cli import run
from mflqg.errors import DimensionError, ScenarioIOError, ValidationError
from mflqg.output import dumps, emit_plot_data
from mflqg.scenario import format_scenario, load_scenario, parse_scenario
from mflqg.simulate import SimulationResult

BAD_R = """n = 1
r = 1
A = 0
Q = 1
R = -1
R0 = 1
"""


def test_format_parse_roundtrip(bench):
    text = format_scenario(bench, {"steps": 32, "N": [2, 4]})
    p, run_defaults = parse_scenario(text)
    for k in ("A", "B", "D", "C0", "D0", "Q", "R", "R0", "G", "Gamma", "Gamma0", "eta0", "x0"):
        assert np.array_equal(getattr(p, k), getattr(bench, k)), k
    assert run_defaults == {"steps": 32, "N": [2, 4]}


def test_parse_errors():
    with pytest.raises(ScenarioIOError, match="unknown key"):
        parse_scenario("n = 1\nr = 1\nA = 0\nQ = 1\nR = 1\nR0 = 1\nfoo = 2\n")
    with pytest.raises(ScenarioIOError, match="missing required"):
        parse_scenario("n = 1\nr = 1\nA = 0\n")
    with pytest.raises(DimensionError):
        parse_scenario("n = 2\nr = 1\nA = 0 1 2\nQ = 1 0 0 1\nR = 1\nR0 = 1 0 0 1\n")
    with pytest.raises(ScenarioIOError):
        load_scenario("bundled:nosuch")


def test_csv_vector_function(tmp_path):
    (tmp_path / "f.csv").write_text("t,v1\n0,0\n1,2\n")
    (tmp_path / "s.scn").write_text("n = 1\nr = 1\nA = 0\nQ = 1\nR = 1\nR0 = 1\nf = csv:f.csv\n")
    p, _ = load_scenario(str(tmp_path / "s.scn"))
    assert np.allclose(p.f(0.5), [1.0])
    with pytest.raises(ScenarioIOError):
        format_scenario(p)


def test_dumps_is_deterministic_and_exact():
    text = dumps({"b": 0.1, "a": [np.float64(1 / 3), float("nan")], "c": np.int64(2)})
    assert text.index('"a"') < text.index('"b"')
    assert "0.33333333333333331" in text and '"nan"' in text
    assert json.loads(text)["b"] == 0.1


def test_cli_validate_example61(tmp_path):
    assert run(["validate", "--scenario", "bundled:example61", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["h1"]["ok"] is True
    assert np.allclose(rep["derived"]["G_minus_Xi1G"], 0)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["subcommand"] == "validate" and "report.json" in man["files"]


def test_cli_certify_rejects_indefinite_R(tmp_path, capsys):
    scn = tmp_path / "bad.scn"
    scn.write_text(BAD_R)
    assert run(["certify", "--scenario", str(scn), "--out", str(tmp_path / "o")]) == 1
    cert = json.loads((tmp_path / "o" / "certificates.json").read_text())
    assert "R > 0" in json.dumps(cert)
    assert run(["solve", "--scenario", str(scn), "--out", str(tmp_path / "o2")]) == 1
    assert "R > 0" in capsys.readouterr().err


def test_cli_exit_codes(tmp_path):
    assert run(["validate", "--scenario", str(tmp_path / "missing.scn"), "--out", str(tmp_path)]) == 3
    assert run(["study", "--scenario", "bundled:benchmark", "--out", str(tmp_path), "--N", "2,4"]) == 1
    assert run(["bogus"]) == 1


def test_cli_solve_and_study_schema(tmp_path):
    out = tmp_path / "study"
    assert run(["study", "--scenario", "bundled:benchmark", "--out", str(out), "--steps", "32",
                "--paths", "16", "--N", "2,4,8"]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert {"N", "per_N", "slopes", "bounded", "notes"} <= set(rep)
    header = (out / "results.csv").read_text().splitlines()[0]
    assert header == "N,replicate,per_capita_cost,mf_error_sup_sq,sigma0_gap_sq"
    assert sorted(os.listdir(out / "plots")) == ["cost_gap.dat", "mf_error.dat", "plot.gp"]
    sol = tmp_path / "solve"
    assert run(["solve", "--scenario", "bundled:benchmark", "--out", str(sol), "--steps", "64"]) == 0
    rep = json.loads((sol / "report.json").read_text())
    assert max(v for k, v in rep["residuals"].items() if k != "solution_scale") < 1e-6


def test_emit_plot_data(tmp_path):
    per = [{"N": N, "mf_error_sup_sq": 1.0 / N, "mf_error_sup_sq_se": 0.01, "cost_gap": 0.0 if N == 8 else 0.5 / N,
            "cost_gap_se": 0.02} for N in (2, 4, 8)]
    res = SimulationResult([2, 4, 8], per, [], {}, True, [], {})
    emit_plot_data(res, str(tmp_path))
    mf = (tmp_path / "mf_error.dat").read_text().splitlines()
    cg = (tmp_path / "cost_gap.dat").read_text().splitlines()
    assert mf[0] == "N,mf_error_sup_sq,se" and len(mf) == 4
    assert cg[0] == "N,cost_gap,se" and len(cg) == 3
    assert "mf_error.dat" in (tmp_path / "plot.gp").read_text()
    with pytest.raises(ValidationError):
        emit_plot_data(SimulationResult([], [], [], {}, True, [], {}), str(tmp_path / "e"))


def _tree(d):
    out = {}
    for root, _, files in os.walk(d):
        for f in files:
            if f in ("timings.txt", "manifest.json"):
                continue
            full = os.path.join(root, f)
            out[os.path.relpath(full, d)] = open(full, "rb").read()
    return out


def test_reruns_are_byte_identical_across_threads(tmp_path):
    args = ["--scenario", "bundled:benchmark", "--steps", "32", "--paths", "40", "--N", "2,4,8", "--seed", "3"]
    assert run(["study", "--out", str(tmp_path / "a"), "--threads", "1"] + args) == 0
    assert run(["study", "--out", str(tmp_path / "b"), "--threads", "4"] + args) == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a.keys() == b.keys() and a == b
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    ma.pop("out"), mb.pop("out")
    assert ma == mb
