import csv
import json
import math
import subprocess
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from hexqg import cli
from hexqg import scenario as scn
from hexqg.errors import CoverageError, NumericFailure, ValidationError

DATA = Path(__file__).parent / "data"
EDGE = [[4, 2], [5, 3]]
BOX = {"n1": [1, 2], "n2": [1, 2]}


def one_edge(**extra):
    raw = {"name": "one-edge", "domain": {"N": 3},
           "potentials": [{"edge": EDGE, "modes": [0.0, 0.3]}],
           "inverse": {"support_box": BOX, "modes": 1}, "seed": 3}
    raw.update(extra)
    return raw


def write(tmp, name, raw):
    path = tmp / name
    path.write_text(json.dumps(raw))
    return str(path)


# ----------------------------------------------------------------------------
# validation


def test_minimal_scenario():
    sc = scn.parse_scenario({"domain": {"N": 2}})
    assert sc.N == 2 and sc.potentials == {} and sc.background is None
    assert len(sc.hash) == 16


def test_hash_ignores_key_order():
    a = scn.parse_scenario({"domain": {"N": 2}, "seed": 1})
    b = scn.parse_scenario({"seed": 1, "domain": {"N": 2}})
    assert a.hash == b.hash


@pytest.mark.parametrize("raw, field", [
    ({"domain": {"N": 2}, "potentials": [{"edge": [[0, 0], [9, 9]], "modes": [0.1]}]},
     "potentials[0].edge"),
    ({"domain": {"N": 3}, "inverse": {"support_box": {"n1": [0, 2], "n2": [1, 2]}}},
     "inverse.support_box"),
    ({"domain": {"N": 2}, "colour": "red"}, "<scenario>"),
    ({"domain": {"N": -1}}, "domain.N"),
    ({"domain": {"N": 2}, "lambda_policy": {"grid": "5:1:3"}}, "lambda_policy.grid"),
])
def test_invalid_scenarios(raw, field):
    with pytest.raises(ValidationError) as info:
        scn.parse_scenario(raw)
    assert field in info.value.details["field"]


def test_unknown_nested_field_is_named():
    with pytest.raises(ValidationError, match="wobble"):
        scn.parse_scenario({"domain": {"N": 2, "wobble": 1}})


def test_potential_outside_box_rejected():
    raw = one_edge()
    raw["potentials"] = [{"edge": [[1, 1], [2, 2]], "modes": [0.1]}]
    with pytest.raises(ValidationError):
        scn.parse_scenario(raw)


def test_random_potentials_are_seeded():
    raw = one_edge(random_potentials={"count": 2, "modes": 2, "amplitude": 0.4})
    a, b = scn.parse_scenario(raw), scn.parse_scenario(raw)
    assert a.potentials == b.potentials and len(a.potentials) == 3
    other = scn.parse_scenario({**raw, "seed": 4})
    assert other.potentials != a.potentials


def test_background_added_to_perturbations():
    sc = scn.parse_scenario(one_edge(background=[0.0, 0.2]))
    e = next(iter(sc.potentials))
    np.testing.assert_allclose(sc.potentials[e].padded(1), [0.0, 0.5])


# ----------------------------------------------------------------------------
# forward datasets


def test_forward_free_single_energy_matches_golden(tmp_path):
    sc = scn.parse_scenario({"domain": {"N": 2}, "lambda_policy": {"grid": "2:2:1"}})
    out = tmp_path / "d.jsonl"
    scn.run_forward(sc, str(out))
    header, records = scn.load_dataset(str(out))
    assert len(records) == 1 and records[0].lam == 2.0
    golden = json.loads((DATA / "free_dn_N2_lambda2.json").read_text())
    keys = [tuple(k) for k in golden["boundary"]]
    pos = [records[0].boundary_order.index(k) for k in keys]
    got = records[0].matrix[np.ix_(pos, pos)]
    np.testing.assert_allclose(got, np.array(golden["matrix"]), atol=1e-10)


def test_forward_skips_exceptional_energy(tmp_path):
    lam = (math.pi / 2) ** 2
    sc = scn.parse_scenario({"domain": {"N": 2},
                             "lambda_policy": {"grid": f"{lam!r}:{lam + 1.0!r}:2"}})
    text = scn.run_forward(sc)
    header = json.loads(text.splitlines()[0])
    assert len(header["skipped"]) == 1
    assert header["skipped"][0][0] == lam and "+0" in header["skipped"][0][1]
    assert len(text.splitlines()) == 2


def test_forward_all_skipped_is_numeric_failure():
    lam = (math.pi / 2) ** 2
    sc = scn.parse_scenario({"domain": {"N": 2}, "lambda_policy": {"grid": f"{lam!r}:{lam!r}:1"}})
    with pytest.raises(NumericFailure):
        scn.run_forward(sc)


def test_forward_is_byte_identical():
    sc = scn.parse_scenario({"domain": {"N": 2}, "lambda_policy": {"grid": "1:50:5"},
                             "potentials": [{"edge": [[1, 1], [2, 2]], "modes": [0.1, 0.2]}]})
    assert scn.run_forward(sc) == scn.run_forward(sc, threads=3)


def test_dataset_rejects_decreasing_energies(tmp_path):
    sc = scn.parse_scenario({"domain": {"N": 1}, "lambda_policy": {"grid": "1:5:3"}})
    lines = scn.run_forward(sc).splitlines()
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join([lines[0], lines[2], lines[1]]) + "\n")
    with pytest.raises(ValidationError):
        scn.load_dataset(str(path))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ds")
    scen = write(tmp, "one.json", one_edge())
    data = str(tmp / "one.jsonl")
    assert cli.main(["forward", scen, "-o", data, "--threads", "4"]) == 0
    return tmp, scen, data


# ----------------------------------------------------------------------------
# inversion and reports


def test_dataset_round_trip(dataset, capsys):
    tmp, scen, data = dataset
    out = tmp / "rep"
    assert cli.main(["invert", data, "-o", str(out), "--scenario", scen]) == 0
    assert "max mode error" in capsys.readouterr().out
    rep = json.loads((out / "report.json").read_text())
    assert rep["mode"] == "dataset" and rep["max_mode_error"] < 1e-3
    assert rep["perturbation_detected"] and rep["flags"] == []
    assert scn.load_report(str(out / "report.json")) == rep
    # separate invocations are byte identical; within one process BLAS kernels
    # may pick alignment dependent paths, so only agreement to 1e-9 is expected there
    runs = [tmp / "rep_a", tmp / "rep_b"]
    for r in runs:
        subprocess.run([sys.executable, "-m", "hexqg.cli", "invert", data, "-o", str(r)],
                       check=True, capture_output=True)
    for name in ("report.json", "samples.csv", "spectra.csv", "samples.svg", "potentials.svg"):
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()
    other = json.loads((runs[0] / "report.json").read_text())
    for ea, eb in zip(rep["edges"], other["edges"]):
        assert ea["edge"] == eb["edge"] and ea["relation"] == eb["relation"]
        np.testing.assert_allclose(ea["recovered_modes"], eb["recovered_modes"], atol=1e-9)
    # CSV shape: one row per grid energy per support edge
    with open(out / "samples.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(rep["grid"]) * len(rep["edges"])
    assert {"scenario_hash", "edge", "relation", "lambda", "pipeline_value", "recovered_s"} <= set(rows[0])
    for name in ("samples.svg", "potentials.svg"):
        root = ET.parse(out / name).getroot()
        assert root.tag.endswith("svg")


def test_live_round_trip(tmp_path):
    sc = scn.parse_scenario(one_edge())
    rep = scn.run_inverse(sc).data
    assert rep["mode"] == "live" and rep["max_mode_error"] < 1e-3
    scn.emit_report(rep, str(tmp_path), ("json",))
    assert json.loads((tmp_path / "report.json").read_text()) == rep


def test_missing_energy_is_coverage_error(dataset, tmp_path, capsys):
    _, _, data = dataset
    lines = Path(data).read_text().splitlines()
    short = tmp_path / "short.jsonl"
    # the last record belongs to one of the rotated frames
    short.write_text("\n".join(lines[:-1]) + "\n")
    header, records = scn.load_dataset(str(short))
    sc = scn.parse_scenario(header["scenario"])
    with pytest.raises(CoverageError) as info:
        scn.run_inverse(sc, (header, records))
    assert info.value.details["count"] >= 1
    assert cli.main(["invert", str(short), "-o", str(tmp_path / "rep")]) == 4
    assert "missing" in capsys.readouterr().err


def test_provenance_mismatch_refused(dataset, tmp_path):
    _, _, data = dataset
    other = write(tmp_path, "other.json", one_edge(seed=99))
    assert cli.main(["invert", data, "--scenario", other, "-o", str(tmp_path / "r")]) == 2
    assert not (tmp_path / "r").exists()


def test_all_background_is_flagged():
    raw = one_edge(potentials=[])
    rep = scn.run_inverse(scn.parse_scenario(raw)).data
    assert not rep["perturbation_detected"]
    assert rep["flags"] == ["no in-support perturbation detected"]
    assert rep["max_mode_error"] < 1e-6


# ----------------------------------------------------------------------------
# command line


def test_cli_check(tmp_path, capsys):
    path = write(tmp_path, "s.json", one_edge())
    assert cli.main(["check", path]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["boundary_vertices"] == 18 and out["support_edges"] > 0
    assert all(f is not None for f in out["frames"])


def test_cli_exit_codes(tmp_path, capsys):
    bad = write(tmp_path, "bad.json", {"domain": {"N": 2}, "extra": 1})
    assert cli.main(["check", bad]) == 2
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert cli.main(["check", str(broken)]) == 2
    assert cli.main(["check", str(tmp_path / "absent.json")]) == 2
    lam = (math.pi / 2) ** 2
    onlybad = write(tmp_path, "z.json", {"domain": {"N": 2}, "lambda_policy": {"grid": f"{lam!r}:{lam!r}:1"}})
    assert cli.main(["forward", onlybad, "-o", str(tmp_path / "z.jsonl")]) == 3
    good = write(tmp_path, "g.json", {"domain": {"N": 1}})
    assert cli.main(["forward", good, "-o", str(tmp_path / "g.jsonl"), "--lambda-grid", "1:3:3"]) == 0
    assert cli.main(["forward", good, "-o", str(tmp_path / "g.jsonl"), "--lambda-grid", "oops"]) == 2
    err = capsys.readouterr().err
    assert "error:" in err


def test_cli_plot(dataset, tmp_path):
    tmp, _, data = dataset
    out = tmp_path / "rep"
    assert cli.main(["invert", data, "-o", str(out), "--no-svg"]) == 0
    assert not (out / "samples.svg").exists()
    assert cli.main(["plot", str(out / "report.json")]) == 0
    ET.parse(out / "potentials.svg")
