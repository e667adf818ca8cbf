import csv
import json

import pytest

from cusplab.cli import main

SMALL_GRIDS = {
    "section": {"ny": 12, "nlambda": 12},
    "branch": {"nh": 7, "nlambda": 7},
    "fiber": {"nx": 6, "ny": 6, "nlambda": 6},
}


def run(tmp_path, command, cfg=None, *extra):
    args = [command, "--out", str(tmp_path / "out"), "--jobs", "1", *extra]
    if cfg is not None:
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        args += ["--config", str(path)]
    return main(args)


def read(tmp_path, name):
    return json.loads((tmp_path / "out" / name).read_text())


def bifurcation_rows(tmp_path):
    with open(tmp_path / "out" / "bifurcation.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["lambda", "h_plus", "h_minus"]
    return [tuple(float(c) for c in r) for r in rows[1:]]


def test_bifurcation_rows(tmp_path):
    assert run(tmp_path, "bifurcation", {"bifurcation": {"lambda_max": 3, "n": 4}}) == 0
    assert (3.0, 2.0, -2.0) in bifurcation_rows(tmp_path)
    assert run(tmp_path, "bifurcation", {"bifurcation": {"lambda_max": 0.75, "n": 5}}) == 0
    assert bifurcation_rows(tmp_path)[-1] == (0.75, 0.25, -0.25)


def test_bifurcation_n1_is_config_error(tmp_path):
    assert run(tmp_path, "bifurcation", {"bifurcation": {"n": 1}}) == 1


@pytest.mark.parametrize(
    "cfg",
    [
        {"map": {"type": "spline"}},
        {"model": {"g": "1+"}},
        {"grids": {"section": {"ny": 1}}},
        {"tolerances": {"roundtrip": -1}},
        {"seed": "x"},
        {"unknown": 1},
    ],
)
def test_config_errors(tmp_path, cfg):
    assert run(tmp_path, "roundtrip", cfg) == 1


def test_missing_config_file(tmp_path):
    assert main(["roundtrip", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 1


def test_bad_command():
    assert main(["frobnicate"]) == 1


def test_roundtrip_pass(tmp_path):
    assert run(tmp_path, "roundtrip", {"grids": SMALL_GRIDS}) == 0
    doc = read(tmp_path, "roundtrip.json")
    assert doc["experiment"] == "roundtrip" and doc["pass"] is True
    assert doc["defects"]["roundtrip"]["max"] <= 1e-6
    assert 0.98 <= doc["indicators"]["directional_ratio"] <= 1.02
    for name in ("branch_outer.csv", "branch_swallowtail.csv"):
        assert (tmp_path / "out" / name).exists()


def test_roundtrip_identity(tmp_path):
    assert run(tmp_path, "roundtrip", {"map": {"type": "identity"}, "grids": SMALL_GRIDS}) == 0
    doc = read(tmp_path, "roundtrip.json")
    assert all(d["max"] == 0 for d in doc["defects"].values())


def test_roundtrip_non_symplectic_map(tmp_path, capsys):
    cfg = {"map": {"type": "explicit", "mu_x": "x+0.1", "mu_y": "y"}, "grids": SMALL_GRIDS}
    assert run(tmp_path, "roundtrip", cfg) == 2
    assert "h_preservation" in capsys.readouterr().err


def test_scan(tmp_path):
    cfg = {"map": {"type": "oracle", "v": "0.05*(1+h+lambda^2)"}, "grids": SMALL_GRIDS}
    assert run(tmp_path, "scan", cfg) == 0
    assert read(tmp_path, "smoothness.json")["pass"] is True
    assert run(tmp_path, "scan", {"map": {"type": "identity"}, "grids": SMALL_GRIDS}) == 0
    cfg["grids"] = {"branch": {"bounds": [[-0.3, 0.3], [-0.4, -0.1]]}}
    assert run(tmp_path, "scan", cfg) == 1


def test_suspend(tmp_path):
    cfg = {"suspension": {"starts": 6, "near": 2}}
    assert run(tmp_path, "suspend", cfg) == 0
    assert read(tmp_path, "suspension.json")["defects"]["period_defect"]["max"] <= 1e-6
    cfg = {"map": {"type": "identity"}, "suspension": {"starts": 4, "near": 1}}
    assert run(tmp_path, "suspend", cfg) == 0
    assert read(tmp_path, "suspension.json")["defects"]["period_defect"]["max"] == 0


def test_suspend_box_exit(tmp_path, capsys):
    cfg = {"suspension": {"points": [[-1.19, -1.19, 0.0]]}}
    assert run(tmp_path, "suspend", cfg) == 3
    assert "-1.19" in capsys.readouterr().err


def test_negcontrol(tmp_path):
    assert run(tmp_path, "negcontrol") == 0
    doc = read(tmp_path, "negcontrol.json")
    assert 1.38 <= doc["ratio_at_smallest"] <= 1.45
    assert len(doc["ratios"]) == 3


def test_outputs_byte_identical(tmp_path):
    cfg = {"grids": SMALL_GRIDS, "seed": 7}
    files = {}
    for i in range(2):
        assert run(tmp_path, "roundtrip", cfg) == 0
        files[i] = {n: (tmp_path / "out" / n).read_bytes() for n in ("roundtrip.json", "branch_outer.csv", "branch_swallowtail.csv")}
    assert files[0] == files[1]
