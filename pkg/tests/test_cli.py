import json

import numpy as np
import pytest

from hetid.cli import format_equation, main


def run(argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    assert run(["simulate", "--C", 2, "--t-end", 20, "--seed", 3, "--out", out]) == 0
    return out


def manifest(d):
    return next(d.glob("*.json"))


def test_simulate_is_reproducible(dataset, tmp_path):
    again = tmp_path / "ds"
    assert run(["simulate", "--C", 2, "--t-end", 20, "--seed", 3, "--out", again]) == 0
    names = sorted(p.name for p in dataset.iterdir())
    assert names == sorted(p.name for p in again.iterdir())
    for n in names:
        assert (dataset / n).read_bytes() == (again / n).read_bytes()


def test_usage_errors(tmp_path, capsys):
    assert run(["simulate", "--sigma", -1, "--out", tmp_path / "x"]) == 2
    assert run(["identify", tmp_path / "missing.json"]) == 2
    assert "manifest not found" in capsys.readouterr().err
    bad = tmp_path / "cfg.json"
    bad.write_text("[1, 2]")
    assert run(["simulate", "--config", bad, "--out", tmp_path / "y"]) == 2


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"generation.C": 3, "generation.t_end": 10}))
    assert run(["simulate", "--config", cfg, "--C", 1, "--out", tmp_path / "d"]) == 0
    meta = json.loads(manifest(tmp_path / "d").read_text())
    assert len(meta["experiments"]) == 1


def test_derivatives_and_dictionary(dataset, tmp_path):
    assert run(["derivatives", manifest(dataset), "--k", 2, "--out", tmp_path / "der"]) == 0
    assert len(list((tmp_path / "der").glob("derivatives_*.csv"))) == 2
    assert run(["dictionary", manifest(dataset), "--out", tmp_path / "dic"]) == 0
    assert (tmp_path / "dic" / "spec.json").is_file()
    assert run(["derivatives", manifest(dataset), "--k", 50, "--out", tmp_path / "bad"]) == 2


def test_identify_group_lasso(dataset, tmp_path, capsys):
    out = tmp_path / "res.json"
    assert run(["identify", manifest(dataset), "--algorithm", "group-lasso", "--states", "1,3",
                "--out", out]) == 0
    res = json.loads(out.read_text())
    assert res["algorithm"] == "group-lasso"
    assert [s["state"] for s in res["states"]] == [1, 3]
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("dx1 = ") and lines[1].startswith("dx3 = ")
    assert run(["identify", manifest(dataset), "--algorithm", "lasso", "--out", out]) == 2
    assert run(["identify", manifest(dataset), "--states", "9", "--out", out]) == 2


def test_format_equation():
    names = ["x3", "hill(x2,1,0,3)", "1"]
    w = np.array([[-1.0, -0.94], [40.0, 38.4], [0.5, 0.52]])
    assert format_equation(2, w, [0, 1, 2], names) == "dx3 = 39.2·hill(x2,1,0,3) − 0.97·x3 + 0.51"
    assert format_equation(0, w, [], names) == "dx1 = 0"
    assert format_equation(0, w, [0], names) == "dx1 = −0.97·x3"


def test_sweep_threads_identical(tmp_path):
    common = ["sweep", "--C-grid", "1,2", "--M-grid", "10", "--repeats", 1, "--t-end", 15, "--k-max", 2]
    assert run(common + ["--threads", 1, "--out", tmp_path / "a"]) == 0
    assert run(common + ["--threads", 2, "--out", tmp_path / "b"]) == 0
    for name in ("runs.csv", "summary.json", "heatmap_full.csv", "heatmap_group_lasso.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
