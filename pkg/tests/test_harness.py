import hashlib
import json
import time

import pytest
import yaml

from sandsink import harness
from sandsink.__main__ import main

SMALL_E2 = {"volumes": [[2]], "burn_in": 50, "n_samples": 3000}


@pytest.fixture(autouse=True)
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.OUTPUT_ENV, str(tmp_path / "runs"))
    return tmp_path / "runs"


def write_config(tmp_path, raw, name="c.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(raw))
    return p


def test_catalog():
    cat = harness.list_experiments()
    assert [e.id for e in cat] == [f"E{i}" for i in range(1, 8)]
    assert all(e.anchor and e.description for e in cat)
    assert harness.lookup("E3").id == "E3"
    with pytest.raises(KeyError):
        harness.lookup("E99")


def test_trivial_run_is_fast_and_passes(out_root):
    t0 = time.perf_counter()
    rep = harness.run({"experiment": "E-trivial"})
    assert time.perf_counter() - t0 < 1.0
    assert rep.status == harness.PASS and rep.exit_code == 0
    assert (out_root / "E-trivial" / "summary.txt").exists()


def test_two_site_table(out_root):
    rep = harness.run({"experiment": "E2", "params": SMALL_E2})
    table = rep.results[0].tables[0].splitlines()
    body = [s for s in table if s.strip() and s.split()[0].isdigit()]
    assert len(body) == 3
    assert table[1].split() == ["x", "y", "exact", "mc", "stderr"]


def test_manifest_digests(out_root):
    rep = harness.run({"experiment": "E3", "params": {"volumes": [[2], [3]]}, "output_dir": "m"})
    man = json.loads((out_root / "m" / "manifest.json").read_text())
    assert man["status"] == "pass" and not man["partial"]
    assert man["resolved_params"]["volumes"] == [[2], [3]]
    for f in man["files"]:
        assert hashlib.sha256((out_root / "m" / f["path"]).read_bytes()).hexdigest() == f["sha256"]
    assert rep.out_dir == out_root / "m"


def digests(root):
    man = json.loads((root / "manifest.json").read_text())
    return {f["path"]: f["sha256"] for f in man["files"]}


def test_determinism_across_runs_and_widths(out_root):
    base = {"experiment": "E6", "params": {"n": 6, "n_walks": 3000, "horizon": 200}, "seed": 5}
    harness.run({**base, "output_dir": "a"})
    harness.run({**base, "output_dir": "b"})
    harness.run({**base, "output_dir": "c", "workers": 2})
    a = digests(out_root / "a")
    assert a == digests(out_root / "b") == digests(out_root / "c")
    harness.run({**base, "output_dir": "d", "seed": 6})
    assert a != digests(out_root / "d")


def test_task_seed():
    assert harness.task_seed(0, "E1", 3) == harness.task_seed(0, "E1", 3)
    assert harness.task_seed(0, "E1", 3) != harness.task_seed(0, "E1", 4)
    assert harness.task_seed(0, "E1", 3) != harness.task_seed(1, "E1", 3)
    assert 0 <= harness.task_seed(7, "x") < 2 ** 64


@pytest.mark.parametrize("raw,where", [
    ({"experiment": "E4", "params": {"cases": [{"name": "a", "d": 1, "x": [0],
                                                "pattern": {"kind": "sublattice"}}]}},
     "E4.cases[0].pattern.period"),
    ({"experiment": "E1", "params": {"foo": 1}}, "E1.foo"),
    ({"experiment": "E1", "params": {"trap_prob": 1.5}}, "E1.trap_prob"),
    ({"experiment": "E9"}, "experiment"),
    ({"experiment": "E1", "seed": -1}, "seed"),
    ({"params": {}}, "experiment"),
    ({"experiment": "E1", "colour": 1}, "colour"),
    ({"experiment": "E-all", "params": {"E7": {"alpha": 0}}}, "E7.alpha"),
])
def test_config_errors_name_field(raw, where):
    with pytest.raises(harness.ConfigError) as err:
        harness.ExperimentConfig.from_dict(raw)
    assert str(err.value).startswith(where)


def test_cli_list(capsys):
    assert main(["list"]) == 0
    out = capsys.readouterr().out
    assert all(f"E{i}" in out for i in range(1, 8))


def test_cli_validate_and_errors(tmp_path, capsys):
    good = write_config(tmp_path, {"experiment": "E3", "params": {"volumes": [[2]]}})
    assert main(["validate", str(good)]) == 0
    bad = write_config(tmp_path, {"experiment": "E4", "params": {"cases": [
        {"name": "a", "d": 1, "x": [0], "pattern": {"kind": "sublattice"}}]}}, "bad.yaml")
    assert main(["validate", str(bad)]) == 1
    assert "E4.cases[0].pattern.period" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.yaml")]) == 1
    (tmp_path / "junk.yaml").write_text("experiment: [unclosed")
    assert main(["run", str(tmp_path / "junk.yaml")]) == 1


def test_cli_run_exit_codes(tmp_path, out_root, capsys):
    assert main(["run", "E-trivial"]) == 0
    assert "status: pass" in capsys.readouterr().out
    # a non-criticality case with the wrong expectation fails -> exit 1
    wrong = write_config(tmp_path, {"experiment": "E4", "params": {
        "volumes": [2, 4, 8, 16],
        "cases": [{"name": "empty", "d": 1, "x": [0], "pattern": {"kind": "empty"},
                   "expect": harness.BOUNDED}]}})
    assert main(["run", str(wrong)]) == 1
    # a null potential has no finite integral -> inconclusive -> exit 2
    inc = write_config(tmp_path, {"experiment": "E6", "params": {
        "n": 4, "n_walks": 500, "horizon": 50, "cases": [{"name": "empty", "pattern": {"kind": "empty"}}]}},
        "inc.yaml")
    assert main(["run", str(inc)]) == 2


def test_export_matrix(tmp_path, out_root):
    cfg = write_config(tmp_path, {"experiment": "E3", "params": {"volumes": [[2], [2, 2]]}})
    assert main(["export-matrix", str(cfg)]) == 0
    mats = out_root / "E3" / "matrices"
    assert sorted(p.name for p in mats.iterdir()) == ["box_2.coo", "box_2.edges", "box_2x2.coo",
                                                      "box_2x2.edges"]
    with pytest.raises(harness.ConfigError):
        harness.export_matrix({"experiment": "E7"})
