import json

import pytest

from rfloer import cli


def load(name):
    return json.loads(cli.bundled_config(name).read_text())


def write(tmp_path, raw, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return p


def test_bundled_configs_validate():
    for name in ("flat_geodesic", "eps_001", "eps_005", "magnetic_B1", "leafwise_small_F"):
        rc = cli.RunConfig.load(cli.bundled_config(name))
        assert rc.name == name and len(rc.hash) == 64


@pytest.mark.parametrize(
    "patch",
    [{"N": -4}, {"N": 33}, {"k": 0.0}, {"classes": [[0, 0]]}, {"bogus": 1}],
)
def test_bad_config_exits_2(tmp_path, patch, capsys):
    raw = {**load("flat_geodesic"), **patch}
    assert cli.run("find-orbits", write(tmp_path, raw)) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_and_malformed_config(tmp_path):
    assert cli.run("verify", tmp_path / "nope.json") == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert cli.run("verify", bad) == 2


def test_find_orbits_writes_csv(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["find-orbits", "--config", "eps_005", "--out", str(out)]) == 0
    body = json.loads((out / "find-orbits.json").read_text())
    assert body["command"] == "find-orbits" and body["seed"] == 0
    assert len(body["orbits"]) == 2
    assert (out / "orbit_0.csv").exists() and (out / "orbit_1.csv").exists()
    assert json.loads(capsys.readouterr().out) == body


def test_flat_orbit_search(tmp_path):
    assert cli.main(["find-orbits", "--config", "flat_geodesic", "--out", str(tmp_path)]) == 0
    body = json.loads((tmp_path / "find-orbits.json").read_text())
    assert abs(body["orbits"][0]["T"] - 1.0) < 1e-6


def test_mane_magnetic_reports_infinity(tmp_path):
    assert cli.main(["mane", "--config", "magnetic_B1", "--out", str(tmp_path)]) == 0
    body = json.loads((tmp_path / "mane.json").read_text())
    assert body["c_upper"] == "inf"
    assert all(w["action"] < 0 for w in body["witnesses"])


def test_magnetic_orbit_search_exits_2(tmp_path):
    assert cli.main(["find-orbits", "--config", "magnetic_B1", "--out", str(tmp_path)]) == 2


def test_verify_flat_passes(tmp_path, capsys):
    assert cli.main(["verify", "--config", "flat_geodesic", "--out", str(tmp_path)]) == 0
    body = json.loads((tmp_path / "verify.json").read_text())
    assert body["all_pass"]
    assert "ALL PASS" in capsys.readouterr().err


def test_weak_tolerance_annotation(tmp_path):
    raw = {**load("flat_geodesic"), "tolerances": {"action": 1.0}}
    out = tmp_path / "out"
    assert cli.run("verify", write(tmp_path, raw), out) == 0
    body = json.loads((out / "verify.json").read_text())
    assert body["verdicts"]["action_identity"]["annotation"] == "weak tolerance"
    assert "weak tolerance" in (out / "verify.txt").read_text()


def test_subcritical_skips_c_dependent_checks(tmp_path):
    raw = {**load("eps_005"), "k": 0.04, "N": 32}
    out = tmp_path / "out"
    assert cli.run("verify", write(tmp_path, raw), out) == 0
    body = json.loads((out / "verify.json").read_text())
    assert any(w.startswith("supercriticality") for w in body["warnings"])
    assert "index_identities" not in body["verdicts"]
    assert "flow_monitors" not in body["verdicts"]


def test_verify_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["verify", "--config", "flat_geodesic", "--seed", "7", "--out", str(a)]) == 0
    assert cli.main(["verify", "--config", "flat_geodesic", "--seed", "7", "--out", str(b)]) == 0
    assert (a / "verify.json").read_bytes() == (b / "verify.json").read_bytes()
    assert json.loads((a / "verify.json").read_text())["seed"] == 7


def test_negative_seed_rejected():
    with pytest.raises(SystemExit) as e:
        cli.main(["verify", "--config", "flat_geodesic", "--seed", "-1"])
    assert e.value.code == 2


def test_leafwise_without_section_exits_2(tmp_path):
    assert cli.main(["leafwise", "--config", "flat_geodesic", "--out", str(tmp_path)]) == 2
