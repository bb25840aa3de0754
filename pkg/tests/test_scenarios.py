import math

import numpy as np
import pytest

from nanoarray import formats
from nanoarray.config import Config
from nanoarray.errors import ConfigError
from nanoarray.scenarios import (bundled_scenarios, load_scenario, parse_scenario, run_scenario,
                                 stream_seed)

MINIMAL = """\
schema_version: 1
name: tiny
seed: 5
config:
  rows: 2
  cols: 2
stages:
  - kind: load
    particles:
      - {site: [0, 0]}
      - {site: [1, 1]}
  - kind: plan
    target: ["oo", ".."]
  - kind: execute
    transport_success_prob: 1.0
  - kind: report
"""


def test_bundled_names():
    assert bundled_scenarios() == ["fig2_rearrangement", "fig3_characterization", "fig4_dumbbell"]
    for name in bundled_scenarios():
        assert load_scenario(name).name == name


def test_parse_minimal():
    sc = parse_scenario(MINIMAL)
    assert (sc.name, sc.seed, sc.config.rows) == ("tiny", 5, 2)
    assert [s.kind for s in sc.stages] == ["load", "plan", "execute", "report"]
    assert sc.stages[2].params["transport_success_prob"] == 1.0


def test_base_config_under_overrides():
    sc = parse_scenario(MINIMAL, base=Config(power_mw=123.0, rows=7))
    assert sc.config.power_mw == 123.0
    assert sc.config.rows == 2


@pytest.mark.parametrize("old, new, where", [
    ("  - kind: execute\n", "  - kind: exekute\n", ":14:11"),
    ("    transport_success_prob: 1.0\n", "    transport_sucess_prob: 1.0\n", ":15:5"),
    ("  cols: 2\n", "  cols: 2\n  colour: red\n", ":7:3"),
    ("seed: 5\n", "seed: -1\n", ":3:7"),
    ("seed: 5\n", "seed: 5\nextra: 1\n", ":4:1"),
    ("  - kind: report\n", "  - kind: report\n  - kind: load\n", ":17:5"),
])
def test_parse_errors_report_position(old, new, where):
    with pytest.raises(ConfigError, match=f"<scenario>{where}"):
        parse_scenario(MINIMAL.replace(old, new))


def test_parse_errors_without_position():
    with pytest.raises(ConfigError, match="stages"):
        parse_scenario("name: x\nstages: []\n")
    with pytest.raises(ConfigError, match="name"):
        parse_scenario("stages:\n  - kind: report\n")
    with pytest.raises(ConfigError, match="bundled"):
        load_scenario("no_such_scenario")


def test_stream_seeds_are_named_and_stable():
    a = stream_seed(1, "simulate", 3, 0)
    assert a == stream_seed(1, "simulate", 3, 0)
    assert len({a, stream_seed(1, "simulate", 3, 1), stream_seed(2, "simulate", 3, 0),
                stream_seed(1, "simulate", 0, 3)}) == 4


def test_minimal_run(tmp_path):
    res = run_scenario(parse_scenario(MINIMAL), tmp_path)
    assert res.status == 0
    assert res.summary["execute"]["grid"] == ["oo", ".."]
    assert formats.verify_manifest(tmp_path) == []
    doc = formats.read_json(tmp_path / "manifest.json")
    assert doc["status"] == "complete"
    assert {f["path"] for f in doc["files"]} >= {"config.json", "summary.json", "events.jsonl", "plan.json",
                                                 "occupancy/initial.txt", "occupancy/final.txt"}


def test_failed_stage_keeps_partial_manifest(tmp_path):
    text = MINIMAL.replace('target: ["oo", ".."]', 'target: ["oo", "oo", "o."]')
    text = text.replace("rows: 2", "rows: 3")
    res = run_scenario(parse_scenario(text), tmp_path)
    assert res.status == 1
    assert "InfeasibleError" in res.error
    doc = formats.read_json(tmp_path / "manifest.json")
    assert doc["status"] == "failed"
    assert "occupancy/initial.txt" in {f["path"] for f in doc["files"]}
    assert formats.read_json(tmp_path / "summary.json")["stages"]["error"]["stage"] == "plan"


def test_every_artifact_records_the_seed(scenario_run):
    res = scenario_run("fig4_dumbbell")
    for f in formats.read_json(res.out / "manifest.json")["files"]:
        raw = (res.out / f["path"]).read_bytes()
        assert b"seed" in raw[:4096], f["path"]


def test_fig2_reaches_target(scenario_run):
    res = scenario_run("fig2_rearrangement")
    assert res.status == 0
    ex = res.summary["execute"]
    assert ex["defect_free"]
    assert ex["grid"] == ex["target_grid"] == ["o..o", ".oo.", ".oo.", "o..o"]
    _, _, before = formats.read_pattern(res.out / "occupancy/initial.txt")
    _, _, after = formats.read_pattern(res.out / "occupancy/final.txt")
    assert sum(r.count("o") for r in before) == sum(r.count("o") for r in after) == 8


def test_fig3_classifies_every_particle(scenario_run):
    res = scenario_run("fig3_characterization")
    assert res.status == 0
    report = formats.read_json(res.out / "shape_report.json")["particles"]
    assert len(report) == 9
    assert all(p["match"] for p in report)
    spheres = [p for p in report if p["truth"] == "spherical"]
    assert len(spheres) == 5
    assert not any(p["torsional_detected"] for p in spheres)


def test_fig4_rotation_table(scenario_run):
    res = scenario_run("fig4_dumbbell")
    assert res.status == 0
    assert res.summary["merge"]["counts"]["dumbbell"] == 1
    rotor = res.summary["rotation"]["rotors"][0]
    assert rotor["log_log_slope"] == pytest.approx(-1.0, abs=0.02)
    assert rotor["frequency_hz_at_lowest_pressure"] == pytest.approx(1.75e9, rel=0.1)
    cols, _ = formats.read_table(res.out / "rotation.csv")
    p, f = cols["pressure"], cols["frequency"]
    assert np.allclose(p * f, p[0] * f[0], rtol=1e-3)
    verdict = formats.read_json(res.out / "shape_report.json")["particles"][0]
    assert verdict["verdict"] == "anisotropic"


def test_outputs_feed_the_readers(scenario_run):
    res = scenario_run("fig4_dumbbell")
    for path in sorted((res.out / "trajectories").iterdir()):
        traj = formats.read_trajectory(path)
        assert traj.metadata["pressure_pa"] > 0
        assert math.isfinite(traj.channels["x"][-1])
    assert formats.read_events(res.out / "events.jsonl")
