from __future__ import annotations

from pathlib import Path

import pytest
import yaml

from racesim.errors import ConfigError
from racesim.scenario import (ReportConfig, ScenarioScript, CommandGroup, load_scenario, node_parameters,
                              parse_script, run_scenario, split_target)

ROOT = Path(__file__).resolve().parents[1]
TRACKS = ROOT / "scenarios" / "tracks"


def write_scenario(d: Path, config: str, script: str = "end: {after_lap: 1}\n") -> Path:
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.yaml").write_text(config)
    (d / "scenario.yaml").write_text(script)
    return d


def base_config(extra_sim: str = "", rest: str = "") -> str:
    return (f"sim:\n  track: {TRACKS / 'oval.csv'}\n  racing_line: {TRACKS / 'oval_line.csv'}\n"
            f"  init: {{s: 0.0, v0: 60.0}}\n{extra_sim}{rest}")


@pytest.mark.parametrize("name", ["covariance_stop", "loc_crash", "overtake_loc_delay_500", "overtake_oval",
                                  "performance_oval"])
def test_shipped_scenarios_load(name):
    cfg, script = load_scenario(ROOT / "scenarios" / name)
    assert cfg.name == name
    assert cfg.sim.track.is_file()
    assert script.end_lap is not None or script.after_time is not None


def test_relative_paths_resolve_against_scenario_dir(tmp_path):
    (tmp_path / "t").mkdir()
    (tmp_path / "t" / "oval.csv").write_text((TRACKS / "oval.csv").read_text())
    d = write_scenario(tmp_path / "s", "sim:\n  track: ../t/oval.csv\n")
    cfg, _ = load_scenario(d)
    assert cfg.sim.track == (tmp_path / "t" / "oval.csv").resolve()


def test_two_document_config_carries_report_settings(tmp_path):
    d = write_scenario(tmp_path / "s", base_config() + "---\ntests: [track_boundaries]\nmode: full\n"
                       "thresholds:\n  lateral_error: {yellow: 0.2, red: 0.9}\n")
    cfg, _ = load_scenario(d)
    assert cfg.report.tests == ["track_boundaries"]
    assert cfg.report.mode == "full"
    assert cfg.report.thresholds == {"lateral_error": {"yellow": 0.2, "red": 0.9}}


@pytest.mark.parametrize("config, fragment", [
    ("sim: {}\n", "sim.track"),
    ("- a\n- b\n", "mapping"),
    ("sim: {track: x.csv}\nbogus: 1\n", "unknown section"),
    ("sim: {track: x.csv, warp: 9}\n", "unknown sim setting"),
    ("sim: {track: x.csv, init: {q: 1}}\n", "sim.init"),
    ("sim: {track: x.csv, pacing: turbo}\n", "pacing"),
    ("sim: {track: x.csv, speedup: 0.5}\n", "speedup"),
    ("sim: {track: x.csv, ghosts: [{speed: 10}]}\n", "ghost 0"),
    ("sim: {track: x.csv}\nparameters: {planner/nope: 1}\n", "nope"),
    ("sim: {track: x.csv}\nparameters: {warpdrive/x: 1}\n", "warpdrive"),
    ("sim: {track: x.csv}\n---\nmode: loud\n", "report mode"),
    ("sim: {track: x.csv}\n---\nthresholds: {lateral_error: {orange: 1}}\n", "yellow/red"),
    ("sim: {track: x.csv}\n---\nwhatever: 1\n", "unknown report setting"),
    ("sim: {track: x.csv}\n---\ntests: [lap_magic]\n", "unknown test"),
    ("sim: {track: [unclosed\n", "malformed YAML"),
])
def test_config_errors(tmp_path, config, fragment):
    d = write_scenario(tmp_path / "s", config)
    with pytest.raises(ConfigError, match=fragment):
        load_scenario(d)


def test_missing_files_are_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_scenario(tmp_path / "nowhere")
    (tmp_path / "s").mkdir()
    (tmp_path / "s" / "config.yaml").write_text("sim: {track: x.csv}\n")
    with pytest.raises(ConfigError, match="scenario.yaml"):
        load_scenario(tmp_path / "s")


@pytest.mark.parametrize("doc, fragment", [
    ({"groups": [{"s": 1.0}]}, "needs lap and s"),
    ({"groups": [{"lap": 0, "s": 1.0}]}, "lap must be >= 1"),
    ({"groups": [{"lap": 1, "s": 1.0, "parameters": [{"planner/bogus": 1}]}]}, "bogus"),
    ({"groups": [{"lap": 1, "s": 1.0, "parameters": "oops"}]}, "list"),
    ({"end": {"after_laps": 2}}, "end accepts"),
    ({"stages": []}, "unknown section"),
])
def test_script_errors(doc, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_script(doc)


def test_script_groups_sorted_and_mapping_form_accepted():
    script = parse_script({"groups": [
        {"lap": 2, "s": 10.0, "parameters": {"mission/max_speed": 50.0}},
        {"lap": 1, "s": 900.0, "parameters": [{"mission/max_speed": 60.0}]},
        {"lap": 1, "s": 100.0},
    ]})
    assert [(g.lap, g.s) for g in script.groups] == [(1, 100.0), (1, 900.0), (2, 10.0)]
    assert script.groups[2].parameters == [{"mission/max_speed": 50.0}]
    assert script.end_lap is None and script.lap_after_last_group


def test_script_fault_commands_validated():
    ok = {"groups": [{"lap": 1, "s": 5.0, "parameters": [
        {"faults": {"sensors": [{"name": "/gps/fix", "delay": -1}]}}]}]}
    assert len(parse_script(ok).groups) == 1
    bad = {"groups": [{"lap": 1, "s": 5.0, "parameters": [
        {"faults": {"sensors": [{"name": "/gps/fix", "delay": "soon"}]}}]}]}
    with pytest.raises(ConfigError):
        parse_script(bad)


def test_end_lap_rules():
    assert ScenarioScript().end_lap == 1
    assert ScenarioScript(after_lap=3).end_lap == 3
    assert ScenarioScript(after_time=20.0).end_lap is None
    grouped = ScenarioScript([CommandGroup(4, 0.0, [])])
    assert grouped.end_lap is None and grouped.lap_after_last_group
    assert not ScenarioScript([CommandGroup(4, 0.0, [])], after_lap=5).lap_after_last_group


def test_node_parameters_patch_and_isolate():
    a = node_parameters({"mission/max_speed": 42.0, "safety/covariance_threshold": 0.05})
    b = node_parameters({})
    assert a["mission"]["max_speed"] == 42.0
    assert a["safety"]["covariance_threshold"] == 0.05
    assert b["mission"]["max_speed"] == 80.0  # defaults untouched by the previous call
    assert node_parameters({"ghosts/speed/0": 30.0}, {0: 50.0})["ghosts"]["speed"]["0"] == 30.0


def test_split_target():
    assert split_target("planner/engage_distance") == ("planner", "engage_distance")
    with pytest.raises(ConfigError):
        split_target("planner")


def test_report_config_round_trip():
    cfg = ReportConfig.from_mapping({"tests": ["ghost_collisions"], "min_distance": 0.5, "accept_safe_stop": True})
    assert ReportConfig.from_mapping(cfg.to_dict()) == cfg
    assert ReportConfig.from_mapping(None).tests is None


# ---------------------------------------------------------------- runs
def test_scripted_command_fires_at_lap_and_s(tmp_path):
    script = ("groups:\n  - lap: 1\n    s: 300.0\n    parameters:\n      - mission/max_speed: 40.0\n"
              "end: {after_time: 12.0}\n")
    res = run_scenario(write_scenario(tmp_path / "s", base_config("  seed: 1\n  max_time: 30\n"), script))
    assert res.end_reason == "completed"
    (fired,) = res.fired
    assert fired["lap"] == 1 and 300.0 <= fired["s"] < 301.0
    # the command reached the mission node and the car slowed toward the new cap
    caps = [(t, m.payload["max_speed"]) for t, m in res.trace.timed("/mission/status")]
    assert all(c == 40.0 for t, c in caps if t > fired["t"] + 0.2)
    v_end = res.trace.timed("/gt/odom")[-1][1].payload["twist"]["linear"][0]
    assert v_end < 45.0


def test_default_end_is_one_full_lap_after_last_group(tmp_path):
    script = "groups:\n  - lap: 1\n    s: 300.0\n    parameters:\n      - mission/max_speed: 70.0\n"
    res = run_scenario(write_scenario(tmp_path / "s", base_config("  seed: 1\n  max_time: 120\n"), script))
    assert res.end_reason == "completed"
    (fired,) = res.fired
    gt = [m.payload for _, m in res.trace.timed("/gt/odom")]
    laps = [(int(p["lap"]), p["frenet"]["s"]) for p in gt]
    # reached the firing position on the next lap, then ran out the grace plus three missed heartbeats
    assert any(lap == 2 and s >= fired["s"] for lap, s in laps)
    assert all(lap < 3 for lap, _ in laps)
    assert laps[-1][0] == 2 and fired["s"] <= laps[-1][1] < fired["s"] + (0.5 + 0.3 + 0.05) * 75.0


def test_max_time_ends_run_as_timeout(tmp_path):
    res = run_scenario(write_scenario(tmp_path / "s", base_config("  max_time: 4\n"), "end: {after_lap: 3}\n"))
    assert res.end_reason == "timeout"
    assert res.sim_time == pytest.approx(4.0, abs=0.011)


def test_same_seed_same_digest_different_seed_differs(tmp_path):
    d = write_scenario(tmp_path / "s", base_config("  max_time: 30\n"), "end: {after_time: 5.0}\n")
    a = run_scenario(d, seed=3).trace.digest()
    assert run_scenario(d, seed=3).trace.digest() == a
    assert run_scenario(d, seed=4).trace.digest() != a


def test_metadata_is_yaml_serialisable(tmp_path):
    d = write_scenario(tmp_path / "s", base_config("  max_time: 30\n"), "end: {after_time: 4.0}\n")
    meta = run_scenario(d).metadata()
    assert yaml.safe_load(yaml.safe_dump(meta)) == meta
    assert meta["suppress_window"] == 3.0
