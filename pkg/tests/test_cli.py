from __future__ import annotations

import json
import re
import subprocess
import sys
from pathlib import Path

import pytest

from racesim.cli import main, resolve_seed, UsageError

ROOT = Path(__file__).resolve().parents[1]
TRACKS = ROOT / "scenarios" / "tracks"


def scenario(d: Path, tags=(), report="", seconds=4.0, extra="") -> Path:
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.yaml").write_text(
        f"tags: [{', '.join(tags)}]\n"
        f"sim:\n  track: {TRACKS / 'oval.csv'}\n  racing_line: {TRACKS / 'oval_line.csv'}\n"
        f"  init: {{s: 0.0, v0: 50.0}}\n  max_time: 30\n{extra}"
        + (f"---\n{report}" if report else "")
    )
    (d / "scenario.yaml").write_text(f"end: {{after_time: {seconds}}}\n")
    return d


FAILING = "min_distance: 100000\n"  # car_started cannot pass


def run_dirs(out: Path) -> list[Path]:
    return sorted(p for p in out.iterdir() if p.is_dir())


def test_run_pass_prints_summary_and_exits_zero(tmp_path, capsys):
    s = scenario(tmp_path / "ok")
    assert main(["run", str(s), "--out", str(tmp_path / "out")]) == 0
    text = capsys.readouterr().out
    assert re.search(r"^SUMMARY scenario=ok status=pass best_lap=none errors=0$", text, re.M)
    assert "best lap time: none" in text
    (run,) = run_dirs(tmp_path / "out")
    assert re.fullmatch(r"ok-\d{8}T\d{6}(-\d+)?", run.name)
    assert (run / "report.json").is_file() and (run / "logs" / "gt__odom.csv").is_file()


def test_run_fail_exits_one_and_lists_errors(tmp_path, capsys):
    s = scenario(tmp_path / "bad", report=FAILING)
    assert main(["run", str(s), "--out", str(tmp_path / "out")]) == 1
    text = capsys.readouterr().out
    assert "status=fail" in text and "car_started" in text


@pytest.mark.parametrize("argv", [
    ["run", "/definitely/not/here"],
    ["run"],
    ["fly", "x"],
    ["run", ".", "--speedup", "-2"],
    ["batch", "/definitely/not/here"],
    ["report", "/definitely/not/here"],
])
def test_usage_errors_exit_two(argv, tmp_path):
    assert main(argv + (["--out", str(tmp_path)] if argv[0] in ("run", "batch") and len(argv) > 1 else [])) == 2


def test_config_error_exits_two(tmp_path, capsys):
    s = scenario(tmp_path / "broken", extra="  warp: 9\n")
    assert main(["run", str(s), "--out", str(tmp_path / "out")]) == 2
    assert "warp" in capsys.readouterr().err


def test_seed_precedence(tmp_path, monkeypatch):
    monkeypatch.delenv("RACESIM_SEED", raising=False)
    assert resolve_seed(None, 4) == 4
    monkeypatch.setenv("RACESIM_SEED", "11")
    assert resolve_seed(None, 4) == 11
    assert resolve_seed(7, 4) == 7
    monkeypatch.setenv("RACESIM_SEED", "eleven")
    with pytest.raises(UsageError):
        resolve_seed(None, 4)


def test_env_seed_reaches_the_run(tmp_path, monkeypatch):
    s = scenario(tmp_path / "seeded", seconds=3.0)
    monkeypatch.setenv("RACESIM_SEED", "123")
    assert main(["run", str(s), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", str(s), "--out", str(tmp_path / "b"), "--seed", "9"]) == 0
    meta_a = json.loads((run_dirs(tmp_path / "a")[0] / "logs" / "metadata.json").read_text())
    meta_b = json.loads((run_dirs(tmp_path / "b")[0] / "logs" / "metadata.json").read_text())
    assert (meta_a["seed"], meta_b["seed"]) == (123, 9)


def test_ground_truth_flag_and_prune_logs(tmp_path):
    s = scenario(tmp_path / "gt", seconds=3.0)
    assert main(["run", str(s), "--out", str(tmp_path / "out"), "--ground-truth", "--prune-logs"]) == 0
    (run,) = run_dirs(tmp_path / "out")
    assert not (run / "logs").exists()
    assert (run / "report.json").is_file()


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    root = tmp_path_factory.mktemp("suite")
    scenario(root / "a_pass", tags=["nightly", "oval"], seconds=3.0)
    scenario(root / "b_fail", tags=["nightly"], report=FAILING, seconds=3.0)
    scenario(root / "c_other", tags=["weekly"], seconds=3.0)
    return root


def summary_lines(text):
    return [line for line in text.splitlines() if line.startswith("SUMMARY")]


def test_batch_tag_selection_and_aggregation(suite, tmp_path, capsys):
    code = main(["batch", str(suite), "--tag", "nightly", "--out", str(tmp_path)])
    text = capsys.readouterr().out
    assert code == 1
    lines = summary_lines(text)
    assert [re.search(r"scenario=(\S+)", line).group(1) for line in lines] == ["a_pass", "b_fail"]
    assert "BATCH selected=2 run=2 passed=1 failed=1 skipped=0" in text
    (batch,) = run_dirs(tmp_path)
    summary = json.loads((batch / "summary.json").read_text())
    assert [r["status"] for r in summary] == ["pass", "fail"]


def test_batch_repeated_tags_union(suite, tmp_path, capsys):
    assert main(["batch", str(suite), "--tag", "oval", "--tag", "weekly", "--out", str(tmp_path)]) == 0
    assert "BATCH selected=2 run=2 passed=2 failed=0 skipped=0" in capsys.readouterr().out


def test_batch_fail_fast_skips_the_rest(suite, tmp_path, capsys):
    assert main(["batch", str(suite), "--fail-fast", "--out", str(tmp_path)]) == 1
    assert "BATCH selected=3 run=2 passed=1 failed=1 skipped=1" in capsys.readouterr().out


def test_batch_parallel_matches_serial(suite, tmp_path, capsys):
    assert main(["batch", str(suite), "--jobs", "3", "--out", str(tmp_path / "p")]) == 1
    par = summary_lines(capsys.readouterr().out)
    assert main(["batch", str(suite), "--out", str(tmp_path / "s")]) == 1
    assert summary_lines(capsys.readouterr().out) == par


def test_batch_config_error_exits_two_but_runs_the_rest(suite, tmp_path, capsys):
    scenario(tmp_path / "scn" / "z_broken", extra="  warp: 9\n")
    code = main(["batch", str(suite / "a_pass"), str(tmp_path / "scn"), "--out", str(tmp_path / "out")])
    text = capsys.readouterr().out
    assert code == 2
    assert "scenario=a_pass status=pass" in text
    assert "scenario=z_broken status=error" in text


def test_batch_with_no_match_is_usage_error(suite, tmp_path):
    assert main(["batch", str(suite), "--tag", "nothing", "--out", str(tmp_path)]) == 2


def test_report_rebuild_and_corrupt_logs(suite, tmp_path, capsys):
    assert main(["run", str(suite / "b_fail"), "--out", str(tmp_path)]) == 1
    (run,) = run_dirs(tmp_path)
    first = (run / "report.json").read_bytes()
    capsys.readouterr()
    assert main(["report", str(run)]) == 1
    assert "status=fail" in capsys.readouterr().out
    assert (run / "report.json").read_bytes() == first
    gt = run / "logs" / "gt__odom.csv"
    gt.write_text(gt.read_text().replace(",", ";", 5))
    assert main(["report", str(run)]) == 2
    assert "corrupt" in capsys.readouterr().err


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "racesim.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "batch" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "racesim.cli", "run"], capture_output=True, text=True)
    assert proc.returncode == 2
