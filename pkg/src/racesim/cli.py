"""Command-line front end: run one scenario, run tagged batches, rebuild reports.

Exit codes: 0 every test passed, 1 at least one test failed, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import yaml

from .errors import RaceSimError
from .scenario import build_run, load_scenario
from .simbus import Pacing
from .telemetry.report import LOG_DIR, report_dir, save_run

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SEED_ENV = "RACESIM_SEED"
DEFAULT_OUT = "racesim_runs"


class UsageError(Exception):
    pass


def resolve_seed(flag: int | None, config_seed: int) -> int:
    """--seed wins, then the RACESIM_SEED environment variable, then the config."""
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return int(config_seed)


def stamped_dir(root: Path, name: str) -> Path:
    """Fresh ``root/<name>-<UTC stamp>`` directory, suffixed if the stamp is taken."""
    base = f"{name}-{time.strftime('%Y%m%dT%H%M%S', time.gmtime())}"
    path = root / base
    k = 1
    while path.exists():
        path = root / f"{base}-{k}"
        k += 1
    path.mkdir(parents=True)
    return path


def summary_line(name: str, status: str, best_lap: float | None, errors: int) -> str:
    lap = f"{best_lap:.3f}" if best_lap is not None else "none"
    return f"SUMMARY scenario={name} status={status} best_lap={lap} errors={errors}"


@dataclasses.dataclass
class RunOptions:
    speedup: float | None = None
    pacing: str | None = None
    ground_truth: bool = False
    seed: int | None = None
    overview_only: bool = False
    prune_logs: bool = False


def execute(scenario_dir: Path, out_dir: Path, opts: RunOptions) -> dict:
    """Simulate one scenario into ``out_dir`` and return its summary record."""
    cfg, script = load_scenario(scenario_dir)
    if opts.ground_truth:
        cfg = dataclasses.replace(cfg, sim=dataclasses.replace(cfg.sim, ground_truth_mode=True))
    seed = resolve_seed(opts.seed, cfg.sim.seed)
    cfg = dataclasses.replace(cfg, sim=dataclasses.replace(cfg.sim, seed=seed))
    run = build_run(cfg, script, seed=seed, speedup=opts.speedup, pacing=opts.pacing)
    result = run.execute()
    mode = "overview" if opts.overview_only else cfg.report.mode
    rep = save_run(result, out_dir, mode)
    if opts.prune_logs and rep.passed:
        shutil.rmtree(out_dir / LOG_DIR)
    return {
        "scenario": cfg.name,
        "status": rep.general["status"],
        "best_lap": rep.general["best_lap_time"],
        "errors": len(rep.errors),
        "end_reason": result.end_reason,
        "sim_time": result.sim_time,
        "wall_time": result.wall_time,
        "out": str(out_dir),
    }


def _print_errors(out_dir: Path, limit: int = 10) -> None:
    data = json.loads((out_dir / "report.json").read_text())
    for e in data["errors"][:limit]:
        print(f"  {e['test']}: lap {e['lap']} s={e['s']:.1f} m t={e['t']:.2f} s: {e['description']}")
    if len(data["errors"]) > limit:
        print(f"  ... {len(data['errors']) - limit} more in {out_dir / 'report.json'}")


def cmd_run(args: argparse.Namespace) -> int:
    scenario = Path(args.scenario)
    if not (scenario / "config.yaml").is_file():
        raise UsageError(f"{scenario} is not a scenario directory (no config.yaml)")
    out = stamped_dir(Path(args.out), scenario.resolve().name)
    rec = execute(scenario, out, _options(args))
    best = rec["best_lap"]
    print(f"best lap time: {best:.3f} s" if best is not None else "best lap time: none (no complete lap)")
    print(f"end reason: {rec['end_reason']}, simulated {rec['sim_time']:.2f} s in {rec['wall_time']:.2f} s")
    if rec["status"] != "pass":
        _print_errors(out)
    print(f"report: {out / 'report.md'}")
    print(summary_line(rec["scenario"], rec["status"], best, rec["errors"]))
    return EXIT_PASS if rec["status"] == "pass" else EXIT_FAIL


# ------------------------------------------------------------------ batch
def discover(paths: Sequence[str]) -> list[Path]:
    """Scenario directories named directly or found one level below a parent."""
    found = []
    for p in map(Path, paths):
        if (p / "config.yaml").is_file():
            found.append(p)
        elif p.is_dir():
            found += sorted(d for d in p.iterdir() if (d / "config.yaml").is_file())
        else:
            raise UsageError(f"{p} is neither a scenario nor a directory of scenarios")
    return sorted(dict.fromkeys(d.resolve() for d in found), key=lambda d: d.name)


def scenario_tags(path: Path) -> list[str]:
    try:
        doc = next(iter(yaml.safe_load_all((path / "config.yaml").read_text())), None) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"malformed YAML in {path / 'config.yaml'}: {exc}") from exc
    return [str(t) for t in doc.get("tags", []) or []]


def select(dirs: list[Path], tags: Sequence[str] | None) -> list[Path]:
    if not tags:
        return dirs
    wanted = set(tags)
    return [d for d in dirs if wanted & set(scenario_tags(d))]


def _batch_worker(job: tuple[str, str, RunOptions]) -> dict:
    scenario, out, opts = job
    try:
        return execute(Path(scenario), Path(out), opts)
    except RaceSimError as exc:
        return {"scenario": Path(scenario).name, "status": "error", "best_lap": None, "errors": 1,
                "message": str(exc), "out": out}


def cmd_batch(args: argparse.Namespace) -> int:
    dirs = select(discover(args.paths), args.tag)
    if not dirs:
        raise UsageError("no scenarios selected")
    root = stamped_dir(Path(args.out), "batch")
    opts = _options(args)
    jobs = [(str(d), str(root / d.name), opts) for d in dirs]
    results: dict[str, dict] = {}
    if args.jobs > 1 and not args.fail_fast:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for job, rec in zip(jobs, pool.map(_batch_worker, jobs)):
                results[job[0]] = rec
    else:
        for job in jobs:
            rec = results[job[0]] = _batch_worker(job)
            if args.fail_fast and rec["status"] != "pass":
                break
    records = [results[j[0]] for j in jobs if j[0] in results]
    for rec in records:
        print(summary_line(rec["scenario"], rec["status"], rec["best_lap"], rec["errors"]))
        if rec.get("message"):
            print(f"  {rec['message']}")
    skipped = len(jobs) - len(records)
    passed = sum(r["status"] == "pass" for r in records)
    print(f"BATCH selected={len(jobs)} run={len(records)} passed={passed} failed={len(records) - passed} "
          f"skipped={skipped}")
    (root / "summary.json").write_text(json.dumps(records, indent=2, sort_keys=True) + "\n")
    if any(r["status"] == "error" for r in records):
        return EXIT_USAGE
    return EXIT_PASS if passed == len(jobs) else EXIT_FAIL


# ----------------------------------------------------------------- report
def cmd_report(args: argparse.Namespace) -> int:
    out = Path(args.run_dir)
    if not (out / LOG_DIR).is_dir():
        raise UsageError(f"{out} has no {LOG_DIR}/ directory")
    rep = report_dir(out, "full" if args.full else "overview")
    best = rep.general["best_lap_time"]
    print(f"report: {out / 'report.md'}")
    print(summary_line(rep.general["scenario"], rep.general["status"], best, len(rep.errors)))
    return EXIT_PASS if rep.passed else EXIT_FAIL


# ----------------------------------------------------------------- parser
def _options(args: argparse.Namespace) -> RunOptions:
    return RunOptions(args.speedup, args.pacing, args.ground_truth, args.seed, args.overview_only,
                      args.prune_logs)


def _positive(text: str) -> float:
    v = float(text)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--speedup", type=_positive, help="simulation speed-up factor")
    p.add_argument("--pacing", choices=[m.value for m in Pacing], help="clock pacing mode")
    p.add_argument("--ground-truth", action="store_true", help="feed ground truth instead of localization")
    p.add_argument("--seed", type=int, help=f"random seed (falls back to ${SEED_ENV}, then the config)")
    p.add_argument("--out", default=DEFAULT_OUT, help="output root directory")
    p.add_argument("--overview-only", action="store_true", help="skip per-module plots")
    p.add_argument("--prune-logs", action="store_true", help="delete CSV logs of passing runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="racesim", description="Scenario-based racing stack simulation")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("scenario", help="scenario directory")
    _sim_flags(run)
    run.set_defaults(func=cmd_run)
    batch = sub.add_parser("batch", help="run many scenarios")
    batch.add_argument("paths", nargs="+", help="scenario directories or parents of scenario directories")
    batch.add_argument("--tag", action="append", help="select scenarios carrying this tag (repeatable)")
    batch.add_argument("--jobs", type=int, default=1, help="parallel runs")
    batch.add_argument("--fail-fast", action="store_true", help="stop at the first failing scenario")
    _sim_flags(batch)
    batch.set_defaults(func=cmd_batch)
    rep = sub.add_parser("report", help="rebuild the report of a stored run")
    rep.add_argument("run_dir", help="run output directory (holding logs/)")
    rep.add_argument("--full", action="store_true", help="also render module reports")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_PASS
    try:
        return args.func(args)
    except (UsageError, RaceSimError, OSError) as exc:
        print(f"racesim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
