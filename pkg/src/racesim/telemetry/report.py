"""Run logs on disk and the report built from them.

The report is always computed from the written logs, never from the live
trace, so re-running it on the same directory yields identical files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from ..errors import ConfigError, LogFormatError
from ..scenario import ReportConfig, RunResult
from ..trackgeom import load_track_csv, save_track_csv
from . import analysis as A
from .tables import (extract_tables, events_from_trace, merge_tables, read_events, read_tables, write_events,
                     write_tables)

SCHEMA_VERSION = 1
LOG_DIR = "logs"
FIG_DIR = "figures"
MARK = {"ok": "", "yellow": " ⚠", "red": " ✖"}
STATUS_MARK = {"pass": "✔", "fail": "✖", "skipped": "-"}


# ------------------------------------------------------------------- logs
def write_logs(result: RunResult, out_dir: str | Path) -> Path:
    """Write per-topic CSVs, events, metadata and the track to ``out_dir/logs``."""
    log_dir = Path(out_dir) / LOG_DIR
    tables = extract_tables(result.trace, result.run.bus.schemas)
    write_tables(tables, log_dir)
    write_events(events_from_trace(result.trace), log_dir / "events.jsonl")
    save_track_csv(result.run.track, log_dir / "track.csv")
    (log_dir / "metadata.json").write_text(json.dumps(_clean(result.metadata()), indent=2, sort_keys=True) + "\n")
    return log_dir


# ----------------------------------------------------------------- report
@dataclass
class RunReport:
    general: dict
    errors: list[dict]
    laps: list[dict]
    dynamics: dict
    ghosts: dict
    # analysis artefacts for rendering, not serialized
    master: Any = field(default=None, repr=False)
    track: Any = field(default=None, repr=False)
    collisions: list = field(default_factory=list, repr=False)
    tables: dict = field(default_factory=dict, repr=False)

    @property
    def passed(self) -> bool:
        return self.general["status"] == "pass"

    def to_dict(self) -> dict:
        return _clean({
            "schema_version": SCHEMA_VERSION,
            "general": self.general,
            "errors": self.errors,
            "laps": self.laps,
            "dynamics": self.dynamics,
            "ghosts": self.ghosts,
        })


def _clean(obj):
    """JSON-safe copy: NaN/inf become None, tuples become lists, numpy scalars become floats."""
    if isinstance(obj, Mapping):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def _used_columns(tables: Mapping) -> dict[str, list[str] | None]:
    used: dict[str, list[str] | None] = {A.GT: A.GT_COLUMNS, A.DBG: A.DBG_COLUMNS, A.STOP: A.STOP_COLUMNS,
                                         "/mission/status": ["authorized", "stop_requested"]}
    if A.OPP in tables:
        used[A.OPP] = None
    return {t: c for t, c in used.items() if t in tables}


def read_metadata(log_dir: Path) -> dict:
    path = Path(log_dir) / "metadata.json"
    try:
        meta = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise LogFormatError(f"corrupt or missing run metadata {path}: {exc}") from exc
    if not isinstance(meta, dict) or "vehicle" not in meta:
        raise LogFormatError(f"run metadata {path} lacks the vehicle description")
    return meta


def ghost_count(tables: Mapping) -> int:
    tb = tables.get(A.OPP)
    return 0 if tb is None else sum(1 for c in tb.columns if c.startswith("id."))


def analyze_logs(log_dir: str | Path, report_cfg: ReportConfig | None = None) -> RunReport:
    log_dir = Path(log_dir)
    meta = read_metadata(log_dir)
    cfg = report_cfg or ReportConfig.from_mapping(meta.get("report"))
    try:
        track = load_track_csv(log_dir / "track.csv")
    except (OSError, ValueError, ConfigError) as exc:
        raise LogFormatError(f"corrupt track log {log_dir / 'track.csv'}: {exc}") from exc
    tables = read_tables(log_dir)
    events = read_events(log_dir / "events.jsonl")
    vehicle = meta["vehicle"]
    if A.GT not in tables or not len(tables[A.GT]):
        raise LogFormatError(f"{log_dir} holds no ground-truth odometry")
    master = merge_tables(tables, _used_columns(tables), cfg.freq_bound)

    laps = A.segment_laps(master.t, master[f"{A.GT}:frenet.s"], track.total_length)
    metrics = [A.compute_metrics(lap, master, vehicle) for lap in laps]
    ghosts = A.ghost_tracks(master, ghost_count(tables))
    collisions = A.detect_collisions(master, ghosts, vehicle)
    speed = np.hypot(master[f"{A.GT}:twist.linear.0"], master[f"{A.GT}:twist.linear.1"])
    overtakes = A.detect_overtakes(master.t, master[f"{A.GT}:frenet.s"], speed, master[f"{A.GT}:lap"], ghosts,
                                   track.total_length, collisions)
    suppress = float(meta.get("suppress_window", 3.0))
    ctx = A.CheckContext(master, track, laps, metrics, events, cfg.thresholds, vehicle, collisions,
                         cfg.min_distance, cfg.accept_safe_stop, suppress)
    errors, status = A.run_tests(ctx, cfg.tests)
    if meta.get("end_reason") == "timeout":
        errors.append(ctx.error("scenario_timeout", f"scenario did not finish within {meta.get('sim_time')} s",
                                len(master) - 1))
        status["scenario_timeout"] = "fail"

    complete = [m for m in metrics if m.complete]
    best = min((m.lap_time for m in complete), default=None)
    lap_rows = []
    for m in metrics:
        row = m.to_dict()
        row["levels"] = {key: A.level(getattr(m, attr), cfg.thresholds.get(key))
                         for key, (attr, _, _) in A.METRICS.items()}
        lap_rows.append(row)
    dynamics = {}
    for key, (attr, unit, _) in A.METRICS.items():
        pool = complete or metrics
        worst = max((getattr(m, attr) for m in pool), default=0.0)
        dynamics[key] = {"max": worst, "unit": unit, "level": A.level(worst, cfg.thresholds.get(key)),
                         "thresholds": cfg.thresholds.get(key)}
    general = {
        "scenario": meta.get("scenario"),
        "tags": meta.get("tags", []),
        "seed": meta.get("seed"),
        "end_reason": meta.get("end_reason"),
        "sim_time": meta.get("sim_time"),
        "trace_digest": meta.get("trace_digest"),
        "status": "fail" if errors else "pass",
        "tests": status,
        "laps_completed": len(complete),
        "best_lap_time": best,
        "merge_frequency": master.frequency,
        "safety_stops": [s.to_dict() for s in ctx.safety_stops()],
    }
    ghost_section = {
        "count": len(ghosts),
        "collisions": [{"ghost": c.ghost, "t": c.t, "t_end": c.t_end, "lap": c.lap, "s": c.s, "d": c.d}
                       for c in collisions],
        "overtakes": [o.to_dict() for o in overtakes],
    }
    return RunReport(general, [e.to_dict() for e in errors], lap_rows, dynamics, ghost_section,
                     master=master, track=track, collisions=collisions, tables=tables)


# -------------------------------------------------------------- rendering
def _fmt(v, nd: int = 3) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.{nd}f}"
    return str(v)


def collision_svg(ego: tuple, other: tuple, size: int = 240) -> str:
    """Top-down schematic of two overlapping footprints, centred on the ego."""
    from .collision import rectangle

    a = rectangle(*ego)
    b = rectangle(*other)
    cx, cy = ego[0], ego[1]
    pts = np.vstack([a, b]) - [cx, cy]
    scale = 0.4 * size / max(float(np.abs(pts).max()), 1.0)

    def poly(c: np.ndarray, colour: str) -> str:
        xy = " ".join(f"{size / 2 + scale * (x - cx):.2f},{size / 2 - scale * (y - cy):.2f}" for x, y in c)
        return f'<polygon points="{xy}" fill="{colour}" fill-opacity="0.5" stroke="black" stroke-width="1"/>'

    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
            f'viewBox="0 0 {size} {size}">\n'
            f'<rect width="{size}" height="{size}" fill="white"/>\n'
            f'{poly(a, "#1f77b4")}\n{poly(b, "#d62728")}\n'
            f'<text x="4" y="14" font-size="11" font-family="monospace">ego (blue) / ghost (red)</text>\n'
            f'</svg>\n')


def render_markdown(rep: RunReport, figures: Mapping[str, str]) -> str:
    g = rep.general
    lines = [f"# Run report: {g['scenario']}", ""]
    verdict = "PASS" if rep.passed else "FAIL ✖"
    lines += [f"**Result:** {verdict}  ", f"**End reason:** {g['end_reason']}  ",
              f"**Simulated time:** {_fmt(g['sim_time'], 2)} s  ", f"**Seed:** {g['seed']}  ",
              f"**Completed laps:** {g['laps_completed']}  ",
              f"**Best lap time:** {_fmt(g['best_lap_time'])} s", ""]
    lines += ["## Tests", "", "| test | status |", "|---|---|"]
    lines += [f"| {name} | {STATUS_MARK.get(st, st)} {st} |" for name, st in g["tests"].items()]
    lines.append("")
    if rep.errors:
        lines += ["## Errors", "", "| t [s] | test | lap | s [m] | d [m] | description |", "|---|---|---|---|---|---|"]
        for e in rep.errors:
            lines.append(f"| {e['t']:.2f} | ✖ {e['test']} | {e['lap']} | {e['s']:.1f} | {e['d']:.2f} | "
                         f"{e['description']} |")
        lines.append("")
    if g["safety_stops"]:
        lines += ["## Safety stops", ""]
        for s in g["safety_stops"]:
            where = "on track" if s["on_track"] else "off track"
            done = "came to rest" if s["stopped"] else "still moving at the end"
            lines.append(f"- t = {s['t']:.2f} s, lap {s['lap']}, s = {s['s']:.1f} m: reason {s['reason']}, "
                         f"{done}, {where}")
        lines.append("")
    if rep.laps:
        keys = list(A.METRICS)
        lines += ["## Laps", "", "| lap | complete | time [s] | max speed | " + " | ".join(keys) + " |",
                  "|---|---|---|---|" + "---|" * len(keys)]
        for row in rep.laps:
            cells = [f"{_fmt(row[A.METRICS[k][0]])}{MARK[row['levels'][k]]}" for k in keys]
            lines.append(f"| {row['lap']} | {'yes' if row['complete'] else 'no'} | {_fmt(row['lap_time'], 2)} | "
                         f"{_fmt(row['max_speed'], 1)} | " + " | ".join(cells) + " |")
        lines += ["", "⚠ above the yellow threshold, ✖ above the red threshold.", ""]
    gh = rep.ghosts
    if gh["count"]:
        lines += ["## Ghosts", ""]
        for o in gh["overtakes"]:
            lines.append(f"- overtake of ghost {o['ghost']}: {o['outcome']}, {o['time_to_overtake']:.2f} s, "
                         f"mean speed difference {o['avg_delta_speed']:.1f} m/s")
        if not gh["overtakes"]:
            lines.append("- no overtakes")
        for i, c in enumerate(gh["collisions"]):
            lines.append(f"- ✖ collision with ghost {c['ghost']} at t = {c['t']:.2f} s, lap {c['lap']}, "
                         f"s = {c['s']:.1f} m")
            if f"collision_{i}" in figures:
                lines.append(f"  ![collision {i}]({figures[f'collision_{i}']})")
        lines.append("")
    extra = [(k, v) for k, v in figures.items() if not k.startswith("collision_")]
    if extra:
        lines += ["## Module reports", ""]
        lines += [f"### {k}\n\n![{k}]({v})\n" for k, v in extra]
    return "\n".join(lines).rstrip() + "\n"


def _plots(rep: RunReport, fig_dir: Path) -> dict[str, str]:
    """Full-mode figures for localization, control and perception; deterministic SVG output."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = {}
    m = rep.master
    t = m.t
    with matplotlib.rc_context({"svg.hashsalt": "racesim", "svg.fonttype": "none"}):
        loc_topic = "/loc/odom_raw" if "/loc/odom_raw" in rep.tables else "/loc/odom"
        loc = rep.tables.get(loc_topic)
        if loc is not None and len(loc):
            gt = rep.tables[A.GT]
            idx = np.clip(np.searchsorted(gt.t, loc.t), 0, len(gt) - 1)
            err = np.hypot(loc.col("pose.position.0") - gt.col("pose.position.0")[idx],
                           loc.col("pose.position.1") - gt.col("pose.position.1")[idx])
            fig, ax = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
            ax[0].plot(loc.t, err)
            ax[0].set_ylabel("position error [m]")
            ax[1].semilogy(loc.t, np.maximum(loc.col("pose.covariance.0"), 1e-12))
            ax[1].set_ylabel("x variance [m²]")
            ax[1].set_xlabel("t [s]")
            out["localization"] = _save(fig, fig_dir / "localization.svg")
        if f"{A.DBG}:lateral_error" in m:
            fig, ax = plt.subplots(3, 1, figsize=(8, 7), sharex=True)
            ax[0].plot(t, m[f"{A.DBG}:lateral_error"])
            ax[0].set_ylabel("lateral error [m]")
            ax[1].plot(t, m[f"{A.DBG}:heading_error"])
            ax[1].set_ylabel("heading error [rad]")
            ax[2].plot(t, np.hypot(m[f"{A.GT}:twist.linear.0"], m[f"{A.GT}:twist.linear.1"]), label="speed")
            ax[2].plot(t, m[f"{A.DBG}:v_target"], label="target")
            ax[2].set_ylabel("speed [m/s]")
            ax[2].set_xlabel("t [s]")
            ax[2].legend()
            out["control"] = _save(fig, fig_dir / "control.svg")
        if rep.ghosts["count"]:
            fig, ax = plt.subplots(figsize=(8, 3.5))
            for i in range(rep.ghosts["count"]):
                gap = A.wrap_gap(m[f"{A.GT}:frenet.s"] - m[f"{A.OPP}:s.{i}"], rep.track.total_length)
                ax.plot(t, gap, label=f"ghost {int(m[f'{A.OPP}:id.{i}'][0])}")
            ax.axhline(-30, color="grey", lw=0.8)
            ax.axhline(20, color="grey", lw=0.8)
            ax.set_ylabel("ego - ghost [m]")
            ax.set_xlabel("t [s]")
            ax.legend()
            out["perception"] = _save(fig, fig_dir / "perception.svg")
    return out


def _save(fig, path: Path) -> str:
    import matplotlib.pyplot as plt

    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return f"{FIG_DIR}/{path.name}"


def write_report(rep: RunReport, out_dir: str | Path, mode: str = "overview") -> Path:
    out_dir = Path(out_dir)
    fig_dir = out_dir / FIG_DIR
    figures: dict[str, str] = {}
    if rep.collisions or mode == "full":
        fig_dir.mkdir(parents=True, exist_ok=True)
    for i, c in enumerate(rep.collisions):
        name = f"collision_{i}.svg"
        (fig_dir / name).write_text(collision_svg(c.ego, c.other))
        figures[f"collision_{i}"] = f"{FIG_DIR}/{name}"
    if mode == "full":
        figures.update(_plots(rep, fig_dir))
    path = out_dir / "report.json"
    path.write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    (out_dir / "report.md").write_text(render_markdown(rep, figures))
    return path


def report_dir(out_dir: str | Path, mode: str | None = None) -> RunReport:
    """Analyze ``out_dir/logs`` and (re)write the report files next to it."""
    out_dir = Path(out_dir)
    rep = analyze_logs(out_dir / LOG_DIR)
    meta = read_metadata(out_dir / LOG_DIR)
    write_report(rep, out_dir, mode or (meta.get("report") or {}).get("mode", "overview"))
    return rep


def save_run(result: RunResult, out_dir: str | Path, mode: str | None = None) -> RunReport:
    write_logs(result, out_dir)
    return report_dir(out_dir, mode)
