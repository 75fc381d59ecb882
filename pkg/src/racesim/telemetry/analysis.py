"""Lap segmentation, lap metrics, collisions, overtakes and the automatic tests."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ERROR_DESCRIPTIONS, ErrorCode, Severity
from ..trackgeom import TrackModel
from .collision import footprints_overlap
from .tables import MasterTable

GT = "/gt/odom"
DBG = "/ctrl/debug"
STOP = "/cmd/stop"
OPP = "/gt/opponents"

TEST_NAMES = (
    "tracking_errors", "car_started", "car_stopped", "stack_errors",
    "track_boundaries", "dynamics_metrics", "ghost_collisions",
)

# metric key -> (LapMetrics field, unit, test that judges it)
METRICS = {
    "lateral_error": ("max_lateral_error", "m", "tracking_errors"),
    "heading_error": ("max_heading_error", "rad", "tracking_errors"),
    "speed_error": ("max_speed_error", "m/s", "tracking_errors"),
    "yaw_rate": ("max_yaw_rate", "rad/s", "dynamics_metrics"),
    "understeer": ("max_understeer", "deg", "dynamics_metrics"),
    "sideslip": ("max_sideslip", "deg", "dynamics_metrics"),
    "lateral_velocity": ("max_lateral_velocity", "m/s", "dynamics_metrics"),
}

GT_COLUMNS = ["pose.position.0", "pose.position.1", "pose.yaw", "twist.linear.0", "twist.linear.1",
              "twist.yaw_rate", "steer", "frenet.s", "frenet.d", "lap"]
DBG_COLUMNS = ["lateral_error", "heading_error", "speed_error", "v_target"]
STOP_COLUMNS = ["stop", "emergency", "reason"]


# ------------------------------------------------------------------- laps
@dataclass
class LapSegment:
    lap: int
    start: int  # first row
    stop: int  # one past the last row
    t_start: float
    t_end: float
    complete: bool

    @property
    def time(self) -> float:
        return round(self.t_end - self.t_start, 9)


def segment_laps(t: np.ndarray, s: np.ndarray, length: float, start_tol: float = 1.0) -> list[LapSegment]:
    """Split a run at forward seam crossings of arc length ``s``.

    Backward jitter across the seam is netted out so it never starts a lap.
    A lap is complete when it starts and ends on the line; the first lap
    counts as starting on the line if the vehicle spawned within
    ``start_tol`` metres of it.
    """
    n = len(s)
    if n == 0:
        return []
    starts = [0]
    net = best = 0
    for k in range(1, n):
        ds = s[k] - s[k - 1]
        if ds < -0.5 * length:
            net += 1
        elif ds > 0.5 * length:
            net -= 1
        if net > best:
            best = net
            starts.append(k)
    s0 = float(s[0]) % length
    first_on_line = min(s0, length - s0) <= start_tol
    laps = []
    for i, a in enumerate(starts):
        b = starts[i + 1] if i + 1 < len(starts) else n
        closed = i + 1 < len(starts)
        t_start = float(t[a])
        t_end = float(t[b]) if closed else float(t[b - 1])
        laps.append(LapSegment(i + 1, a, b, t_start, t_end, closed and (i > 0 or first_on_line)))
    return laps


# ---------------------------------------------------------------- metrics
@dataclass
class LapMetrics:
    lap: int
    complete: bool
    lap_time: float
    max_speed: float
    avg_speed: float
    mean_lateral_error: float
    max_lateral_error: float
    max_heading_error: float
    max_speed_error: float
    max_yaw_rate: float
    avg_yaw_rate: float
    max_understeer: float
    avg_understeer: float
    max_sideslip: float
    avg_sideslip: float
    max_lateral_velocity: float
    avg_lateral_velocity: float

    def to_dict(self) -> dict:
        return asdict(self)


def _absstats(x: np.ndarray) -> tuple[float, float]:
    x = np.abs(x[np.isfinite(x)])
    if not len(x):
        return 0.0, 0.0
    return float(x.max()), float(x.mean())


def sideslip_deg(vx: np.ndarray, vy: np.ndarray) -> np.ndarray:
    return np.degrees(np.arctan2(vy, vx))


def understeer_deg(steer: np.ndarray, yaw_rate: np.ndarray, vx: np.ndarray, wheelbase: float,
                   blend_speed: float) -> np.ndarray:
    """Steer angle minus the Ackermann angle for the observed yaw rate; NaN at low speed."""
    out = np.full(len(vx), np.nan)
    m = vx > blend_speed
    out[m] = np.degrees(steer[m] - np.arctan(wheelbase * yaw_rate[m] / vx[m]))
    return out


def compute_metrics(lap: LapSegment, master: MasterTable, vehicle: Mapping) -> LapMetrics:
    sl = slice(lap.start, lap.stop)
    vx = master[f"{GT}:twist.linear.0"][sl]
    vy = master[f"{GT}:twist.linear.1"][sl]
    r = master[f"{GT}:twist.yaw_rate"][sl]
    steer = master[f"{GT}:steer"][sl]
    speed = np.hypot(vx, vy)
    lat = master.get(f"{DBG}:lateral_error")
    head = master.get(f"{DBG}:heading_error")
    spd = master.get(f"{DBG}:speed_error")
    lat = lat[sl] if lat is not None else np.zeros(0)
    head = head[sl] if head is not None else np.zeros(0)
    spd = spd[sl] if spd is not None else np.zeros(0)
    wheelbase = float(vehicle["lf"]) + float(vehicle["lr"])
    us = understeer_deg(steer, r, vx, wheelbase, float(vehicle.get("blend_speed", 5.0)))
    beta = sideslip_deg(vx, vy)
    beta[~(vx > float(vehicle.get("blend_speed", 5.0)))] = np.nan
    max_lat, mean_lat = _absstats(lat)
    max_r, avg_r = _absstats(r)
    max_us, avg_us = _absstats(us)
    max_b, avg_b = _absstats(beta)
    max_vy, avg_vy = _absstats(vy)
    return LapMetrics(
        lap=lap.lap, complete=lap.complete, lap_time=lap.time,
        max_speed=float(speed.max()) if len(speed) else 0.0,
        avg_speed=float(speed.mean()) if len(speed) else 0.0,
        mean_lateral_error=mean_lat, max_lateral_error=max_lat,
        max_heading_error=_absstats(head)[0],
        max_speed_error=_absstats(spd)[0],
        max_yaw_rate=max_r, avg_yaw_rate=avg_r,
        max_understeer=max_us, avg_understeer=avg_us,
        max_sideslip=max_b, avg_sideslip=avg_b,
        max_lateral_velocity=max_vy, avg_lateral_velocity=avg_vy,
    )


def level(value: float, thresholds: Mapping[str, float] | None) -> str:
    if not thresholds:
        return "ok"
    if "red" in thresholds and value > thresholds["red"]:
        return "red"
    if "yellow" in thresholds and value > thresholds["yellow"]:
        return "yellow"
    return "ok"


# ---------------------------------------------------------------- ghosts
@dataclass
class GhostTrack:
    id: int
    x: np.ndarray
    y: np.ndarray
    yaw: np.ndarray
    v: np.ndarray
    s: np.ndarray
    length: float
    width: float


def ghost_tracks(master: MasterTable, count: int) -> list[GhostTrack]:
    out = []
    for i in range(count):
        col = lambda name: master[f"{OPP}:{name}.{i}"]  # noqa: E731
        out.append(GhostTrack(int(col("id")[0]), col("x"), col("y"), col("yaw"), col("v"), col("s"),
                              float(col("length")[0]), float(col("width")[0])))
    return out


@dataclass
class Collision:
    ghost: int
    row: int
    t: float
    t_end: float
    lap: int
    s: float
    d: float
    ego: tuple
    other: tuple


def detect_collisions(master: MasterTable, ghosts: list[GhostTrack], vehicle: Mapping) -> list[Collision]:
    """One record per contiguous overlap episode per ghost."""
    x = master[f"{GT}:pose.position.0"]
    y = master[f"{GT}:pose.position.1"]
    yaw = master[f"{GT}:pose.yaw"]
    L, W = float(vehicle["length"]), float(vehicle["width"])
    out = []
    for g in ghosts:
        reach = 0.5 * (math.hypot(L, W) + math.hypot(g.length, g.width))
        near = np.flatnonzero(np.hypot(x - g.x, y - g.y) <= reach)
        hits = np.zeros(len(x), dtype=bool)
        for k in near:
            hits[k] = footprints_overlap(x[k], y[k], yaw[k], L, W, g.x[k], g.y[k], g.yaw[k], g.length, g.width)
        k = 0
        n = len(hits)
        while k < n:
            if not hits[k]:
                k += 1
                continue
            j = k
            while j + 1 < n and hits[j + 1]:
                j += 1
            out.append(Collision(
                g.id, k, float(master.t[k]), float(master.t[j]),
                int(master[f"{GT}:lap"][k]), float(master[f"{GT}:frenet.s"][k]), float(master[f"{GT}:frenet.d"][k]),
                (float(x[k]), float(y[k]), float(yaw[k]), L, W),
                (float(g.x[k]), float(g.y[k]), float(g.yaw[k]), g.length, g.width),
            ))
            k = j + 1
    out.sort(key=lambda c: (c.t, c.ghost))
    return out


@dataclass
class OvertakeRecord:
    ghost: int
    outcome: str
    start: dict
    end: dict
    time_to_overtake: float
    avg_delta_speed: float

    def to_dict(self) -> dict:
        return asdict(self)


def wrap_gap(ds: np.ndarray, length: float) -> np.ndarray:
    return (ds + 0.5 * length) % length - 0.5 * length


def detect_overtakes(t: np.ndarray, ego_s: np.ndarray, ego_v: np.ndarray, ego_lap: np.ndarray,
                     ghosts: list[GhostTrack], length: float, collisions: list[Collision] = (),
                     start_gap: float = -30.0, end_gap: float = 20.0) -> list[OvertakeRecord]:
    """Overtakes scored on the wrapped gap ego - ghost.

    Start: first strict crossing of ``start_gap`` from below while behind.
    End: first subsequent strict crossing of ``end_gap`` from below. Falling
    back below ``start_gap`` abandons the attempt without a record.
    """
    out = []
    for g in ghosts:
        gap = wrap_gap(ego_s - g.s, length)
        start = None
        for k in range(1, len(gap)):
            a, b = gap[k - 1], gap[k]
            if start is None:
                if a < start_gap <= b < 0.0:
                    start = k
            elif b < start_gap:
                start = None
            elif a < end_gap <= b:
                t0, t1 = float(t[start]), float(t[k])
                hit = any(c.ghost == g.id and c.t <= t1 and c.t_end >= t0 for c in collisions)
                dv = ego_v[start:k + 1] - g.v[start:k + 1]
                out.append(OvertakeRecord(
                    g.id, "collision" if hit else "success",
                    {"lap": int(ego_lap[start]), "s": float(ego_s[start]), "t": t0},
                    {"lap": int(ego_lap[k]), "s": float(ego_s[k]), "t": t1},
                    round(t1 - t0, 9), float(np.mean(dv)),
                ))
                start = None
    return out


# ----------------------------------------------------------------- checks
@dataclass
class TestError:
    test: str
    description: str
    lap: int
    s: float
    d: float
    t: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SafetyStop:
    t: float
    reason: int
    emergency: bool
    lap: int
    s: float
    d: float
    stopped: bool
    on_track: bool

    def to_dict(self) -> dict:
        return asdict(self)


def boundary_distance(track: TrackModel, s: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Signed distance to the nearer track edge (negative outside), from Frenet coordinates."""
    n = len(track.cum_s)
    wl = np.resize(track.width_left, n)
    wr = np.resize(track.width_right, n)
    s = np.mod(s, track.total_length) if track.closed else s
    return np.minimum(np.interp(s, track.cum_s, wl) - d, np.interp(s, track.cum_s, wr) + d)


def _episodes(mask: np.ndarray) -> list[tuple[int, int]]:
    idx = np.flatnonzero(np.diff(np.concatenate([[0], mask.astype(np.int8), [0]])))
    return list(zip(idx[::2], idx[1::2]))


@dataclass
class CheckContext:
    master: MasterTable
    track: TrackModel
    laps: list[LapSegment]
    metrics: list[LapMetrics]
    events: list[dict]
    thresholds: Mapping[str, Mapping[str, float]]
    vehicle: Mapping
    collisions: list[Collision] = field(default_factory=list)
    min_distance: float = 10.0
    accept_safe_stop: bool = False
    suppress_window: float = 3.0

    def where(self, k: int) -> tuple[int, float, float, float]:
        m = self.master
        return (int(m[f"{GT}:lap"][k]), float(m[f"{GT}:frenet.s"][k]), float(m[f"{GT}:frenet.d"][k]),
                float(m.t[k]))

    def row_at(self, t: float) -> int:
        return int(min(max(np.searchsorted(self.master.t, t - 1e-9), 0), len(self.master.t) - 1))

    def error(self, test: str, description: str, k: int) -> TestError:
        lap, s, d, t = self.where(k)
        return TestError(test, description, lap, s, d, t)

    def boundary_distance(self) -> np.ndarray:
        s = self.master[f"{GT}:frenet.s"]
        d = self.master[f"{GT}:frenet.d"]
        return boundary_distance(self.track, s, d)

    def speed(self) -> np.ndarray:
        return np.hypot(self.master[f"{GT}:twist.linear.0"], self.master[f"{GT}:twist.linear.1"])

    def fatal_errors(self) -> list[dict]:
        out = []
        for e in self.events:
            if e["topic"] != "/errors" or int(e["payload"]["severity"]) != Severity.FATAL:
                continue
            if e["timestamp"] < self.suppress_window - 1e-9:
                continue
            out.append(e)
        return out

    def safety_stops(self) -> list[SafetyStop]:
        stop = self.master.get(f"{STOP}:stop")
        if stop is None or not np.any(stop > 0.5):
            return []
        k = int(np.argmax(stop > 0.5))
        speed = self.speed()
        after = speed[k:]
        stopped = bool(len(after) and after[-1] < 0.5)
        on_track = bool(np.all(self.boundary_distance()[k:] >= 0.0))
        lap, s, d, t = self.where(k)
        return [SafetyStop(t, int(self.master[f"{STOP}:reason"][k]), bool(self.master[f"{STOP}:emergency"][k] > 0.5),
                           lap, s, d, stopped, on_track)]


def check_tracking_errors(ctx: CheckContext) -> list[TestError]:
    out = []
    for key, (_, unit, test) in METRICS.items():
        if test != "tracking_errors":
            continue
        col = ctx.master.get(f"{DBG}:{key}")
        red = (ctx.thresholds.get(key) or {}).get("red")
        if col is None or red is None:
            continue
        for a, _ in _episodes(np.abs(np.nan_to_num(col)) > red):
            out.append(ctx.error("tracking_errors", f"{key} {abs(col[a]):.3f} {unit} above red threshold {red}", a))
    return out


def check_car_started(ctx: CheckContext) -> list[TestError]:
    x = ctx.master[f"{GT}:pose.position.0"]
    y = ctx.master[f"{GT}:pose.position.1"]
    dist = float(np.sum(np.hypot(np.diff(x), np.diff(y)))) if len(x) > 1 else 0.0
    if dist > ctx.min_distance:
        return []
    return [ctx.error("car_started", f"vehicle covered only {dist:.1f} m (minimum {ctx.min_distance} m)", 0)]


def check_car_stopped(ctx: CheckContext, min_duration: float = 2.0) -> list[TestError]:
    speed = ctx.speed()
    commanded = np.zeros(len(speed), dtype=bool)
    for key in (f"{STOP}:stop", "/mission/status:stop_requested"):
        col = ctx.master.get(key)
        if col is not None:
            commanded |= np.nan_to_num(col) > 0.5
    not_moving = ctx.master.get("/mission/status:authorized")
    if not_moving is not None:
        commanded |= np.nan_to_num(not_moving, nan=1.0) < 0.5
    out = []
    for a, b in _episodes((speed < 0.5) & ~commanded):
        if ctx.master.t[b - 1] - ctx.master.t[a] > min_duration:
            out.append(ctx.error("car_stopped", "vehicle stopped unexpectedly", a))
    return out


def check_stack_errors(ctx: CheckContext) -> list[TestError]:
    stops = ctx.safety_stops()
    safe = bool(stops) and stops[0].stopped and stops[0].on_track
    out = []
    for e in ctx.fatal_errors():
        code = int(e["payload"]["code"])
        try:
            name = ErrorCode(code).name
        except ValueError:
            name = f"code {code}"
        desc = (e.get("meta") or {}).get("description") or ERROR_DESCRIPTIONS.get(code, "")
        outcome = "vehicle stopped safely on track" if safe else "vehicle did not complete a safe stop"
        if ctx.accept_safe_stop and safe:
            continue
        out.append(ctx.error("stack_errors", f"{name} from {e['publisher']}: {desc}; {outcome}",
                             ctx.row_at(e["timestamp"])))
    return out


def check_track_boundaries(ctx: CheckContext) -> list[TestError]:
    dist = ctx.boundary_distance()
    return [ctx.error("track_boundaries", f"vehicle left the track ({-dist[a:b].min():.2f} m beyond the edge)", a)
            for a, b in _episodes(dist < 0.0)]


def check_dynamics_metrics(ctx: CheckContext) -> list[TestError]:
    out = []
    for key, (attr, unit, test) in METRICS.items():
        if test != "dynamics_metrics":
            continue
        th = ctx.thresholds.get(key)
        for m in ctx.metrics:
            value = getattr(m, attr)
            if level(value, th) == "red":
                lap = next(l for l in ctx.laps if l.lap == m.lap)
                out.append(ctx.error("dynamics_metrics", f"lap {m.lap} {key} {value:.3f} {unit} above red threshold {th['red']}",
                                     lap.start))
    return out


def check_ghost_collisions(ctx: CheckContext) -> list[TestError]:
    return [TestError("ghost_collisions", f"collision with ghost {c.ghost}", c.lap, c.s, c.d, c.t)
            for c in ctx.collisions]


CHECKS = {
    "tracking_errors": check_tracking_errors,
    "car_started": check_car_started,
    "car_stopped": check_car_stopped,
    "stack_errors": check_stack_errors,
    "track_boundaries": check_track_boundaries,
    "dynamics_metrics": check_dynamics_metrics,
    "ghost_collisions": check_ghost_collisions,
}


def run_tests(ctx: CheckContext, enabled: list[str] | None = None) -> tuple[list[TestError], dict[str, str]]:
    """Run the enabled checks; returns (errors, status per test)."""
    enabled = list(TEST_NAMES) if enabled is None else enabled
    unknown = set(enabled) - set(TEST_NAMES)
    if unknown:
        raise ValueError(f"unknown test(s): {', '.join(sorted(unknown))}")
    errors: list[TestError] = []
    status = {}
    for name in TEST_NAMES:
        if name not in enabled:
            status[name] = "skipped"
            continue
        found = CHECKS[name](ctx)
        status[name] = "fail" if found else "pass"
        errors += found
    errors.sort(key=lambda e: (e.t, TEST_NAMES.index(e.test)))
    return errors, status
