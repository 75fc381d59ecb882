"""Local planner: racing-line window, speed profile and overtaking offsets."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ErrorCode, ProjectionError, Severity
from ..simbus import Message, Node
from ..trackgeom import RacingLine, TrackModel

MODE_RACE, MODE_OVERTAKE, MODE_TRAIL, MODE_STOP = 0.0, 1.0, 2.0, 3.0


def trajectory_schema(n: int) -> dict:
    return {"x": n, "y": n, "v": n, "s": n, "offset": n, "tunnel_left": n, "tunnel_right": n, "mode": 0}


class LineRoom:
    """Free lateral room to the left/right of a racing line, per racing-line arc length."""

    def __init__(self, line: RacingLine, track: TrackModel):
        s_line = line.cum_s[:-1] if line.closed else line.cum_s
        left, right = [], []
        for i, s in enumerate(s_line):
            x, y = line.points[i]
            sc, dc = track.project(float(x), float(y))
            wl, wr = track.widths_at(sc)
            left.append(wl - dc)
            right.append(wr + dc)
        self.s = np.asarray(s_line, dtype=float)
        self.left = np.asarray(left)
        self.right = np.asarray(right)
        self.period = line.total_length if line.closed else None

    def at(self, s) -> tuple[np.ndarray, np.ndarray]:
        return (np.interp(s, self.s, self.left, period=self.period),
                np.interp(s, self.s, self.right, period=self.period))


class Planner(Node):
    """Publishes a window of the racing line with an optional lateral offset.

    An overtake starts when a slower opponent is within ``engage_distance``
    ahead. The offset is the opponent's lateral position plus or minus
    ``clearance_widths`` ego widths, on whichever side fits inside the track
    with ``boundary_margin`` to spare. If neither side fits the planner trails
    the opponent at ``follow_gap`` and reports a warning. The offset is
    blended in and out linearly over ``ramp_length`` metres of travel.
    """

    DEFAULTS = {
        "points": 45,
        "spacing": 5.0,
        "behind": 10.0,
        "engage_distance": 80.0,
        "return_gap": 20.0,
        "clearance_widths": 2.5,
        "boundary_margin": 0.5,
        "ramp_length": 120.0,
        "ramp_offset": 5.0,
        "follow_gap": 30.0,
        "speed_margin": 1.0,
        "vehicle_width": 1.93,
    }

    def __init__(self, line: RacingLine, track: TrackModel, name: str = "planner",
                 period: float = 0.05, params=None):
        super().__init__(name, period, params)
        self.line = line
        self.track = track
        self.room = LineRoom(line, track)
        self.loc: dict | None = None
        self.opponents: dict | None = None
        self.stop = False
        self.mission = {"authorized": 1.0, "max_speed": math.inf, "stop_requested": 0.0}
        self.target: int | None = None
        self.trailing = False
        self.warned: set[int] = set()
        self.offset = 0.0
        self.target_offset = 0.0
        self.last_s: float | None = None
        self.subscribe("/loc/odom", self._on_loc)
        self.subscribe("/perception/opponents", self._on_opp)
        self.subscribe("/cmd/stop", self._on_stop)
        self.subscribe("/mission/status", self._on_mission)
        self.advertise("/plan/trajectory", trajectory_schema(int(self.params["points"])))

    def _on_loc(self, msg: Message) -> None:
        self.loc = msg.payload

    def _on_opp(self, msg: Message) -> None:
        self.opponents = msg.payload

    def _on_stop(self, msg: Message) -> None:
        self.stop = bool(msg.payload["stop"])

    def _on_mission(self, msg: Message) -> None:
        self.mission = dict(msg.payload)

    # ------------------------------------------------------------ helpers
    def _opponents_on_line(self, s_ego: float):
        out = []
        opp = self.opponents
        if not opp:
            return out
        for i in range(len(opp["x"])):
            try:
                s_o, d_o = self.line.project(opp["x"][i], opp["y"][i])
            except ProjectionError:
                continue
            gap = self.line.wrap_ds(s_ego - s_o)
            out.append((i, s_o, d_o, float(opp["v"][i]), gap))
        return out

    def _bounds(self, s) -> tuple[np.ndarray, np.ndarray]:
        left, right = self.room.at(s)
        keep = 0.5 * self.params["vehicle_width"] + self.params["boundary_margin"]
        return left - keep, -(right - keep)

    def _choose_offset(self, s_ego: float, s_o: float, d_o: float) -> float | None:
        ahead = self.line.wrap_ds(s_o - s_ego)
        s_win = s_ego + np.linspace(0.0, ahead + self.params["return_gap"] + 20.0, 40)
        hi, lo = self._bounds(s_win)
        c = self.params["clearance_widths"] * self.params["vehicle_width"]
        options = []
        if d_o + c <= hi.min():
            options.append(d_o + c)
        if d_o - c >= lo.max():
            options.append(d_o - c)
        if not options:
            return None
        return min(options, key=lambda o: (abs(o), -o))

    def _update_overtake(self, s_ego: float, v_ego: float, opps) -> tuple[float, float | None]:
        """Returns (target offset, follow speed cap)."""
        p = self.params
        by_id = {o[0]: o for o in opps}
        if self.target is not None and self.target in by_id:
            _, s_o, d_o, v_o, gap = by_id[self.target]
            if gap >= p["return_gap"] or gap < -p["engage_distance"] - 50.0:
                self.target = None
                self.trailing = False
                return 0.0, None
            if self.trailing:
                off = self._choose_offset(s_ego, s_o, d_o)
                if off is None:
                    return 0.0, max(0.0, v_o + 0.5 * (-gap - p["follow_gap"]))
                self.trailing = False
                return off, None
            return self.target_offset, None
        self.target = None
        self.trailing = False
        ahead = [o for o in opps if -p["engage_distance"] <= o[4] < 0.0 and o[3] < v_ego - p["speed_margin"]]
        if not ahead:
            return 0.0, None
        i, s_o, d_o, v_o, gap = max(ahead, key=lambda o: o[4])
        self.target = i
        off = self._choose_offset(s_ego, s_o, d_o)
        if off is None:
            self.trailing = True
            if i not in self.warned:
                self.warned.add(i)
                self.report_error(ErrorCode.PLANNER_NO_FEASIBLE_OFFSET, Severity.WARNING,
                                  f"no room to pass opponent {i}; following")
            return 0.0, max(0.0, v_o + 0.5 * (-gap - p["follow_gap"]))
        return off, None

    # --------------------------------------------------------------- tick
    def on_tick(self, now: float) -> None:
        if self.loc is None:
            return
        p = self.params
        x, y = self.loc["pose"]["position"]
        v_ego = float(self.loc["twist"]["linear"][0])
        s_ego, _ = self.line.project(x, y)
        travelled = 0.0 if self.last_s is None else max(0.0, self.line.wrap_ds(s_ego - self.last_s))
        self.last_s = s_ego

        opps = self._opponents_on_line(s_ego)
        target_offset, follow_cap = self._update_overtake(s_ego, v_ego, opps)
        self.target_offset = target_offset
        rate = p["ramp_offset"] / p["ramp_length"]
        step = rate * travelled
        self.offset += max(-step, min(step, target_offset - self.offset))

        n = int(p["points"])
        ds = np.arange(n) * p["spacing"] - p["behind"]
        s_pts = s_ego + ds
        blend = np.clip(np.maximum(ds, 0.0) * rate, 0.0, None)
        offsets = self.offset + np.clip(target_offset - self.offset, -blend, blend)
        hi, lo = self._bounds(s_pts)
        tunnel_left, tunnel_right = hi.copy(), lo.copy()

        cap = float(self.mission.get("max_speed", math.inf))
        stopping = self.stop or not self.mission.get("authorized", 1.0) or self.mission.get("stop_requested", 0.0)
        xs, ys, vs = np.empty(n), np.empty(n), np.empty(n)
        for k in range(n):
            px, py, _ = self.line.to_cartesian(float(s_pts[k]), float(offsets[k]))
            xs[k], ys[k] = px, py
            vs[k] = min(self.line.speed_at(float(s_pts[k])), cap)
        if follow_cap is not None:
            vs = np.minimum(vs, follow_cap)

        if self.target is not None and not self.trailing:
            _, s_o, d_o, v_o, _ = next(o for o in opps if o[0] == self.target)
            half = 0.5 * (p["vehicle_width"] + p["vehicle_width"]) + p["boundary_margin"]
            t_arr = np.maximum(ds, 0.0) / max(v_ego, 1.0)
            s_pred = s_o + v_o * t_arr
            near = np.abs([self.line.wrap_ds(a - b) for a, b in zip(s_pts, s_pred)]) < 6.0
            if target_offset < d_o:
                tunnel_left = np.where(near, np.minimum(tunnel_left, d_o - half), tunnel_left)
            else:
                tunnel_right = np.where(near, np.maximum(tunnel_right, d_o + half), tunnel_right)

        if stopping:
            vs[:] = 0.0
            mode = MODE_STOP
        elif self.target is None:
            mode = MODE_RACE
        else:
            mode = MODE_TRAIL if self.trailing else MODE_OVERTAKE
        self.publish("/plan/trajectory", {
            "x": tuple(xs.tolist()), "y": tuple(ys.tolist()), "v": tuple(vs.tolist()),
            "s": tuple(float(self.line.normalize_s(float(s))) for s in s_pts),
            "offset": tuple(offsets.tolist()),
            "tunnel_left": tuple(tunnel_left.tolist()), "tunnel_right": tuple(tunnel_right.tolist()),
            "mode": mode,
        })
