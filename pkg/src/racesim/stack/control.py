"""Pure-pursuit lateral control and PI longitudinal control."""

from __future__ import annotations

import math

import numpy as np

from ..plant import VehicleParams, hold_force
from ..simbus import Message, Node
from ..trackgeom import wrap_angle

ACTUATION_SCHEMA = {"steer": 0, "force": 0}
CTRL_DEBUG_SCHEMA = {
    "lateral_error": 0, "heading_error": 0, "speed_error": 0, "v_target": 0,
    "lookahead": 0, "curvature": 0, "steer_cmd": 0, "force_cmd": 0,
}


def path_foot(points: np.ndarray, x: float, y: float) -> tuple[int, float, float, float]:
    """Closest point of a polyline: (segment, fraction, arc length, signed distance).

    The distance is positive when (x, y) lies left of the path direction.
    """
    a = points[:-1]
    ab = points[1:] - a
    L2 = np.maximum((ab * ab).sum(axis=1), 1e-12)
    ap = np.array([x, y]) - a
    t = np.clip((ap * ab).sum(axis=1) / L2, 0.0, 1.0)
    foot = a + ab * t[:, None]
    d2 = ((np.array([x, y]) - foot) ** 2).sum(axis=1)
    i = int(np.argmin(d2))
    seg_len = np.sqrt(L2)
    arc = float(np.concatenate([[0.0], np.cumsum(seg_len)])[i] + t[i] * seg_len[i])
    cross = ab[i, 0] * (y - foot[i, 1]) - ab[i, 1] * (x - foot[i, 0])
    dist = math.sqrt(d2[i]) * (1.0 if cross >= 0 else -1.0)
    return i, float(t[i]), arc, dist


def point_at_arc(points: np.ndarray, arc: float) -> tuple[float, float]:
    seg = points[1:] - points[:-1]
    lens = np.sqrt((seg * seg).sum(axis=1))
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    if arc >= cum[-1]:
        u = seg[-1] / max(lens[-1], 1e-12)
        return tuple(points[-1] + u * (arc - cum[-1]))
    i = int(np.searchsorted(cum, arc, side="right") - 1)
    i = max(0, min(i, len(seg) - 1))
    f = (arc - cum[i]) / max(lens[i], 1e-12)
    return tuple(points[i] + seg[i] * f)


def three_point_curvature(points: np.ndarray, arc: float, span: float) -> float:
    """Signed curvature of the circle through the path points at arc, arc+span/2, arc+span."""
    ax, ay = point_at_arc(points, arc)
    bx, by = point_at_arc(points, arc + 0.5 * span)
    cx, cy = point_at_arc(points, arc + span)
    cross = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    den = math.hypot(bx - ax, by - ay) * math.hypot(cx - bx, cy - by) * math.hypot(cx - ax, cy - ay)
    return 2.0 * cross / den if den > 1e-9 else 0.0


class Controller(Node):
    """Tracks /plan/trajectory.

    Lateral: pure pursuit from the rear axle, with the steady-state rear slip
    angle for the path curvature added to the heading, with a speed-scheduled lookahead and an understeer feed-forward
    K_us * v^2 * kappa. Longitudinal: drag feed-forward plus PI on the speed
    error. The integrator is warm-started so the first command equals the
    force holding the initial speed.
    """

    DEFAULTS = {
        "lookahead_gain": 0.3,
        "lookahead_min": 8.0,
        "lookahead_max": 60.0,
        "speed_preview": 0.2,
        "kp": 1.0,
        "ki": 0.3,
        "integrator_limit": 6000.0,
        "understeer_comp": True,
    }

    def __init__(self, vehicle: VehicleParams, name: str = "controller", period: float = 0.01, params=None):
        super().__init__(name, period, params)
        self.vehicle = vehicle
        self.loc: dict | None = None
        self.traj: dict | None = None
        self.points: np.ndarray | None = None
        self.vel: np.ndarray | None = None
        self.arcs: np.ndarray | None = None
        self.integrator: float | None = None
        self.stop = False
        self.emergency = False
        self.subscribe("/loc/odom", self._on_loc)
        self.subscribe("/plan/trajectory", self._on_traj)
        self.subscribe("/cmd/stop", self._on_stop)
        self.advertise("/cmd/actuation", ACTUATION_SCHEMA)
        self.advertise("/ctrl/debug", CTRL_DEBUG_SCHEMA)

    def _on_loc(self, msg: Message) -> None:
        self.loc = msg.payload

    def _on_traj(self, msg: Message) -> None:
        p = msg.payload
        self.points = np.column_stack([p["x"], p["y"]])
        self.vel = np.asarray(p["v"], dtype=float)
        seg = np.diff(self.points, axis=0)
        self.arcs = np.concatenate([[0.0], np.cumsum(np.sqrt((seg * seg).sum(axis=1)))])

    def _on_stop(self, msg: Message) -> None:
        self.stop = bool(msg.payload["stop"])
        self.emergency = bool(msg.payload["emergency"])

    def on_tick(self, now: float) -> None:
        veh = self.vehicle
        if self.emergency:
            self.publish("/cmd/actuation", {"steer": 0.0, "force": -veh.brake_force_max})
            return
        if self.loc is None or self.points is None:
            return
        p = self.params
        x, y = self.loc["pose"]["position"]
        yaw = self.loc["pose"]["yaw"]
        vx, vy = self.loc["twist"]["linear"]
        v = max(float(vx), 0.0)

        seg, frac, arc, lat = path_foot(self.points, x, y)
        sx, sy = self.points[seg + 1] - self.points[seg]
        heading_err = wrap_angle(yaw - math.atan2(sy, sx))

        # lateral
        xr = x - veh.lr * math.cos(yaw)
        yr = y - veh.lr * math.sin(yaw)
        ld = min(max(p["lookahead_gain"] * v, p["lookahead_min"]), p["lookahead_max"])
        tx, ty = point_at_arc(self.points, arc + ld)
        # steady-state rear slip for the path curvature: the rear axle moves at
        # course yaw - alpha_r, with alpha_r = m v^2 kappa lf / (L C_r)
        kappa_path = three_point_curvature(self.points, arc, ld)
        alpha_r = veh.mass * v * v * kappa_path * veh.lf / (veh.wheelbase * veh.cornering_stiffness_rear)
        course = yaw - alpha_r
        alpha = wrap_angle(math.atan2(ty - yr, tx - xr) - course)
        dist = max(math.hypot(tx - xr, ty - yr), 1e-3)
        kappa = 2.0 * math.sin(alpha) / dist
        steer = math.atan(veh.wheelbase * kappa)
        if p["understeer_comp"]:
            steer += veh.understeer_gradient * v * v * kappa
        steer = max(-veh.steer_max, min(veh.steer_max, steer))

        # longitudinal
        v_t = float(np.interp(arc + v * p["speed_preview"], self.arcs, self.vel))
        err = v_t - v
        ff = hold_force(veh, v_t)
        kp = p["kp"] * veh.mass
        if self.integrator is None:
            self.integrator = hold_force(veh, v) - ff - kp * err
        lim = p["integrator_limit"]
        force = ff + kp * err + self.integrator
        saturated = force > veh.force_max or force < -veh.brake_force_max
        if not saturated:
            self.integrator = max(-lim, min(lim, self.integrator + p["ki"] * veh.mass * err * self.period))
        stopping = self.stop or v_t <= 0.0
        if stopping:
            force = min(force, 0.0)
        force = max(-veh.brake_force_max, min(veh.force_max, force))
        self.publish("/cmd/actuation", {"steer": steer, "force": force})
        self.publish("/ctrl/debug", {
            "lateral_error": lat, "heading_error": heading_err, "speed_error": err, "v_target": v_t,
            "lookahead": ld, "curvature": kappa, "steer_cmd": steer, "force_cmd": force,
        })
