"""Localization filter and the ground-truth muxer placed in front of it."""

from __future__ import annotations

import math
from collections import deque

import numpy as np

from ..errors import ErrorCode, Severity
from ..simbus import Message, Node
from ..trackgeom import wrap_angle

LOC_SCHEMA = {
    "pose.position": 2, "pose.yaw": 0, "pose.covariance": 2,
    "twist.linear": 2, "twist.yaw_rate": 0, "twist.covariance": 2,
    "status.sources": 4,
}
SOURCES = ("gps", "lio", "imu", "wheel")
OK, BANNED, STALE = 0.0, 1.0, 2.0


class _Source:
    __slots__ = ("last_rx", "rejects", "accepts", "banned")

    def __init__(self):
        self.last_rx = -math.inf
        self.rejects = 0
        self.accepts = 0
        self.banned = False


class LocalizationFilter(Node):
    """Kalman filter over [x, y, vx_world, vy_world, yaw].

    Prediction integrates the IMU (gyro and body acceleration). GPS and LIO
    positions, LIO yaw and wheel speed correct it. Measurements are
    compensated for their age using the filter's own state history, so a
    message older than ``max_latency`` is discarded. A source whose
    innovations fail the chi-square gate ``ban_count`` times in a row is
    banned until it passes ``readmit_count`` times in a row. With no position
    source fused the position covariance grows without bound.
    """

    DEFAULTS = {
        "init_delay": 1.0,
        "accel_sigma": 0.3,
        "gyro_sigma": 0.01,
        "wheel_sigma": 0.1,
        "lio_yaw_sigma": 0.002,
        "chi2_threshold": 25.0,
        "ban_count": 5,
        "readmit_count": 10,
        "stale_timeout": 0.3,
        "watchdog_timeout": 0.5,
        "max_latency": 0.25,
    }

    def __init__(self, name: str = "localization", period: float = 0.01, params=None, n_imus: int = 2):
        super().__init__(name, period, params)
        self.subscribe("/gps/fix")
        self.subscribe("/lio/odom")
        self.subscribe("/wheel/speed")
        for i in range(n_imus):
            self.subscribe(f"/imu/{i}/data")
        self.advertise("/loc/odom", LOC_SCHEMA)
        self.sources = {k: _Source() for k in SOURCES}
        self.x: np.ndarray | None = None
        self.P: np.ndarray | None = None
        self.t_state = 0.0
        self.first_input = None
        self.last_input = -math.inf
        self.dead = False
        self.history: deque = deque()
        self.imu: dict[str, tuple[float, tuple]] = {}
        self.gyro = 0.0
        self.queue: list[tuple[str, Message]] = []

    # ------------------------------------------------------------ inputs
    def on_message(self, msg: Message) -> None:
        now = self.now
        self.last_input = now
        if self.first_input is None:
            self.first_input = now
        if msg.topic.startswith("/imu/"):
            self.imu[msg.topic] = (msg.payload["gyro"], msg.payload["accel"])
            self.sources["imu"].last_rx = now
            return
        src = {"/gps/fix": "gps", "/lio/odom": "lio", "/wheel/speed": "wheel"}[msg.topic]
        self.sources[src].last_rx = now
        self.queue.append((src, msg))

    # -------------------------------------------------------------- core
    def _initialize(self) -> bool:
        lio = [msg for src, msg in self.queue if src == "lio"]
        if not lio:
            return False
        pose = lio[-1].payload["pose"]
        pos, yaw = pose["position"], pose["yaw"]
        speed = 0.0
        for src, msg in self.queue:
            if src == "wheel":
                speed = msg.payload["speed"]
        self.x = np.array([pos[0], pos[1], speed * math.cos(yaw), speed * math.sin(yaw), yaw])
        self.P = np.diag([0.01, 0.01, 1.0, 1.0, 1e-4])
        # anchored at the measurement time; the next prediction brings it to now
        self.t_state = lio[-1].stamp
        self.queue.clear()
        return True

    def _predict(self, now: float) -> None:
        dt = now - self.t_state
        if dt <= 0.0:
            return
        if self.imu:
            vals = [self.imu[k] for k in sorted(self.imu)]
            gyro = sum(v[0] for v in vals) / len(vals)
            ax = sum(v[1][0] for v in vals) / len(vals)
            ay = sum(v[1][1] for v in vals) / len(vals)
        else:
            gyro, ax, ay = self.gyro, 0.0, 0.0
        self.gyro = gyro
        x = self.x
        yaw = x[4]
        c, s = math.cos(yaw), math.sin(yaw)
        awx = c * ax - s * ay
        awy = s * ax + c * ay
        x[0] += x[2] * dt + 0.5 * awx * dt * dt
        x[1] += x[3] * dt + 0.5 * awy * dt * dt
        x[2] += awx * dt
        x[3] += awy * dt
        x[4] = wrap_angle(yaw + gyro * dt)
        F = np.eye(5)
        F[0, 2] = F[1, 3] = dt
        # d(world accel)/d(yaw)
        F[2, 4] = (-s * ax - c * ay) * dt
        F[3, 4] = (c * ax - s * ay) * dt
        F[0, 4] = 0.5 * F[2, 4] * dt
        F[1, 4] = 0.5 * F[3, 4] * dt
        qa = self.params["accel_sigma"] ** 2
        G = np.array([0.5 * dt * dt, dt])
        Q = np.zeros((5, 5))
        for i, j in ((0, 2), (1, 3)):
            Q[i, i] = G[0] * G[0] * qa
            Q[i, j] = Q[j, i] = G[0] * G[1] * qa
            Q[j, j] = G[1] * G[1] * qa
        Q[4, 4] = (self.params["gyro_sigma"] * dt) ** 2
        self.P = F @ self.P @ F.T + Q
        self.t_state = now

    def _state_at(self, t: float) -> np.ndarray:
        """Filter state recorded at time t (latest entry not after t)."""
        best = None
        for ts, xs in reversed(self.history):
            if ts <= t + 1e-9:
                best = xs
                break
        return self.x if best is None else best

    def _update(self, src: str, z: np.ndarray, hx: np.ndarray, H: np.ndarray, R: np.ndarray,
                angle_rows=()) -> None:
        y = z - hx
        for k in angle_rows:
            y[k] = wrap_angle(y[k])
        S = H @ self.P @ H.T + R
        m2 = float(y @ np.linalg.solve(S, y))
        st = self.sources[src]
        if m2 > self.params["chi2_threshold"]:
            st.rejects += 1
            st.accepts = 0
            if not st.banned and st.rejects >= self.params["ban_count"]:
                st.banned = True
                self.report_error(ErrorCode.LOC_SOURCE_BANNED, Severity.WARNING, f"{src} banned")
            return
        st.rejects = 0
        st.accepts += 1
        if st.banned:
            if st.accepts < self.params["readmit_count"]:
                return
            st.banned = False
        K = self.P @ H.T @ np.linalg.inv(S)
        self.x = self.x + K @ y
        self.x[4] = wrap_angle(self.x[4])
        I_KH = np.eye(5) - K @ H
        self.P = I_KH @ self.P @ I_KH.T + K @ R @ K.T

    def _correct(self, now: float) -> None:
        max_age = self.params["max_latency"]
        queue, self.queue = self.queue, []
        for src, msg in queue:
            age = now - msg.stamp
            if age > max_age + 1e-9:
                continue
            past = self._state_at(msg.stamp)
            p = msg.payload
            if src == "gps":
                z = np.array(p["position"], dtype=float)
                H = np.zeros((2, 5))
                H[0, 0] = H[1, 1] = 1.0
                R = np.diag([max(p["covariance"][0], 1e-8), max(p["covariance"][1], 1e-8)])
                self._update(src, z, past[:2].copy(), H, R)
            elif src == "lio":
                pose = p["pose"]
                z = np.array([pose["position"][0], pose["position"][1], pose["yaw"]])
                H = np.zeros((3, 5))
                H[0, 0] = H[1, 1] = H[2, 4] = 1.0
                cov = pose["covariance"]
                R = np.diag([max(cov[0], 1e-8), max(cov[1], 1e-8), max(self.params["lio_yaw_sigma"], 1e-4) ** 2])
                self._update(src, z, np.array([past[0], past[1], past[4]]), H, R, angle_rows=(2,))
            else:
                yaw = self.x[4]
                c, s = math.cos(yaw), math.sin(yaw)
                H = np.array([[0.0, 0.0, c, s, -s * self.x[2] + c * self.x[3]]])
                hx = np.array([c * self.x[2] + s * self.x[3]])
                R = np.array([[max(self.params["wheel_sigma"], 1e-4) ** 2]])
                self._update(src, np.array([p["speed"]]), hx, H, R)

    def _status(self, now: float) -> tuple:
        out = []
        for k in SOURCES:
            st = self.sources[k]
            if st.banned:
                out.append(BANNED)
            elif now - st.last_rx > self.params["stale_timeout"]:
                out.append(STALE)
            else:
                out.append(OK)
        return tuple(out)

    def on_tick(self, now: float) -> None:
        if self.first_input is None or self.dead:
            return
        if now - self.last_input > self.params["watchdog_timeout"]:
            self.dead = True
            self.report_error(ErrorCode.LOC_WATCHDOG, Severity.FATAL, "no sensor input")
            return
        if self.x is None:
            if not self._initialize():
                return
        self._predict(now)
        self.history.append((now, self.x.copy()))
        horizon = self.params["max_latency"] + 0.05
        while self.history and self.history[0][0] < now - horizon:
            self.history.popleft()
        self._correct(now)
        if now - self.first_input < self.params["init_delay"] - 1e-9:
            return
        x, P = self.x, self.P
        yaw = x[4]
        c, s = math.cos(yaw), math.sin(yaw)
        self.publish("/loc/odom", {
            "pose": {"position": (float(x[0]), float(x[1])), "yaw": float(yaw),
                     "covariance": (float(P[0, 0]), float(P[1, 1]))},
            "twist": {"linear": (float(c * x[2] + s * x[3]), float(-s * x[2] + c * x[3])),
                      "yaw_rate": float(self.gyro),
                      "covariance": (float(P[2, 2]), float(P[3, 3]))},
            "status": {"sources": self._status(now)},
        })


def gt_to_loc(payload: dict, covariance: float) -> dict:
    return {
        "pose": {"position": payload["pose"]["position"], "yaw": payload["pose"]["yaw"],
                 "covariance": (covariance, covariance)},
        "twist": {"linear": payload["twist"]["linear"], "yaw_rate": payload["twist"]["yaw_rate"],
                  "covariance": (covariance, covariance)},
        "status": {"sources": (OK, OK, OK, OK)},
    }


class LocMuxer(Node):
    """Publishes ground truth on /loc/odom during warm-up, then the filter output.

    The switch is a hard cut at ``warmup`` seconds. In ground-truth mode the
    filter is bypassed for the whole run.
    """

    DEFAULTS = {"warmup": 3.0, "ground_truth_mode": False, "gt_covariance": 1e-6}

    def __init__(self, name: str = "loc_muxer", params=None):
        super().__init__(name, None, params)
        self.subscribe("/gt/odom", self._on_gt)
        self.subscribe("/loc/odom_raw", self._on_loc)
        self.advertise("/loc/odom", LOC_SCHEMA)

    def use_ground_truth(self, now: float) -> bool:
        return bool(self.params["ground_truth_mode"]) or now < self.params["warmup"] - 1e-9

    def _on_gt(self, msg: Message) -> None:
        if self.use_ground_truth(self.now):
            self.publish("/loc/odom", gt_to_loc(msg.payload, self.params["gt_covariance"]), stamp=msg.stamp)

    def _on_loc(self, msg: Message) -> None:
        if not self.use_ground_truth(self.now):
            self.publish("/loc/odom", msg.payload, stamp=msg.stamp)
