"""Safety supervisor and mission control."""

from __future__ import annotations

from ..errors import ErrorCode, Severity
from ..simbus import Message, Node

STOP_SCHEMA = {"stop": 0, "emergency": 0, "reason": 0}
MISSION_SCHEMA = {"authorized": 0, "max_speed": 0, "stop_requested": 0}


class SafetyNode(Node):
    """Latches a stop on any fatal error or when the pose covariance is too large.

    In autosim mode errors during the first ``suppress_window`` seconds are
    ignored, since the stack is still warming up. A localization watchdog
    error latches an emergency stop (zero steer, full brake).
    """

    DEFAULTS = {"autosim": True, "suppress_window": 3.0, "covariance_threshold": 0.03}

    def __init__(self, name: str = "safety", period: float = 0.01, params=None):
        super().__init__(name, period, params)
        self.stop = False
        self.emergency = False
        self.reason = 0
        self.subscribe("/errors", self._on_error)
        self.subscribe("/loc/odom", self._on_loc)
        self.advertise("/cmd/stop", STOP_SCHEMA)

    def suppressed(self, t: float) -> bool:
        return bool(self.params["autosim"]) and t < self.params["suppress_window"] - 1e-9

    def _latch(self, code: int, emergency: bool = False) -> None:
        if not self.stop:
            self.reason = int(code)
        self.stop = True
        self.emergency = self.emergency or emergency

    def _on_error(self, msg: Message) -> None:
        if msg.publisher == self.name or self.suppressed(self.now):
            return
        if int(msg.payload["severity"]) != Severity.FATAL:
            return
        code = int(msg.payload["code"])
        self._latch(code, emergency=code == ErrorCode.LOC_WATCHDOG)

    def _on_loc(self, msg: Message) -> None:
        if self.stop or self.suppressed(self.now):
            return
        cov = max(msg.payload["pose"]["covariance"])
        if cov > self.params["covariance_threshold"]:
            self._latch(ErrorCode.COVARIANCE_EXCEEDED)
            self.report_error(ErrorCode.COVARIANCE_EXCEEDED, Severity.FATAL,
                              f"pose covariance {cov:.4f} m^2 above {self.params['covariance_threshold']}")

    def on_tick(self, now: float) -> None:
        self.publish("/cmd/stop", {"stop": float(self.stop), "emergency": float(self.emergency),
                                   "reason": float(self.reason)})


class MissionNode(Node):
    """Holds the operator-level mission: start authorization, speed cap, stop request."""

    DEFAULTS = {"spawn_on_track": True, "max_speed": 80.0, "stop": False}

    def __init__(self, name: str = "mission", period: float = 0.1, params=None):
        super().__init__(name, period, params)
        self.advertise("/mission/status", MISSION_SCHEMA)

    def on_tick(self, now: float) -> None:
        p = self.params
        self.publish("/mission/status", {
            "authorized": float(bool(p["spawn_on_track"])),
            "max_speed": float(p["max_speed"]),
            "stop_requested": float(bool(p["stop"])),
        })
