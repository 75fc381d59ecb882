"""Vehicle plant: single-track dynamics, sensor emulation and ghost opponents."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, fields, replace
from typing import Mapping

import numpy as np

from .errors import ConfigError, InitializationError
from .simbus import Node
from .trackgeom import FrenetPose, RacingLine, ReferenceLine, TrackModel, reproject_init, wrap_angle


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 790.0
    yaw_inertia: float = 1000.0
    lf: float = 1.724
    lr: float = 1.247
    cornering_stiffness_front: float = 110000.0
    cornering_stiffness_rear: float = 160000.0
    steer_max: float = 0.3
    steer_rate_max: float = 1.0
    force_max: float = 7000.0
    brake_force_max: float = 14000.0
    force_rate_max: float = 60000.0
    drag_coeff: float = 0.6
    blend_speed: float = 5.0
    length: float = 4.9
    width: float = 1.93

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"vehicle parameter {f.name} must be positive")

    @property
    def wheelbase(self) -> float:
        return self.lf + self.lr

    @property
    def understeer_gradient(self) -> float:
        """K_us in rad per m/s^2 of lateral acceleration."""
        cf, cr = self.cornering_stiffness_front, self.cornering_stiffness_rear
        return self.mass * (self.lr * cr - self.lf * cf) / (self.wheelbase * cf * cr)

    def steady_yaw_rate(self, speed: float, steer: float) -> float:
        """Linear single-track steady-state yaw rate v*delta / (L (1 + K v^2))."""
        L = self.wheelbase
        k = self.understeer_gradient / L
        return speed * steer / (L * (1.0 + k * speed * speed))

    @classmethod
    def from_mapping(cls, data: Mapping | None) -> "VehicleParams":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown vehicle parameter(s): {', '.join(sorted(unknown))}")
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass(frozen=True)
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    yaw_rate: float = 0.0
    steer: float = 0.0
    drive_force: float = 0.0
    ax: float = 0.0  # body-frame specific force, what an IMU would read
    ay: float = 0.0

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


def _clip(v: float, lo: float, hi: float) -> float:
    return lo if v < lo else hi if v > hi else v


def step(state: VehicleState, params: VehicleParams, steer_cmd: float, force_cmd: float,
         dt: float) -> VehicleState:
    """Advance one step: dynamic model above the blend speed, kinematic below.

    Velocities are updated first and the pose is integrated with the new
    velocities (semi-implicit Euler). Commands are saturated and rate limited.
    """
    p = params
    target = _clip(steer_cmd, -p.steer_max, p.steer_max)
    dmax = p.steer_rate_max * dt
    steer = state.steer + _clip(target - state.steer, -dmax, dmax)
    ftarget = _clip(force_cmd, -p.brake_force_max, p.force_max)
    fmax = p.force_rate_max * dt
    force = state.drive_force + _clip(ftarget - state.drive_force, -fmax, fmax)

    vx, vy, r = state.vx, state.vy, state.yaw_rate
    fx = force - p.drag_coeff * vx * abs(vx)
    L = p.wheelbase
    if vx >= p.blend_speed:
        cs, sn = math.cos(steer), math.sin(steer)
        vfy = vy + p.lf * r
        alpha_f = -math.atan2(-vx * sn + vfy * cs, vx * cs + vfy * sn)
        alpha_r = -math.atan2(vy - p.lr * r, vx)
        fyf = p.cornering_stiffness_front * alpha_f
        fyr = p.cornering_stiffness_rear * alpha_r
        ax = (fx - fyf * sn) / p.mass
        ay = (fyf * cs + fyr) / p.mass
        r_new = r + (p.lf * fyf * cs - p.lr * fyr) / p.yaw_inertia * dt
        vx_new = vx + (ax + vy * r) * dt
        vy_new = vy + (ay - vx * r) * dt
    else:
        # kinematic: integrate the CG speed, direction set by the sideslip angle
        v = math.hypot(vx, vy)
        fx = force - p.drag_coeff * v * v
        if v <= 0.0 and fx < 0.0:
            fx = 0.0
        ax = fx / p.mass
        v_new = max(0.0, v + ax * dt)
        tan_d = math.tan(steer)
        beta = math.atan(p.lr * tan_d / L)
        vx_new = v_new * math.cos(beta)
        vy_new = v_new * math.sin(beta)
        r_new = vx_new * tan_d / L
        ay = v_new * r_new
    yaw = wrap_angle(state.yaw + r_new * dt)
    c, s = math.cos(yaw), math.sin(yaw)
    x = state.x + (vx_new * c - vy_new * s) * dt
    y = state.y + (vx_new * s + vy_new * c) * dt
    assert math.isfinite(x) and math.isfinite(vx_new) and math.isfinite(r_new), "vehicle model diverged"
    return VehicleState(x, y, yaw, vx_new, vy_new, r_new, steer, force, ax, ay)


def hold_force(params: VehicleParams, v: float) -> float:
    """Drive force that balances drag at speed v."""
    return params.drag_coeff * v * v


def init_vehicle(center: TrackModel, traj: ReferenceLine, pose: FrenetPose, v0: float,
                 params: VehicleParams | None = None) -> tuple[VehicleState, FrenetPose]:
    """Spawn state for a pose given on ``traj``; returns (state, pose w.r.t. center)."""
    params = params or VehicleParams()
    if v0 < 0:
        raise InitializationError("initial speed must be non-negative")
    try:
        cpose = reproject_init(center, traj, pose)
    except Exception as exc:
        raise InitializationError(f"cannot place vehicle at {pose}: {exc}") from exc
    wl, wr = center.widths_at(cpose.s)
    if not (-wr < cpose.d < wl):
        raise InitializationError(f"spawn pose d={cpose.d:.2f} m lies outside the track")
    x, y, yaw = center.to_cartesian(cpose.s, cpose.d, cpose.mu)
    kappa = traj.curvature_at(pose.s)
    state = VehicleState(
        x=x, y=y, yaw=yaw, vx=v0, vy=0.0, yaw_rate=kappa * v0,
        steer=math.atan(params.wheelbase * kappa), drive_force=hold_force(params, v0),
    )
    return state, cpose


# ----------------------------------------------------------------- sensors
@dataclass
class GpsConfig:
    period: float = 0.1
    sigma: float = 0.05
    satellites: int = 14
    satellite_jitter: int = 1


@dataclass
class ImuConfig:
    period: float = 0.01
    accel_sigma: float = 0.05
    gyro_sigma: float = 0.002
    gyro_bias: float = 0.0
    accel_bias: tuple = (0.0, 0.0)


@dataclass
class WheelConfig:
    period: float = 0.02
    sigma: float = 0.05


@dataclass
class LioConfig:
    period: float = 0.05
    sigma: float = 0.03
    yaw_sigma: float = 0.002
    latency: float = 0.05


@dataclass
class SensorSuite:
    gt_period: float = 0.01
    gps: GpsConfig = field(default_factory=GpsConfig)
    imus: list = field(default_factory=lambda: [ImuConfig(), ImuConfig()])
    wheel: WheelConfig = field(default_factory=WheelConfig)
    lio: LioConfig = field(default_factory=LioConfig)

    @classmethod
    def from_mapping(cls, data: Mapping | None) -> "SensorSuite":
        data = dict(data or {})
        suite = cls()
        try:
            if "gt_period" in data:
                suite.gt_period = float(data.pop("gt_period"))
            if "gps" in data:
                suite.gps = GpsConfig(**data.pop("gps"))
            if "imus" in data:
                suite.imus = [ImuConfig(**cfg) for cfg in data.pop("imus")]
            if "wheel" in data:
                suite.wheel = WheelConfig(**data.pop("wheel"))
            if "lio" in data:
                suite.lio = LioConfig(**data.pop("lio"))
        except TypeError as exc:
            raise ConfigError(f"bad sensor configuration: {exc}") from exc
        if data:
            raise ConfigError(f"unknown sensor section(s): {', '.join(sorted(data))}")
        suite.validate()
        return suite

    def noiseless(self) -> "SensorSuite":
        return SensorSuite(
            gt_period=self.gt_period,
            gps=replace(self.gps, sigma=0.0, satellite_jitter=0),
            imus=[replace(i, accel_sigma=0.0, gyro_sigma=0.0) for i in self.imus],
            wheel=replace(self.wheel, sigma=0.0),
            lio=replace(self.lio, sigma=0.0, yaw_sigma=0.0),
        )

    def validate(self) -> None:
        sigmas = [self.gps.sigma, self.wheel.sigma, self.lio.sigma, self.lio.yaw_sigma]
        sigmas += [v for i in self.imus for v in (i.accel_sigma, i.gyro_sigma)]
        if any(s < 0 for s in sigmas):
            raise ConfigError("sensor noise sigmas must be >= 0")

    def topics(self) -> list[str]:
        return ["/gt/odom", "/gps/fix", *[f"/imu/{i}/data" for i in range(len(self.imus))],
                "/wheel/speed", "/lio/odom"]


class NoiseStreams:
    """Independent, named random streams derived from one scenario seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        rng = self._streams.get(name)
        if rng is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode()),))
            rng = self._streams[name] = np.random.Generator(np.random.PCG64(ss))
        return rng


def _noise(rng: np.random.Generator, sigma: float, n: int | None = None):
    if sigma <= 0.0:
        return 0.0 if n is None else (0.0,) * n
    if n is None:
        return float(rng.normal(0.0, sigma))
    return tuple(float(v) for v in rng.normal(0.0, sigma, n))


GT_SCHEMA = {
    "pose.position": 2, "pose.yaw": 0, "twist.linear": 2, "twist.yaw_rate": 0, "accel": 2,
    "steer": 0, "drive_force": 0, "frenet.s": 0, "frenet.d": 0, "frenet.mu": 0, "lap": 0,
}
GPS_SCHEMA = {"position": 2, "covariance": 2, "satellites": 0}
IMU_SCHEMA = {"gyro": 0, "accel": 2}
WHEEL_SCHEMA = {"speed": 0}
LIO_SCHEMA = {"pose.position": 2, "pose.yaw": 0, "pose.covariance": 2}


def emit_sensors(state: VehicleState, suite: SensorSuite, rng: NoiseStreams,
                 which: set[str] | None = None, frenet: FrenetPose | None = None,
                 lap: int = 1) -> dict[str, dict]:
    """Sensor payloads for ``state``; ``which`` limits the topics produced."""
    out: dict[str, dict] = {}

    def want(topic: str) -> bool:
        return which is None or topic in which

    if want("/gt/odom"):
        f = frenet or FrenetPose(0.0)
        out["/gt/odom"] = {
            "pose": {"position": (state.x, state.y), "yaw": state.yaw},
            "twist": {"linear": (state.vx, state.vy), "yaw_rate": state.yaw_rate},
            "accel": (state.ax, state.ay),
            "steer": state.steer,
            "drive_force": state.drive_force,
            "frenet": {"s": f.s, "d": f.d, "mu": f.mu},
            "lap": float(lap),
        }
    if want("/gps/fix"):
        g = suite.gps
        r = rng.get("gps")
        nx, ny = _noise(r, g.sigma, 2)
        jitter = int(r.integers(-g.satellite_jitter, g.satellite_jitter + 1)) if g.satellite_jitter else 0
        var = max(g.sigma, 1e-3) ** 2
        out["/gps/fix"] = {
            "position": (state.x + nx, state.y + ny),
            "covariance": (var, var),
            "satellites": float(g.satellites + jitter),
        }
    for i, imu in enumerate(suite.imus):
        topic = f"/imu/{i}/data"
        if not want(topic):
            continue
        r = rng.get(topic)
        gyro = state.yaw_rate + imu.gyro_bias + _noise(r, imu.gyro_sigma)
        na, nb = _noise(r, imu.accel_sigma, 2)
        out[topic] = {
            "gyro": gyro,
            "accel": (state.ax + imu.accel_bias[0] + na, state.ay + imu.accel_bias[1] + nb),
        }
    if want("/wheel/speed"):
        out["/wheel/speed"] = {"speed": state.vx + _noise(rng.get("wheel"), suite.wheel.sigma)}
    if want("/lio/odom"):
        lio = suite.lio
        r = rng.get("lio")
        nx, ny = _noise(r, lio.sigma, 2)
        var = max(lio.sigma, 1e-3) ** 2
        out["/lio/odom"] = {
            "pose": {
                "position": (state.x + nx, state.y + ny),
                "yaw": wrap_angle(state.yaw + _noise(r, lio.yaw_sigma)),
                "covariance": (var, var),
            }
        }
    return out


class LapCounter:
    """Lap index from a wrapping arc length; seam jitter never double counts."""

    def __init__(self, length: float, s0: float):
        self.length = length
        self.prev = s0
        self.net = 0
        self.best = 0

    def update(self, s: float) -> int:
        delta = s - self.prev
        if delta < -0.5 * self.length:
            self.net += 1
        elif delta > 0.5 * self.length:
            self.net -= 1
        self.prev = s
        self.best = max(self.best, self.net)
        return 1 + self.best


class PlantNode(Node):
    """Steps the vehicle every base step and publishes sensors at their rates."""

    def __init__(self, track: TrackModel, params: VehicleParams, state: VehicleState,
                 suite: SensorSuite, seed: int, name: str = "plant", period: float = 0.001):
        super().__init__(name, period)
        self.track = track
        self.vparams = params
        self.state = state
        self.suite = suite
        self.noise = NoiseStreams(seed)
        self.cmd = (state.steer, state.drive_force)
        f0 = track.to_frenet(state.x, state.y, state.yaw)
        self.frenet = f0
        self.laps = LapCounter(track.total_length, f0.s)
        self.lap = 1
        self._first = True
        self.subscribe("/cmd/actuation", self._on_cmd)
        self.advertise("/gt/odom", GT_SCHEMA)
        self.advertise("/gps/fix", GPS_SCHEMA)
        for i in range(len(suite.imus)):
            self.advertise(f"/imu/{i}/data", IMU_SCHEMA)
        self.advertise("/wheel/speed", WHEEL_SCHEMA)
        self.advertise("/lio/odom", LIO_SCHEMA)

    def on_start(self) -> None:
        clock = self.bus.clock
        self._every = {"/gt/odom": clock.to_ticks(self.suite.gt_period),
                       "/gps/fix": clock.to_ticks(self.suite.gps.period),
                       "/wheel/speed": clock.to_ticks(self.suite.wheel.period),
                       "/lio/odom": clock.to_ticks(self.suite.lio.period)}
        for i, imu in enumerate(self.suite.imus):
            self._every[f"/imu/{i}/data"] = clock.to_ticks(imu.period)
        self._lio_latency = self.suite.lio.latency
        clock.to_ticks(self._lio_latency)

    def _on_cmd(self, msg) -> None:
        self.cmd = (msg.payload["steer"], msg.payload["force"])

    def on_tick(self, now: float) -> None:
        if self._first:
            self._first = False  # publish the spawn state at t0 before stepping
        else:
            self.state = step(self.state, self.vparams, self.cmd[0], self.cmd[1], self.period)
        tick = self.bus.clock.tick
        due = {t for t, every in self._every.items() if tick % every == 0}
        if not due:
            return
        if "/gt/odom" in due:
            st = self.state
            f = self.track.to_frenet(st.x, st.y, st.yaw)
            self.lap = self.laps.update(f.s)
            self.frenet = f
        for topic, payload in emit_sensors(self.state, self.suite, self.noise, due, self.frenet, self.lap).items():
            if topic == "/lio/odom":
                self.publish(topic, payload, delay=self._lio_latency)
            else:
                self.publish(topic, payload)


# ------------------------------------------------------------------ ghosts
@dataclass
class GhostOpponent:
    id: int
    line: RacingLine
    s0: float
    speed: float
    length: float = 4.9
    width: float = 1.93


@dataclass
class GhostState:
    ghost: GhostOpponent
    s: float
    lap: int = 1
    travelled: float = 0.0


def step_ghosts(states: list[GhostState], speeds: Mapping[int, float], dt: float) -> None:
    """Advance every ghost along its own line by speed * dt (open loop)."""
    for g in states:
        v = float(speeds.get(g.ghost.id, g.ghost.speed))
        ds = v * dt
        g.travelled += ds
        s = g.s + ds
        L = g.ghost.line.total_length
        while s >= L:
            s -= L
            g.lap += 1
        g.s = s


def ghost_payloads(states: list[GhostState], speeds: Mapping[int, float], center: TrackModel):
    xs, ys, yaws, vs, cs, cd, laps = [], [], [], [], [], [], []
    for g in states:
        x, y, yaw = g.ghost.line.to_cartesian(g.s)
        xs.append(x)
        ys.append(y)
        yaws.append(yaw)
        vs.append(float(speeds.get(g.ghost.id, g.ghost.speed)))
        cs_, cd_ = center.project(x, y)
        cs.append(cs_)
        cd.append(cd_)
        laps.append(float(g.lap))
    truth = {
        "id": tuple(float(g.ghost.id) for g in states),
        "x": tuple(xs), "y": tuple(ys), "yaw": tuple(yaws), "v": tuple(vs),
        "s": tuple(cs), "d": tuple(cd), "lap": tuple(laps),
        "length": tuple(g.ghost.length for g in states),
        "width": tuple(g.ghost.width for g in states),
    }
    perception = {"x": tuple(xs), "y": tuple(ys), "yaw": tuple(yaws), "v": tuple(vs)}
    return truth, perception


class GhostNode(Node):
    DEFAULTS = {"speed": {}}

    def __init__(self, ghosts: list[GhostOpponent], center: TrackModel, name: str = "ghosts",
                 period: float = 0.01, params: Mapping | None = None):
        super().__init__(name, period, params)
        self.center = center
        self.states = [GhostState(g, g.line.normalize_s(g.s0)) for g in ghosts]
        n = len(ghosts)
        self.params["speed"] = {str(g.id): float(g.speed) for g in ghosts} | dict(self.params["speed"])
        self.advertise("/gt/opponents", {k: n for k in ("id", "x", "y", "yaw", "v", "s", "d", "lap", "length", "width")})
        self.advertise("/perception/opponents", {k: n for k in ("x", "y", "yaw", "v")})
        self._first = True

    def speeds(self) -> dict[int, float]:
        return {int(k): float(v) for k, v in self.params["speed"].items()}

    def on_tick(self, now: float) -> None:
        speeds = self.speeds()
        if self._first:
            self._first = False
        else:
            step_ghosts(self.states, speeds, self.period)
        truth, perception = ghost_payloads(self.states, speeds, self.center)
        self.publish("/gt/opponents", truth)
        self.publish("/perception/opponents", perception)
