"""Scenario loading, run assembly, command scheduling and end-of-run detection."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError, Severity
from .faultinject import COMMAND_TARGET, FaultProxy, FaultSpec, install_proxy, parse_topic_entry, patch_topics
from .plant import (
    GhostNode, GhostOpponent, PlantNode, SensorSuite, VehicleParams, init_vehicle,
)
from .simbus import Message, Node, Pacing, RunTrace, SimBus, SimClock, set_param
from .stack import Controller, LocalizationFilter, LocMuxer, MissionNode, Planner, SafetyNode, build_stack
from .telemetry.analysis import TEST_NAMES
from .trackgeom import FrenetPose, RacingLine, TrackModel, load_racing_line_csv, load_track_csv
from .tracks import offset_racing_line

HEARTBEAT_TOPIC = "/scenario/heartbeat"
COMMANDS_TOPIC = "/scenario/commands"


# ------------------------------------------------------------------ config
@dataclass
class InitSpec:
    s: float = 0.0
    d: float = 0.0
    mu: float = 0.0
    v0: float = 0.0


@dataclass
class GhostSpec:
    id: int
    speed: float
    gap: float | None = None
    s0: float | None = None
    length: float = 4.9
    width: float = 1.93


@dataclass
class SimConfig:
    track: Path
    racing_line: Path | dict = field(default_factory=dict)
    init: InitSpec = field(default_factory=InitSpec)
    speedup: float = 1.0
    pacing: str = Pacing.AS_FAST_AS_POSSIBLE.value
    ground_truth_mode: bool = False
    seed: int = 0
    max_time: float = 600.0
    ghosts: list[GhostSpec] = field(default_factory=list)
    faults: Path | None = None
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    sensors: SensorSuite = field(default_factory=SensorSuite)


@dataclass
class ReportConfig:
    tests: list[str] | None = None  # None: every test
    thresholds: dict[str, dict[str, float]] = field(default_factory=dict)
    mode: str = "overview"
    freq_bound: float = 100.0
    min_distance: float = 0.0
    accept_safe_stop: bool = False

    @classmethod
    def from_mapping(cls, data: Mapping | None) -> "ReportConfig":
        data = dict(data or {})
        known = {"tests", "thresholds", "mode", "freq_bound", "min_distance", "accept_safe_stop"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown report setting(s): {', '.join(sorted(unknown))}")
        cfg = cls(
            tests=list(data["tests"]) if data.get("tests") is not None else None,
            thresholds={k: dict(v) for k, v in (data.get("thresholds") or {}).items()},
            mode=str(data.get("mode", "overview")),
            freq_bound=float(data.get("freq_bound", 100.0)),
            min_distance=float(data.get("min_distance", 0.0)),
            accept_safe_stop=bool(data.get("accept_safe_stop", False)),
        )
        unknown_tests = set(cfg.tests or ()) - set(TEST_NAMES)
        if unknown_tests:
            raise ConfigError(f"unknown test(s): {', '.join(sorted(unknown_tests))}")
        if cfg.mode not in ("overview", "full"):
            raise ConfigError(f"report mode must be 'overview' or 'full', not {cfg.mode!r}")
        for metric, th in cfg.thresholds.items():
            if set(th) - {"yellow", "red"}:
                raise ConfigError(f"threshold {metric} accepts only yellow/red")
        return cfg

    def to_dict(self) -> dict:
        return {"tests": self.tests, "thresholds": self.thresholds, "mode": self.mode,
                "freq_bound": self.freq_bound, "min_distance": self.min_distance,
                "accept_safe_stop": self.accept_safe_stop}


@dataclass
class ScenarioConfig:
    sim: SimConfig
    parameters: dict[str, Any] = field(default_factory=dict)
    report: ReportConfig = field(default_factory=ReportConfig)
    tags: list[str] = field(default_factory=list)
    name: str = "scenario"


@dataclass
class CommandGroup:
    lap: int
    s: float
    parameters: list[dict[str, Any]]


@dataclass
class ScenarioScript:
    groups: list[CommandGroup] = field(default_factory=list)
    after_lap: int | None = None
    after_time: float | None = None
    grace: float = 0.5

    @property
    def end_lap(self) -> int | None:
        """Lap whose completion ends the run, or None when another rule applies."""
        if self.after_lap is not None:
            return self.after_lap
        if self.after_time is not None or self.groups:
            return None
        return 1

    @property
    def lap_after_last_group(self) -> bool:
        """Default end: one full lap after the position where the last group fired."""
        return self.after_lap is None and self.after_time is None and bool(self.groups)


# --------------------------------------------------------------- defaults
def node_defaults() -> dict[str, dict]:
    """Parameter trees of every configurable node, keyed by node name."""
    return {
        "localization": copy.deepcopy(LocalizationFilter.DEFAULTS),
        "loc_muxer": copy.deepcopy(LocMuxer.DEFAULTS),
        "planner": copy.deepcopy(Planner.DEFAULTS),
        "controller": copy.deepcopy(Controller.DEFAULTS),
        "safety": copy.deepcopy(SafetyNode.DEFAULTS),
        "mission": copy.deepcopy(MissionNode.DEFAULTS),
        "scenario_manager": copy.deepcopy(ScenarioManager.DEFAULTS),
        "stop_detector": copy.deepcopy(StopDetector.DEFAULTS),
    }


def split_target(target: str) -> tuple[str, str]:
    node, _, path = target.partition("/")
    if not node or not path:
        raise ConfigError(f"parameter target {target!r} must look like node/param")
    return node, path


def node_parameters(overrides: Mapping[str, Any], ghost_speeds: Mapping[int, float] | None = None) -> dict[str, dict]:
    """Default trees patched with ``node/param`` overrides; unknown paths raise."""
    trees = node_defaults()
    if ghost_speeds:
        trees["ghosts"] = {"speed": {str(i): float(v) for i, v in ghost_speeds.items()}}
    for target, value in overrides.items():
        node, path = split_target(target)
        if node not in trees:
            raise ConfigError(f"unknown parameter {target} (no node named {node!r})")
        set_param(trees[node], path, value, owner=node)
    return trees


def _normalize_items(items, where: str) -> list[dict[str, Any]]:
    if items is None:
        return []
    if isinstance(items, Mapping):
        items = [{k: v} for k, v in items.items()]
    if not isinstance(items, list):
        raise ConfigError(f"{where}: parameters must be a list of target: value entries")
    out = []
    for item in items:
        if not isinstance(item, Mapping):
            raise ConfigError(f"{where}: each parameter entry must be a mapping")
        for k, v in item.items():
            out.append({str(k): v})
    return out


def _load_yaml_docs(path: Path) -> list:
    if not path.is_file():
        raise ConfigError(f"missing scenario file {path}")
    try:
        return list(yaml.safe_load_all(path.read_text()))
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc


def _resolve(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else (base / p).resolve()


def parse_config(docs: list, base: Path, name: str = "scenario") -> ScenarioConfig:
    if not docs or not isinstance(docs[0], Mapping):
        raise ConfigError("config.yaml: first document must be a mapping")
    if len(docs) > 2:
        raise ConfigError("config.yaml: expected at most two documents")
    doc1 = dict(docs[0])
    report = ReportConfig.from_mapping(docs[1] if len(docs) > 1 else None)
    unknown = set(doc1) - {"tags", "sim", "parameters"}
    if unknown:
        raise ConfigError(f"config.yaml: unknown section(s) {', '.join(sorted(unknown))}")
    sim = dict(doc1.get("sim") or {})
    if "track" not in sim:
        raise ConfigError("config.yaml: sim.track is required")
    known = {"track", "racing_line", "init", "speedup", "pacing", "ground_truth_mode", "seed",
             "max_time", "ghosts", "faults", "vehicle", "sensors"}
    unknown = set(sim) - known
    if unknown:
        raise ConfigError(f"config.yaml: unknown sim setting(s) {', '.join(sorted(unknown))}")
    init = dict(sim.get("init") or {})
    if set(init) - {"s", "d", "mu", "v0"}:
        raise ConfigError("config.yaml: sim.init accepts s, d, mu, v0")
    ghosts = []
    for i, g in enumerate(sim.get("ghosts") or []):
        g = dict(g)
        if "speed" not in g or ("gap" not in g and "s0" not in g):
            raise ConfigError(f"ghost {i}: speed and one of gap/s0 are required")
        ghosts.append(GhostSpec(int(g.get("id", i)), float(g["speed"]), g.get("gap"), g.get("s0"),
                                float(g.get("length", 4.9)), float(g.get("width", 1.93))))
    line = sim.get("racing_line") or {}
    sensors = dict(sim.get("sensors") or {})
    noiseless = bool(sensors.pop("noiseless", False))
    suite = SensorSuite.from_mapping(sensors)
    pacing = str(sim.get("pacing", Pacing.AS_FAST_AS_POSSIBLE.value))
    if pacing not in {p.value for p in Pacing}:
        raise ConfigError(f"unknown pacing mode {pacing!r}")
    faults = sim.get("faults")
    if faults is None and (base / "faults.yaml").is_file():
        faults = "faults.yaml"
    cfg = ScenarioConfig(
        sim=SimConfig(
            track=_resolve(base, sim["track"]),
            racing_line=_resolve(base, line) if isinstance(line, str) else dict(line),
            init=InitSpec(**{k: float(v) for k, v in init.items()}),
            speedup=float(sim.get("speedup", 1.0)),
            pacing=pacing,
            ground_truth_mode=bool(sim.get("ground_truth_mode", False)),
            seed=int(sim.get("seed", 0)),
            max_time=float(sim.get("max_time", 600.0)),
            ghosts=ghosts,
            faults=_resolve(base, faults) if faults else None,
            vehicle=VehicleParams.from_mapping(sim.get("vehicle")),
            sensors=suite.noiseless() if noiseless else suite,
        ),
        parameters=dict(doc1.get("parameters") or {}),
        report=report,
        tags=[str(t) for t in doc1.get("tags") or []],
        name=name,
    )
    if cfg.sim.speedup < 1.0:
        raise ConfigError("speedup must be >= 1")
    node_parameters(cfg.parameters, {g.id: g.speed for g in ghosts})
    return cfg


def parse_script(doc, ghost_speeds: Mapping[int, float] | None = None) -> ScenarioScript:
    doc = dict(doc or {})
    unknown = set(doc) - {"groups", "end"}
    if unknown:
        raise ConfigError(f"scenario.yaml: unknown section(s) {', '.join(sorted(unknown))}")
    groups = []
    for i, g in enumerate(doc.get("groups") or []):
        if not isinstance(g, Mapping) or "lap" not in g or "s" not in g:
            raise ConfigError(f"scenario.yaml: group {i} needs lap and s")
        lap = int(g["lap"])
        if lap < 1:
            raise ConfigError(f"scenario.yaml: group {i} lap must be >= 1")
        items = _normalize_items(g.get("parameters"), f"group {i}")
        for item in items:
            (target, value), = item.items()
            if target == COMMAND_TARGET:
                for entry in FaultSpec.entries(value):
                    parse_topic_entry(entry)
            else:
                node_parameters({target: value}, ghost_speeds)
        groups.append(CommandGroup(lap, float(g["s"]), items))
    groups.sort(key=lambda g: (g.lap, g.s))
    end = dict(doc.get("end") or {})
    if set(end) - {"after_lap", "after_time", "grace"}:
        raise ConfigError("scenario.yaml: end accepts after_lap, after_time, grace")
    return ScenarioScript(
        groups,
        int(end["after_lap"]) if "after_lap" in end else None,
        float(end["after_time"]) if "after_time" in end else None,
        float(end.get("grace", 0.5)),
    )


def load_scenario(directory: str | Path) -> tuple[ScenarioConfig, ScenarioScript]:
    """Parse and validate ``config.yaml`` and ``scenario.yaml`` of a scenario directory."""
    base = Path(directory).resolve()
    if not base.is_dir():
        raise ConfigError(f"scenario directory {directory} does not exist")
    cfg = parse_config(_load_yaml_docs(base / "config.yaml"), base, base.name)
    script_docs = _load_yaml_docs(base / "scenario.yaml")
    script = parse_script(script_docs[0] if script_docs else None, {g.id: g.speed for g in cfg.sim.ghosts})
    if cfg.sim.faults is not None:
        FaultSpec.load(cfg.sim.faults)
    return cfg, script


# ------------------------------------------------------------ run nodes
def apply_commands(node: Node, msg: Message) -> None:
    """Apply the ``node/param`` entries of a command message addressed to ``node``."""
    for item in (msg.meta or {}).get("parameters", []):
        for target, value in item.items():
            if target == COMMAND_TARGET:
                continue
            name, path = split_target(target)
            if name == node.name:
                node.set_param(path, value)


class ScenarioManager(Node):
    """Fires command groups at (lap, s) and publishes a heartbeat until the script is done."""

    DEFAULTS = {"heartbeat_period": 0.1}

    def __init__(self, script: ScenarioScript, spawn_s: float, name: str = "scenario_manager",
                 period: float = 0.01, params=None):
        super().__init__(name, period, params)
        self.script = script
        self.lap = 1
        self.s = spawn_s
        self.lap_start_s = spawn_s
        self.fired: list[dict] = []
        self.pending = list(range(len(script.groups)))
        self.done_at: float | None = None
        self.last_beat = -math.inf
        self.beats = 0
        self.subscribe("/gt/odom", self._on_gt)
        self.advertise(COMMANDS_TOPIC, {"group": 0, "lap": 0, "s": 0})
        self.advertise(HEARTBEAT_TOPIC, {"count": 0})

    def _on_gt(self, msg: Message) -> None:
        lap = int(msg.payload["lap"])
        if lap != self.lap:
            self.lap_start_s = 0.0
        self.lap = lap
        self.s = float(msg.payload["frenet"]["s"])

    def _due(self, g: CommandGroup) -> bool:
        if self.lap > g.lap:
            return True
        return self.lap == g.lap and self.lap_start_s <= g.s <= self.s

    def terminal(self, now: float) -> bool:
        sc = self.script
        if self.pending:
            return False
        end_lap = sc.end_lap
        if end_lap is not None and self.lap <= end_lap:
            return False
        if sc.lap_after_last_group and self.fired:
            last = self.fired[-1]
            if (self.lap, self.s) < (last["lap"] + 1, last["s"]):
                return False
        if sc.after_time is not None and now < sc.after_time - 1e-9:
            return False
        return True

    def on_tick(self, now: float) -> None:
        for i in list(self.pending):
            g = self.script.groups[i]
            if not self._due(g):
                break
            self.pending.remove(i)
            self.fired.append({"group": i, "t": now, "lap": self.lap, "s": self.s})
            self.publish(COMMANDS_TOPIC, {"group": float(i), "lap": float(self.lap), "s": self.s},
                         meta={"parameters": g.parameters})
        if self.done_at is None and self.terminal(now):
            self.done_at = now
        if self.done_at is not None and now >= self.done_at + self.script.grace - 1e-9:
            return
        if now - self.last_beat >= self.params["heartbeat_period"] - 1e-9:
            self.last_beat = now
            self.beats += 1
            self.publish(HEARTBEAT_TOPIC, {"count": float(self.beats)})


class StopDetector(Node):
    """Decides when the run is over.

    Ends on heartbeat silence (completed), on a fatal stack error once the
    vehicle has stopped, or at the ``max_time`` wall (timeout, a failure).
    """

    DEFAULTS = {
        "heartbeat_period": 0.1,
        "heartbeat_periods": 3,
        "stop_speed": 0.5,
        "max_time": 600.0,
        "autosim": True,
        "suppress_window": 3.0,
    }

    def __init__(self, name: str = "stop_detector", period: float = 0.01, params=None):
        super().__init__(name, period, params)
        self.last_beat: float | None = None
        self.fatal: dict | None = None
        self.speed = math.inf
        self.finished = False
        self.reason = ""
        self.subscribe(HEARTBEAT_TOPIC, self._on_beat)
        self.subscribe("/errors", self._on_error)
        self.subscribe("/gt/odom", self._on_gt)

    def _on_beat(self, msg: Message) -> None:
        self.last_beat = self.now

    def _on_error(self, msg: Message) -> None:
        p = self.params
        if p["autosim"] and self.now < p["suppress_window"] - 1e-9:
            return
        if int(msg.payload["severity"]) == Severity.FATAL and self.fatal is None:
            self.fatal = {"t": self.now, "code": int(msg.payload["code"]), "source": msg.publisher}

    def _on_gt(self, msg: Message) -> None:
        self.speed = math.hypot(*msg.payload["twist"]["linear"])

    def _finish(self, reason: str) -> None:
        self.finished = True
        self.reason = reason

    def on_tick(self, now: float) -> None:
        if self.finished:
            return
        p = self.params
        if self.last_beat is not None and now - self.last_beat > p["heartbeat_periods"] * p["heartbeat_period"] + 1e-9:
            self._finish("completed")
        elif self.fatal is not None and self.speed < p["stop_speed"]:
            self._finish("stopped_after_fatal")
        elif now >= p["max_time"] - 1e-9:
            self._finish("timeout")


# --------------------------------------------------------------- assembly
def load_track_and_line(sim: SimConfig) -> tuple[TrackModel, RacingLine]:
    track = load_track_csv(sim.track)
    if isinstance(sim.racing_line, Path):
        line = load_racing_line_csv(sim.racing_line)
    else:
        spec = dict(sim.racing_line or {})
        if set(spec) - {"offset", "v_max", "a_lat_max"}:
            raise ConfigError("racing_line accepts a CSV path or offset/v_max/a_lat_max")
        line = offset_racing_line(track, float(spec.get("offset", 0.0)), float(spec.get("v_max", 80.0)),
                                  float(spec.get("a_lat_max", 20.0)))
    return track, line


@dataclass
class Run:
    bus: SimBus
    config: ScenarioConfig
    script: ScenarioScript
    track: TrackModel
    line: RacingLine
    manager: ScenarioManager
    detector: StopDetector
    proxy: FaultProxy

    def execute(self) -> "RunResult":
        trace = self.bus.run(lambda b: self.detector.finished, max_time=self.config.sim.max_time)
        reason = self.detector.reason or "timeout"
        return RunResult(self, trace, reason, list(self.manager.fired), self.bus.clock.sim_time,
                         self.bus.wall_time)


@dataclass
class RunResult:
    run: Run
    trace: RunTrace
    end_reason: str
    fired: list[dict]
    sim_time: float
    wall_time: float

    def metadata(self) -> dict:
        cfg = self.run.config
        sim = cfg.sim
        return {
            "scenario": cfg.name,
            "tags": cfg.tags,
            "seed": sim.seed,
            "speedup": sim.speedup,
            "pacing": sim.pacing,
            "ground_truth_mode": sim.ground_truth_mode,
            "end_reason": self.end_reason,
            "suppress_window": float(self.run.detector.params["suppress_window"])
            if self.run.detector.params["autosim"] else 0.0,
            "sim_time": round(self.sim_time, 9),
            "fired_groups": self.fired,
            "groups": len(self.run.script.groups),
            "vehicle": {k: getattr(sim.vehicle, k) for k in sim.vehicle.__dataclass_fields__},
            "report": cfg.report.to_dict(),
            "trace_digest": self.trace.digest(),
        }


def build_run(cfg: ScenarioConfig, script: ScenarioScript, *, seed: int | None = None,
              speedup: float | None = None, pacing: str | None = None) -> Run:
    """Assemble a fresh bus for one run; every node gets its own copy of the parameters."""
    sim = cfg.sim
    seed = sim.seed if seed is None else int(seed)
    clock = SimClock(speedup_factor=sim.speedup if speedup is None else float(speedup),
                     pacing_mode=Pacing(pacing or sim.pacing))
    track, line = load_track_and_line(sim)
    overrides = dict(cfg.parameters)
    overrides.setdefault("stop_detector/max_time", sim.max_time)
    params = node_parameters(overrides, {g.id: g.speed for g in sim.ghosts})
    init = sim.init
    state, _ = init_vehicle(track, line, FrenetPose(init.s, init.d, init.mu), init.v0, sim.vehicle)

    bus = SimBus(clock)
    plant = bus.register(PlantNode(track, sim.vehicle, state, sim.sensors, seed))
    nodes: list[Node] = []
    if sim.ghosts:
        ego_s = line.normalize_s(init.s)
        ghosts = [GhostOpponent(g.id, line, ego_s + g.gap if g.gap is not None else g.s0, g.speed,
                                g.length, g.width) for g in sim.ghosts]
        nodes.append(GhostNode(ghosts, track, params=params.get("ghosts")))
    nodes += build_stack(track, line, sim.vehicle, n_imus=len(sim.sensors.imus), params=params,
                         ground_truth_mode=sim.ground_truth_mode)
    manager = ScenarioManager(script, plant.frenet.s, params=params["scenario_manager"])
    detector = StopDetector(params=params["stop_detector"])
    nodes += [manager, detector]
    for node in nodes:
        bus.register(node)
        if node.name in params:
            node.subscribe(COMMANDS_TOPIC, lambda msg, n=node: apply_commands(n, msg))

    patches = [item[COMMAND_TARGET] for g in script.groups for item in g.parameters if COMMAND_TARGET in item]
    spec = FaultSpec.load(sim.faults) if sim.faults else FaultSpec()
    extra = [t for p in patches for t in patch_topics(p)]
    proxy = install_proxy(bus, spec, extra, seed=seed)
    for p in patches:
        trial = FaultSpec()
        trial.merge(p)
        proxy.validate(trial)
    return Run(bus, cfg, script, track, line, manager, detector, proxy)


def run_scenario(directory: str | Path, **overrides) -> RunResult:
    cfg, script = load_scenario(directory)
    return build_run(cfg, script, **overrides).execute()
