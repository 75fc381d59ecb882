"""Fault-injection proxy for bus topics.

A configured topic ``T`` is intercepted by remapping its producers to
``T/_raw``. The proxy node subscribes there and republishes on ``T`` after
applying the configured faults. Per addressed field the order is fixed:
repetition override, multiplier, offset, Gaussian noise. The message is
then delivered ``delay`` ms later with its stamp untouched, or dropped when
the delay is -1.

Fault files use this shape::

    localization:            # stack module, informational only
      - name: /loc/odom
        delay: 20            # ms, -1 stops publication
        field_faults:
          pose:
            position: {fault_mult: 100}
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .errors import ConfigError
from .plant import NoiseStreams
from .simbus import Message, Node, SimBus, flatten, has_path, unflatten

RAW_SUFFIX = "/_raw"
FAULT_KEYS = ("fault_mult", "fault_offset", "fault_repeat", "fault_gauss")
COMMAND_TARGET = "faults"


@dataclass
class FieldFault:
    path: str
    mult: float | None = None
    offset: float | None = None
    repeat_count: int = 0
    repeat_value: Any = None
    gauss: tuple[float, float] | None = None  # (mean, variance)


@dataclass
class TopicFault:
    name: str
    delay_ms: float = 0.0
    fields: dict[str, FieldFault] = field(default_factory=dict)

    @property
    def drops(self) -> bool:
        return self.delay_ms == -1


def _parse_field(path: str, cfg: Mapping) -> FieldFault:
    ff = FieldFault(path)
    if "fault_mult" in cfg:
        ff.mult = float(cfg["fault_mult"])
    if "fault_offset" in cfg:
        ff.offset = float(cfg["fault_offset"])
    if "fault_repeat" in cfg:
        rep = cfg["fault_repeat"]
        if not isinstance(rep, Mapping) or "count" not in rep:
            raise ConfigError(f"fault_repeat on {path} needs a count")
        ff.repeat_count = int(rep["count"])
        if ff.repeat_count < 1:
            raise ConfigError(f"fault_repeat count on {path} must be >= 1")
        ff.repeat_value = rep.get("value")
    if "fault_gauss" in cfg:
        g = cfg["fault_gauss"] or {}
        mean, var = float(g.get("mean", 0.0)), float(g.get("variance", 0.0))
        if var < 0:
            raise ConfigError(f"fault_gauss variance on {path} must be >= 0")
        ff.gauss = (mean, var)
    return ff


def _walk(tree: Mapping, prefix: str, out: dict[str, FieldFault]) -> None:
    if not isinstance(tree, Mapping):
        raise ConfigError(f"field_faults entry {prefix or '<root>'} must be a mapping")
    if any(k in tree for k in FAULT_KEYS):
        if not prefix:
            raise ConfigError("faults must address a field, not the whole message")
        out[prefix] = _parse_field(prefix, tree)
    for key, sub in tree.items():
        if key in FAULT_KEYS:
            continue
        _walk(sub, f"{prefix}.{key}" if prefix else str(key), out)


def parse_topic_entry(entry: Mapping) -> TopicFault:
    if not isinstance(entry, Mapping) or "name" not in entry:
        raise ConfigError("fault entry without a topic name")
    try:
        delay = float(entry.get("delay", 0))
        tf = TopicFault(str(entry["name"]), delay)
        _walk(entry.get("field_faults") or {}, "", tf.fields)
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"{entry['name']}: malformed fault entry: {exc}") from exc
    if delay < 0 and delay != -1:
        raise ConfigError(f"{entry['name']}: delay must be >= 0 or exactly -1")
    return tf


class FaultSpec:
    """Active fault configuration, kept both as raw YAML tree and parsed per topic."""

    def __init__(self, raw: Mapping | None = None):
        self.raw: dict[str, dict] = {}  # topic -> entry mapping
        self.topics: dict[str, TopicFault] = {}
        if raw:
            self.merge(raw)

    @staticmethod
    def entries(doc: Mapping | None) -> Iterable[Mapping]:
        if not doc:
            return []
        if not isinstance(doc, Mapping):
            raise ConfigError("fault spec must map module names to topic lists")
        out = []
        for module, items in doc.items():
            if not isinstance(items, list):
                raise ConfigError(f"fault module {module!r} must hold a list of topic entries")
            out.extend(items)
        return out

    def merge(self, doc: Mapping | None) -> list[tuple[str, str]]:
        """Merge a patch; returns the (topic, path) pairs whose repeat must restart."""
        restarted = []
        for entry in self.entries(doc):
            parse_topic_entry(entry)  # validate before touching state
            name = str(entry["name"])
            current = self.raw.setdefault(name, {"name": name, "delay": 0, "field_faults": {}})
            if "delay" in entry:
                current["delay"] = entry["delay"]
            if entry.get("field_faults"):
                current["field_faults"] = _deep_merge(current.get("field_faults") or {}, entry["field_faults"])
                patch = {}
                _walk(entry["field_faults"], "", patch)
                restarted += [(name, p) for p, ff in patch.items() if ff.repeat_count]
            self.topics[name] = parse_topic_entry(current)
        return restarted

    @classmethod
    def load(cls, path: str | Path) -> "FaultSpec":
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read fault file {path}: {exc}") from exc
        return cls(doc)


def _deep_merge(base: Mapping, patch: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for k, v in patch.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping) and k not in FAULT_KEYS:
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RepeatState:
    remaining: int = 0
    held: dict[str, Any] | None = None


def armed_state(topic: TopicFault, paths: Iterable[str] | None = None) -> dict[str, RepeatState]:
    """Repeat counters for ``topic``, freshly armed for ``paths`` (default: all)."""
    state = {}
    for p in topic.fields if paths is None else paths:
        ff = topic.fields.get(p)
        if ff is not None and ff.repeat_count:
            state[p] = RepeatState(ff.repeat_count)
    return state


def _leaves(flat: Mapping[str, Any], path: str) -> list[str]:
    return [k for k in flat if k == path or k.startswith(path + ".")]


def _map(value, fn):
    if isinstance(value, tuple):
        return tuple(fn(v) for v in value)
    return fn(value)


def apply_faults(payload: Mapping, topic: TopicFault, state: dict[str, RepeatState],
                 rng: NoiseStreams | None = None) -> dict | None:
    """Faulted copy of ``payload``; None when the topic is configured to drop."""
    if topic.drops:
        return None
    if not topic.fields:
        return dict(payload)
    flat = flatten(payload)
    for path in sorted(topic.fields):
        ff = topic.fields[path]
        leaves = _leaves(flat, path)
        rs = state.setdefault(path, RepeatState())
        if rs.remaining > 0:
            if rs.held is None:
                rs.held = {k: flat[k] for k in leaves}
            for k in leaves:
                if ff.repeat_value is None:
                    flat[k] = rs.held[k]
                else:
                    v = float(ff.repeat_value)
                    flat[k] = tuple(v for _ in flat[k]) if isinstance(flat[k], tuple) else v
            rs.remaining -= 1
        for k in leaves:
            if ff.mult is not None:
                flat[k] = _map(flat[k], lambda v, m=ff.mult: v * m)
            if ff.offset is not None:
                flat[k] = _map(flat[k], lambda v, b=ff.offset: v + b)
            if ff.gauss is not None:
                mean, var = ff.gauss
                gen = rng.get(f"faults:{topic.name}:{k}")
                sd = math.sqrt(var)
                flat[k] = _map(flat[k], lambda v: v + float(gen.normal(mean, sd)))
    return unflatten(flat)


class FaultProxy(Node):
    """Republishes intercepted topics with faults; reconfigurable from /scenario/commands."""

    def __init__(self, spec: FaultSpec | None = None, seed: int = 0, name: str = "fault_injector"):
        super().__init__(name, None)
        self.spec = spec or FaultSpec()
        self.noise = NoiseStreams(seed)
        self.state: dict[str, dict[str, RepeatState]] = {}
        self.last_due: dict[str, int] = {}
        self.intercepted: list[str] = []
        for t, tf in self.spec.topics.items():
            self._arm(t, tf.fields)

    def _arm(self, topic: str, paths) -> None:
        self.state.setdefault(topic, {}).update(armed_state(self.spec.topics[topic], paths))

    def intercept(self, bus: SimBus, topic: str) -> None:
        schema = bus.declared_schema(topic)
        if schema is None:
            raise ConfigError(f"fault topic {topic} has no registered publisher schema")
        producers = bus.publishers_of(topic)
        for node in producers:
            node.remap(topic, topic + RAW_SUFFIX)
        self.subscribe(topic + RAW_SUFFIX, self._on_raw)
        self.advertise(topic, schema)
        self.intercepted.append(topic)

    def validate(self, spec: FaultSpec | None = None) -> None:
        for t, tf in (spec or self.spec).topics.items():
            if t not in self.intercepted:
                raise ConfigError(f"fault topic {t} is not intercepted by the proxy")
            schema = self.publications[t]
            for path in tf.fields:
                if not has_path(schema, path):
                    raise ConfigError(f"fault field {path} is not part of {t}")

    def reconfigure(self, patch: Mapping | None) -> None:
        if not patch:
            return
        trial = FaultSpec()
        trial.merge(patch)
        self.validate(trial)
        for topic, path in self.spec.merge(patch):
            self._arm(topic, [path])

    def handle_command(self, msg: Message) -> None:
        for item in (msg.meta or {}).get("parameters", []):
            if COMMAND_TARGET in item:
                self.reconfigure(item[COMMAND_TARGET])

    def _on_raw(self, msg: Message) -> None:
        topic = msg.topic[: -len(RAW_SUFFIX)]
        tf = self.spec.topics.get(topic)
        if tf is None:
            self.publish(topic, msg.payload, stamp=msg.stamp, meta=msg.meta)
            return
        out = apply_faults(msg.payload, tf, self.state.setdefault(topic, {}), self.noise)
        if out is None:
            return
        clock = self.bus.clock
        due = max(clock.tick + clock.to_ticks(tf.delay_ms / 1000.0), self.last_due.get(topic, 0))
        self.last_due[topic] = due
        delay = (due - clock.tick) * clock.base_step
        self.publish(topic, out, stamp=msg.stamp, delay=delay, meta=msg.meta)


def install_proxy(bus: SimBus, spec: FaultSpec | None, extra_topics: Iterable[str] = (),
                  seed: int = 0) -> FaultProxy:
    """Register a proxy intercepting every topic in ``spec`` plus ``extra_topics``.

    ``extra_topics`` lets runtime patches address topics that carry no fault
    at startup. Must be called after the producers are registered and before
    the bus starts.
    """
    spec = spec or FaultSpec()
    proxy = FaultProxy(spec, seed)
    topics = list(dict.fromkeys([*spec.topics, *extra_topics]))
    for t in topics:
        proxy.intercept(bus, t)
    proxy.validate()
    if topics:
        proxy.subscribe("/scenario/commands", proxy.handle_command)
    bus.register(proxy)
    return proxy


def patch_topics(patch: Mapping | None) -> list[str]:
    return [str(e.get("name")) for e in FaultSpec.entries(patch)]


__all__ = [
    "FaultProxy", "FaultSpec", "FieldFault", "RepeatState", "TopicFault", "apply_faults", "armed_state",
    "install_proxy", "parse_topic_entry", "patch_topics",
]
