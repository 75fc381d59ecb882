"""Deterministic simulation clock, periodic scheduler and topic bus.

Everything runs on one logical thread. Time advances in integer ticks of
``base_step`` seconds and every node period is an integer number of ticks, so
periodic activations never drift. Messages published while a tick is being
processed are delivered once every callback due in that tick has returned,
ordered by ``(stamp, publisher registration index, seq)``. Messages published
by subscribers during delivery (forwarders, the fault proxy) are delivered in
the same tick, in a further ordered round.

The speed-up factor only changes how the loop is paced against the wall
clock; simulation results never depend on it.
"""

from __future__ import annotations

import copy
import fnmatch
import hashlib
import heapq
import json
import logging
import time
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Iterable, Iterator, Mapping

from .errors import ConfigError, ErrorCode, ERROR_DESCRIPTIONS, Severity

logger = logging.getLogger(__name__)

BASE_STEP = 0.001
ERRORS_TOPIC = "/errors"
ERROR_SCHEMA = {"code": 0, "severity": 0}

Payload = dict
Schema = dict  # flat field path -> vector length (0 for a scalar leaf)


class Pacing(str, Enum):
    AS_FAST_AS_POSSIBLE = "as_fast_as_possible"
    WALL_CLOCK_SCALED = "wall_clock_scaled"


@dataclass
class SimClock:
    base_step: float = BASE_STEP
    speedup_factor: float = 1.0
    pacing_mode: Pacing = Pacing.AS_FAST_AS_POSSIBLE
    tick: int = 0

    def __post_init__(self) -> None:
        set_pacing(self, self.pacing_mode, self.speedup_factor)

    @property
    def sim_time(self) -> float:
        return self.tick * self.base_step

    def to_ticks(self, seconds: float) -> int:
        """Convert a duration to ticks; it must be a multiple of the base step."""
        n = round(seconds / self.base_step)
        if abs(n * self.base_step - seconds) > 1e-9:
            raise ConfigError(
                f"{seconds!r} s is not an integer multiple of the {self.base_step} s base step"
            )
        return n


def set_pacing(clock: SimClock, mode: Pacing | str, factor: float) -> None:
    if factor < 1:
        raise ConfigError(f"speed-up factor must be >= 1, got {factor}")
    clock.pacing_mode = Pacing(mode)
    clock.speedup_factor = float(factor)


class Message:
    """A timestamped payload on a topic.

    ``payload`` is a tree of dicts whose leaves are floats or tuples of floats.
    ``meta`` is an optional JSON-compatible attachment used by control-plane
    topics (error descriptions, scenario commands); it is not part of the
    numeric schema and is never touched by fault injection.

    Messages are shared between subscribers and must not be mutated.
    """

    __slots__ = ("topic", "stamp", "seq", "payload", "publisher", "pub_index", "meta")

    def __init__(self, topic, stamp, seq, payload, publisher="", pub_index=0, meta=None):
        self.topic = topic
        self.stamp = stamp
        self.seq = seq
        self.payload = payload
        self.publisher = publisher
        self.pub_index = pub_index
        self.meta = meta

    def get(self, path: str) -> Any:
        return get_path(self.payload, path)

    def sort_key(self) -> tuple:
        return (self.stamp, self.pub_index, self.seq)

    def to_record(self) -> list:
        payload = {k: list(v) if isinstance(v, tuple) else v for k, v in flatten(self.payload).items()}
        return [self.topic, self.stamp, self.seq, self.publisher, payload, self.meta]

    def __repr__(self) -> str:
        return f"Message({self.topic!r}, stamp={self.stamp!r}, seq={self.seq}, from={self.publisher!r})"


def flatten(payload: Mapping, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in payload.items():
        path = f"{prefix}{key}"
        if isinstance(value, Mapping):
            out.update(flatten(value, path + "."))
        else:
            out[path] = value
    return out


def unflatten(flat: Mapping[str, Any]) -> dict:
    root: dict = {}
    for path, value in flat.items():
        node = root
        parts = path.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return root


def schema_of(payload: Mapping) -> Schema:
    return {
        path: (len(value) if isinstance(value, (tuple, list)) else 0)
        for path, value in flatten(payload).items()
    }


def get_path(payload: Mapping, path: str) -> Any:
    node: Any = payload
    for part in path.split("."):
        node = node[part]
    return node


def has_path(schema: Schema, path: str) -> bool:
    """True if ``path`` names a leaf or a subtree of the flat schema."""
    return path in schema or any(key.startswith(path + ".") for key in schema)


class Node:
    """A participant on the bus.

    Subclasses set ``DEFAULTS`` (their parameter tree), declare their topics
    in ``__init__`` with :meth:`subscribe` and :meth:`advertise`, and override
    :meth:`on_tick` (called every ``period`` seconds) and/or
    :meth:`on_message`.
    """

    DEFAULTS: dict = {}

    def __init__(self, name: str, period: float | None = None, params: Mapping | None = None):
        self.name = name
        self.period = period
        self.params = copy.deepcopy(self.DEFAULTS)
        if params:
            self.params = merge_params(self.params, params)
        self.subscriptions: list[tuple[str, Callable[[Message], None] | None]] = []
        self.publications: dict[str, Schema] = {ERRORS_TOPIC: ERROR_SCHEMA}
        self.remap_rules: list[tuple[str, str]] = []
        self.bus: SimBus | None = None
        self.index = -1
        self._seq: dict[str, int] = {}
        self._checked: set[str] = set()

    # declaration --------------------------------------------------------
    def subscribe(self, pattern: str, handler: Callable[[Message], None] | None = None) -> None:
        self.subscriptions.append((pattern, handler))

    def advertise(self, topic: str, schema: Schema) -> None:
        self.publications[topic] = dict(schema)

    def remap(self, from_topic: str, to_topic: str) -> None:
        for src, _ in self.remap_rules:
            if src == from_topic:
                raise ConfigError(f"{self.name}: topic {from_topic} already remapped")
        self.remap_rules.append((from_topic, to_topic))

    def resolve(self, topic: str) -> str:
        for src, dst in self.remap_rules:
            if src == topic:
                return dst
        return topic

    # runtime ------------------------------------------------------------
    @property
    def now(self) -> float:
        return self.bus.clock.sim_time

    def publish(
        self,
        topic: str,
        payload: Payload,
        *,
        stamp: float | None = None,
        delay: float = 0.0,
        meta: Mapping | None = None,
    ) -> Message:
        return self.bus.publish(self, topic, payload, stamp=stamp, delay=delay, meta=meta)

    def report_error(self, code: ErrorCode, severity: Severity, description: str | None = None) -> None:
        self.publish(
            ERRORS_TOPIC,
            {"code": float(code), "severity": float(severity)},
            meta={"source": self.name, "description": description or ERROR_DESCRIPTIONS.get(code, "")},
        )

    def set_param(self, path: str, value: Any) -> None:
        set_param(self.params, path, value, owner=self.name)

    def on_start(self) -> None:
        pass

    def on_tick(self, now: float) -> None:
        pass

    def on_message(self, msg: Message) -> None:
        pass


def merge_params(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = merge_params(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_param(params: dict, path: str, value: Any, owner: str = "") -> None:
    parts = path.split("/") if "/" in path else path.split(".")
    node = params
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown parameter {owner}/{path}")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown parameter {owner}/{path}")
    node[parts[-1]] = copy.deepcopy(value)


class RunTrace:
    """Ordered record of every delivered message: ``(tick, Message)`` pairs."""

    def __init__(self, base_step: float = BASE_STEP):
        self.base_step = base_step
        self.entries: list[tuple[int, Message]] = []

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[int, Message]]:
        return iter(self.entries)

    def topics(self) -> list[str]:
        return sorted({m.topic for _, m in self.entries})

    def messages(self, topic: str) -> list[Message]:
        return [m for _, m in self.entries if m.topic == topic]

    def timed(self, topic: str) -> list[tuple[float, Message]]:
        return [(t * self.base_step, m) for t, m in self.entries if m.topic == topic]

    def iter_records(self) -> Iterator[str]:
        for tick, msg in self.entries:
            yield json.dumps([tick] + msg.to_record(), sort_keys=True, separators=(",", ":"))

    def to_bytes(self) -> bytes:
        return "\n".join(self.iter_records()).encode()

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.iter_records():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()


class SimBus:
    """Scheduler plus publish/subscribe bus over a :class:`SimClock`."""

    def __init__(self, clock: SimClock | None = None):
        self.clock = clock or SimClock()
        self.nodes: list[Node] = []
        self.trace = RunTrace(self.clock.base_step)
        self.schemas: dict[str, Schema] = {ERRORS_TOPIC: ERROR_SCHEMA}
        self.started = False
        self._pending: list[Message] = []
        self._delayed: list[tuple[int, int, Message]] = []
        self._counter = 0
        self._subs: list[tuple[str, Node, Callable[[Message], None]]] = []
        self._route_cache: dict[str, list[tuple[Node, Callable[[Message], None]]]] = {}
        self.wall_time = 0.0

    # registration -------------------------------------------------------
    def register(self, node: Node) -> Node:
        if self.started:
            raise ConfigError(f"cannot register {node.name!r}: simulation already started")
        if any(n.name == node.name for n in self.nodes):
            raise ConfigError(f"duplicate node name {node.name!r}")
        node.bus = self
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def publishers_of(self, topic: str) -> list[Node]:
        return [n for n in self.nodes if topic in n.publications and n.resolve(topic) == topic]

    def declared_schema(self, topic: str) -> Schema | None:
        """Schema of ``topic`` as declared by its (unremapped) publishers."""
        for n in self.nodes:
            if topic in n.publications:
                return n.publications[topic]
        return None

    def _resolve_schemas(self) -> None:
        schemas: dict[str, Schema] = {ERRORS_TOPIC: ERROR_SCHEMA}
        owners: dict[str, str] = {}
        for n in self.nodes:
            for topic, schema in n.publications.items():
                actual = n.resolve(topic)
                if actual in schemas and schemas[actual] != schema:
                    raise ConfigError(
                        f"schema mismatch on {actual}: {n.name} disagrees with {owners.get(actual, 'bus')}"
                    )
                schemas[actual] = schema
                owners[actual] = n.name
        self.schemas = schemas

    def start(self) -> None:
        if self.started:
            return
        self._resolve_schemas()
        self._subs = []
        for n in self.nodes:
            for pattern, handler in n.subscriptions:
                self._subs.append((n.resolve(pattern), n, handler or n.on_message))
        self._route_cache.clear()
        self.started = True
        for n in self.nodes:
            n.on_start()

    def _routes(self, topic: str) -> list[tuple[Node, Callable[[Message], None]]]:
        routes = self._route_cache.get(topic)
        if routes is None:
            routes = [
                (n, h) for pattern, n, h in self._subs
                if pattern == topic or fnmatch.fnmatchcase(topic, pattern)
            ]
            self._route_cache[topic] = routes
        return routes

    # publication --------------------------------------------------------
    def publish(self, node: Node, topic: str, payload: Payload, *, stamp=None, delay=0.0, meta=None) -> Message:
        if topic not in node.publications:
            raise ConfigError(f"{node.name} publishes undeclared topic {topic}")
        actual = node.resolve(topic)
        if actual not in node._checked:
            got = schema_of(payload)
            if got != node.publications[topic]:
                raise ConfigError(f"{node.name}: payload on {actual} does not match its schema")
            node._checked.add(actual)
        seq = node._seq.get(actual, 0)
        node._seq[actual] = seq + 1
        msg = Message(
            actual,
            self.clock.sim_time if stamp is None else stamp,
            seq,
            payload,
            node.name,
            node.index,
            dict(meta) if meta else None,
        )
        if delay:
            due = self.clock.tick + self.clock.to_ticks(delay)
            heapq.heappush(self._delayed, (due, self._counter, msg))
            self._counter += 1
        else:
            self._pending.append(msg)
        return msg

    def _guarded(self, node: Node, fn: Callable, arg) -> None:
        try:
            fn(arg)
        except ConfigError:
            raise
        except Exception as exc:  # noqa: BLE001 - converted to a stack error
            logger.debug("callback of %s raised", node.name, exc_info=True)
            node.report_error(ErrorCode.CALLBACK_EXCEPTION, Severity.FATAL, f"{type(exc).__name__}: {exc}")

    def _deliver(self, tick: int) -> None:
        while self._delayed and self._delayed[0][0] <= tick:
            self._pending.append(heapq.heappop(self._delayed)[2])
        rounds = 0
        while self._pending:
            rounds += 1
            if rounds > 64:
                raise RuntimeError("message cascade did not settle (forwarding loop?)")
            batch = sorted(self._pending, key=Message.sort_key)
            self._pending = []
            for msg in batch:
                self.trace.entries.append((tick, msg))
                for node, handler in self._routes(msg.topic):
                    self._guarded(node, handler, msg)

    # main loop ----------------------------------------------------------
    def run(self, end_predicate: Callable[["SimBus"], bool], max_time: float | None = None) -> RunTrace:
        """Run until ``end_predicate(bus)`` first holds (checked after each tick)."""
        self.start()
        clock = self.clock
        heap: list[tuple[int, int]] = []
        periods: dict[int, int] = {}
        for n in self.nodes:
            if n.period:
                periods[n.index] = clock.to_ticks(n.period)
                heap.append((clock.tick, n.index))
        heapq.heapify(heap)
        end_tick = None if max_time is None else clock.to_ticks(max_time)
        wall0 = time.perf_counter()
        tick0 = clock.tick
        scaled = clock.pacing_mode is Pacing.WALL_CLOCK_SCALED
        while heap or self._delayed or self._pending:
            candidates = []
            if heap:
                candidates.append(heap[0][0])
            if self._delayed:
                candidates.append(self._delayed[0][0])
            tick = min(candidates) if candidates else clock.tick
            if end_tick is not None and tick > end_tick:
                break
            clock.tick = tick
            if scaled:
                target = wall0 + (tick - tick0) * clock.base_step / clock.speedup_factor
                lag = target - time.perf_counter()
                if lag > 0:
                    time.sleep(lag)
            while heap and heap[0][0] == tick:
                _, idx = heapq.heappop(heap)
                node = self.nodes[idx]
                self._guarded(node, node.on_tick, clock.sim_time)
                heapq.heappush(heap, (tick + periods[idx], idx))
            self._deliver(tick)
            if end_predicate(self):
                break
        self.wall_time = time.perf_counter() - wall0
        return self.trace


def schedule_run(
    nodes: Iterable[Node],
    clock: SimClock,
    end_predicate: Callable[[SimBus], bool],
    max_time: float | None = None,
) -> RunTrace:
    """Register ``nodes`` in order on a fresh bus and run it to completion."""
    bus = SimBus(clock)
    for node in nodes:
        bus.register(node)
    return bus.run(end_predicate, max_time=max_time)
