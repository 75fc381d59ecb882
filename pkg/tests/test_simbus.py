from __future__ import annotations

import pytest

from racesim.errors import ConfigError, ErrorCode
from racesim.simbus import (Message, Node, Pacing, RunTrace, SimBus, SimClock, flatten, has_path, schedule_run,
                            schema_of, set_param, unflatten)


class Ticker(Node):
    def __init__(self, name, period, topic="/t", value=0.0):
        super().__init__(name, period)
        self.topic = topic
        self.value = value
        self.advertise(topic, {"v": 0})

    def on_tick(self, now):
        self.publish(self.topic, {"v": self.value})


class Recorder(Node):
    def __init__(self, name="rec", pattern="/t"):
        super().__init__(name, None)
        self.got: list[Message] = []
        self.subscribe(pattern, self.got.append)


def run_for(nodes, seconds, clock=None):
    return schedule_run(nodes, clock or SimClock(), lambda b: b.clock.sim_time >= seconds - 1e-12)


def test_periods_fire_on_exact_ticks():
    rec = Recorder()
    run_for([Ticker("a", 0.01), rec], 0.1)
    stamps = [m.stamp for m in rec.got]
    # [DERIVED] 10 ms period over [0, 0.1] gives ticks 0, 10, ..., 100
    assert [round(s / 0.001) for s in stamps] == list(range(0, 101, 10))


def test_non_multiple_period_rejected():
    with pytest.raises(ConfigError):
        run_for([Ticker("a", 0.0015)], 0.01)


def test_two_publishers_ordered_by_stamp_index_seq():
    # [DERIVED] same stamp: registration index decides, then seq
    rec = Recorder()
    a, b = Ticker("a", 0.002, value=1.0), Ticker("b", 0.002, value=2.0)
    run_for([b, a, rec], 0.01)
    keys = [m.sort_key() for m in rec.got]
    assert keys == sorted(keys)
    assert [m.publisher for m in rec.got[:2]] == ["b", "a"]


def test_registration_order_not_name_order_decides_ties():
    rec1, rec2 = Recorder("r1"), Recorder("r2")
    run_for([Ticker("z", 0.001), Ticker("a", 0.001), rec1], 0.005)
    run_for([Ticker("a", 0.001), Ticker("z", 0.001), rec2], 0.005)
    assert [m.publisher for m in rec1.got[:2]] == ["z", "a"]
    assert [m.publisher for m in rec2.got[:2]] == ["a", "z"]


def test_delay_delivers_at_due_tick_and_keeps_stamp():
    class Late(Node):
        def __init__(self):
            super().__init__("late", 0.01)
            self.advertise("/t", {"v": 0})

        def on_tick(self, now):
            self.publish("/t", {"v": now}, delay=0.02)

    rec = Recorder()
    bus = SimBus()
    bus.register(Late())
    bus.register(rec)
    trace = bus.run(lambda b: b.clock.sim_time >= 0.1 - 1e-12)
    timed = trace.timed("/t")
    assert timed
    for t, m in timed:
        assert t == pytest.approx(m.stamp + 0.02, abs=1e-12)


def test_remap_redirects_publication_and_subscription():
    pub = Ticker("a", 0.01)
    pub.remap("/t", "/other")
    rec, rec2 = Recorder(), Recorder("r2", "/other")
    trace = run_for([pub, rec, rec2], 0.03)
    assert not rec.got and len(rec2.got) == 4
    assert trace.topics() == ["/other"]


def test_double_remap_rejected():
    n = Ticker("a", 0.01)
    n.remap("/t", "/x")
    with pytest.raises(ConfigError):
        n.remap("/t", "/y")


def test_wildcard_subscription():
    rec = Recorder(pattern="/sensors/*")
    run_for([Ticker("a", 0.01, "/sensors/gps"), Ticker("b", 0.01, "/sensors/imu"), rec], 0.02)
    assert {m.topic for m in rec.got} == {"/sensors/gps", "/sensors/imu"}


def test_undeclared_topic_and_schema_mismatch_rejected():
    class Bad(Node):
        def __init__(self, payload, topic="/t"):
            super().__init__("bad", 0.01)
            self.advertise("/t", {"v": 0})
            self.payload, self.topic = payload, topic

        def on_tick(self, now):
            self.publish(self.topic, self.payload)

    with pytest.raises(ConfigError):
        run_for([Bad({"v": 0.0}, "/nope")], 0.01)
    with pytest.raises(ConfigError):
        run_for([Bad({"w": 0.0})], 0.01)


def test_schema_conflict_between_publishers_rejected():
    a = Ticker("a", 0.01)
    b = Node("b", 0.01)
    b.advertise("/t", {"v": 2})
    bus = SimBus()
    bus.register(a)
    bus.register(b)
    with pytest.raises(ConfigError):
        bus.start()


def test_callback_exception_becomes_fatal_error():
    class Boom(Node):
        def __init__(self):
            super().__init__("boom", 0.01)

        def on_tick(self, now):
            raise RuntimeError("kaboom")

    errs = Recorder("err", "/errors")
    run_for([Boom(), errs], 0.0)
    assert errs.got and int(errs.got[0].payload["code"]) == ErrorCode.CALLBACK_EXCEPTION
    assert "kaboom" in errs.got[0].meta["description"]


def test_register_after_start_and_duplicate_names_rejected():
    bus = SimBus()
    bus.register(Ticker("a", 0.01))
    with pytest.raises(ConfigError):
        bus.register(Ticker("a", 0.01))
    bus.start()
    with pytest.raises(ConfigError):
        bus.register(Ticker("b", 0.01))


def test_forwarder_output_delivered_same_tick():
    class Fwd(Node):
        def __init__(self):
            super().__init__("fwd")
            self.advertise("/out", {"v": 0})
            self.subscribe("/t", lambda m: self.publish("/out", m.payload, stamp=m.stamp))

    trace = run_for([Ticker("a", 0.01), Fwd()], 0.03)
    ticks_in = [t for t, m in trace if m.topic == "/t"]
    ticks_out = [t for t, m in trace if m.topic == "/out"]
    assert ticks_in == ticks_out


@pytest.mark.parametrize("factor", [1, 2, 3])
def test_speedup_does_not_change_trace(factor):
    ref = run_for([Ticker("a", 0.01), Ticker("b", 0.005)], 0.5).digest()
    got = run_for([Ticker("a", 0.01), Ticker("b", 0.005)], 0.5, SimClock(speedup_factor=factor)).digest()
    assert got == ref


def test_speedup_below_one_rejected():
    with pytest.raises(ConfigError):
        SimClock(speedup_factor=0.5)


def test_wall_clock_scaled_paces_the_loop():
    clock = SimClock(speedup_factor=2.0, pacing_mode=Pacing.WALL_CLOCK_SCALED)
    bus = SimBus(clock)
    bus.register(Ticker("a", 0.01))
    bus.run(lambda b: b.clock.sim_time >= 0.4 - 1e-12)
    assert bus.wall_time == pytest.approx(0.2, abs=0.05)


def test_max_time_stops_the_loop():
    bus = SimBus()
    bus.register(Ticker("a", 0.01))
    bus.run(lambda b: False, max_time=0.05)
    assert bus.clock.sim_time == pytest.approx(0.05)


def test_flatten_round_trip_and_schema():
    payload = {"pose": {"position": (1.0, 2.0), "yaw": 0.5}, "lap": 1.0}
    flat = flatten(payload)
    assert flat == {"pose.position": (1.0, 2.0), "pose.yaw": 0.5, "lap": 1.0}
    assert unflatten(flat) == payload
    schema = schema_of(payload)
    assert schema == {"pose.position": 2, "pose.yaw": 0, "lap": 0}
    assert has_path(schema, "pose") and has_path(schema, "pose.yaw") and not has_path(schema, "po")


def test_set_param_paths():
    params = {"a": {"b": 1}, "c": 2}
    set_param(params, "a/b", 5)
    set_param(params, "c", 3)
    assert params == {"a": {"b": 5}, "c": 3}
    with pytest.raises(ConfigError):
        set_param(params, "a/x", 1)


def test_trace_digest_is_content_sensitive():
    t1, t2 = RunTrace(), RunTrace()
    for t, v in [(t1, 1.0), (t2, 1.0 + 1e-15)]:
        t.entries.append((0, Message("/t", 0.0, 0, {"v": v}, "a")))
    assert t1.digest() != t2.digest()
    assert t1.to_bytes().count(b"\n") == 0
