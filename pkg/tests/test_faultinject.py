from __future__ import annotations

import numpy as np
import pytest
import yaml

from racesim.errors import ConfigError
from racesim.faultinject import FaultSpec, apply_faults, armed_state, install_proxy, parse_topic_entry
from racesim.plant import NoiseStreams
from racesim.simbus import Message, Node, SimBus

LISTING = """
localization: # stack module
  - name: /loc/odom # topic
    # [ms] (-1 to stop publication)
    delay: 20
    # fault definition per message (sub)field
    field_faults:
      pose:
        position: {fault_mult: 100}
        covariance: {
          fault_mult: 2,
          fault_repeat: {
            count: 100,
            value: 1000
          }
        }
      twist:
        covariance: {fault_mult: 0}
"""

ODOM = {"pose.position": 2, "pose.covariance": 2, "twist.linear": 2, "twist.covariance": 2}


def odom(k: int) -> dict:
    return {"pose": {"position": (1.0 + k, 2.0 - k), "covariance": (0.01 * (k + 1), 0.02)},
            "twist": {"linear": (float(k), 0.5), "covariance": (0.3, 0.4)}}


class Source(Node):
    def __init__(self, n: int = 200, topic: str = "/loc/odom"):
        super().__init__("source", 0.01)
        self.n, self.k, self.topic = n, 0, topic
        self.advertise(topic, ODOM)

    def on_tick(self, now):
        if self.k < self.n:
            self.publish(self.topic, odom(self.k))
            self.k += 1


class Sink(Node):
    def __init__(self, topic="/loc/odom"):
        super().__init__("sink")
        self.got: list[tuple[int, Message]] = []
        self.subscribe(topic, lambda m: self.got.append((self.bus.clock.tick, m)))


def run_stream(spec: FaultSpec | None, n=200, seconds=2.5, commands=None):
    bus = SimBus()
    src = bus.register(Source(n))
    sink = Sink()
    bus.register(sink)
    if commands is not None:
        bus.register(commands)
    install_proxy(bus, spec, ["/loc/odom"] if spec is None or not spec.topics else (), seed=3)
    bus.run(lambda b: b.clock.sim_time >= seconds - 1e-12)
    return src, sink


def test_listing_semantics_on_scripted_stream():
    src, sink = run_stream(FaultSpec(yaml.safe_load(LISTING)))
    assert len(sink.got) == 200
    for k, (tick, msg) in enumerate(sink.got):
        ref = odom(k)
        p = msg.payload
        # [PAPER] position x100, twist covariance x0
        assert p["pose"]["position"] == tuple(100 * v for v in ref["pose"]["position"])
        assert p["twist"]["covariance"] == (0.0, 0.0)
        assert p["twist"]["linear"] == ref["twist"]["linear"]
        # [PAPER] repeat {count 100, value 1000}, then the documented mult applies
        if k < 100:
            assert p["pose"]["covariance"] == (2000.0, 2000.0)
        else:
            assert p["pose"]["covariance"] == tuple(2 * v for v in ref["pose"]["covariance"])
        # [PAPER] delivery shifted exactly 20 ms, stamp untouched
        assert msg.stamp == pytest.approx(k * 0.01, abs=1e-12)
        assert tick == k * 10 + 20


def test_delay_minus_one_drops_everything():
    spec = FaultSpec({"loc": [{"name": "/loc/odom", "delay": -1}]})
    _, sink = run_stream(spec)
    assert sink.got == []


def test_unconfigured_topic_is_bit_exact_and_same_tick():
    _, sink = run_stream(None, n=50)
    assert [m.payload for _, m in sink.got] == [odom(k) for k in range(50)]
    assert [t for t, _ in sink.got] == [k * 10 for k in range(50)]


def test_gaussian_fault_statistics():
    # [DERIVED] 10^5 draws: mean and variance within 5%
    tf = parse_topic_entry({"name": "/x", "field_faults": {"v": {"fault_gauss": {"mean": 0.7, "variance": 0.09}}}})
    rng = NoiseStreams(5)
    vals = np.array([apply_faults({"v": 0.0}, tf, {}, rng)["v"] for _ in range(100_000)])
    assert vals.mean() == pytest.approx(0.7, rel=0.05)
    assert vals.var() == pytest.approx(0.09, rel=0.05)


def test_fixed_order_mult_then_offset():
    tf = parse_topic_entry({"name": "/x", "field_faults": {"v": {"fault_mult": 3, "fault_offset": 2}}})
    assert apply_faults({"v": 5.0}, tf, {}, None)["v"] == 17.0


def test_repeat_without_value_holds_first_sample():
    tf = parse_topic_entry({"name": "/x", "field_faults": {"v": {"fault_repeat": {"count": 3}}}})
    state = armed_state(tf)
    out = [apply_faults({"v": float(k)}, tf, state, None)["v"] for k in range(6)]
    assert out == [0.0, 0.0, 0.0, 3.0, 4.0, 5.0]


def test_repeat_holds_whole_vector():
    tf = parse_topic_entry({"name": "/x", "field_faults": {"p": {"fault_repeat": {"count": 2}}}})
    state = armed_state(tf)
    out = [apply_faults({"p": (k, -k)}, tf, state, None)["p"] for k in range(3)]
    assert out == [(0, 0), (0, 0), (2, -2)]


def test_subtree_addressing_applies_to_all_leaves():
    tf = parse_topic_entry({"name": "/x", "field_faults": {"pose": {"fault_offset": 1}}})
    out = apply_faults({"pose": {"a": 1.0, "b": (2.0, 3.0)}, "c": 0.0}, tf, {}, None)
    assert out == {"pose": {"a": 2.0, "b": (3.0, 4.0)}, "c": 0.0}


def test_fifo_with_growing_then_shrinking_delay():
    class Cmd(Node):
        def __init__(self):
            super().__init__("cmd", 0.01)
            self.advertise("/scenario/commands", {"group": 0})

        def on_tick(self, now):
            if abs(now - 0.5) < 1e-9:
                patch = {"faults": {"m": [{"name": "/loc/odom", "delay": 0}]}}
                self.publish("/scenario/commands", {"group": 0.0}, meta={"parameters": [patch]})

    spec = FaultSpec({"m": [{"name": "/loc/odom", "delay": 100}]})
    _, sink = run_stream(spec, n=100, seconds=1.5, commands=Cmd())
    seqs = [m.seq for _, m in sink.got]
    assert seqs == sorted(seqs) and len(seqs) == 100


def test_runtime_patch_restarts_repeat_and_merges():
    spec = FaultSpec({"m": [{"name": "/x", "field_faults": {"v": {"fault_mult": 2}}}]})
    restarted = spec.merge({"m": [{"name": "/x", "field_faults": {"v": {"fault_repeat": {"count": 5}}}}]})
    assert restarted == [("/x", "v")]
    ff = spec.topics["/x"].fields["v"]
    assert ff.mult == 2 and ff.repeat_count == 5


@pytest.mark.parametrize("entry", [
    {"delay": 5},
    {"name": "/x", "delay": -2},
    {"name": "/x", "field_faults": {"v": {"fault_repeat": {"count": 0}}}},
    {"name": "/x", "field_faults": {"v": {"fault_repeat": 3}}},
    {"name": "/x", "field_faults": {"v": {"fault_gauss": {"variance": -1}}}},
    {"name": "/x", "field_faults": {"fault_mult": 2}},
])
def test_invalid_entries_rejected(entry):
    with pytest.raises(ConfigError):
        parse_topic_entry(entry)


def test_unknown_field_or_topic_rejected_at_install():
    bus = SimBus()
    bus.register(Source())
    with pytest.raises(ConfigError):
        install_proxy(bus, FaultSpec({"m": [{"name": "/loc/odom", "field_faults": {"pose": {"nope": {"fault_mult": 1}}}}]}))
    bus = SimBus()
    bus.register(Source())
    with pytest.raises(ConfigError):
        install_proxy(bus, FaultSpec({"m": [{"name": "/not/there", "delay": 5}]}))


def test_fault_file_load(tmp_path):
    p = tmp_path / "faults.yaml"
    p.write_text(LISTING)
    spec = FaultSpec.load(p)
    assert spec.topics["/loc/odom"].delay_ms == 20
    (tmp_path / "bad.yaml").write_text("a: [")
    with pytest.raises(ConfigError):
        FaultSpec.load(tmp_path / "bad.yaml")
