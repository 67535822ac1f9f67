from fractions import Fraction

import pytest

from rtqm.engine import REALTIME, WEB, ConfigurationError, Packet
from rtqm.qdisc import SCHEDULERS, ConfuciusConfig, ConfuciusScheduler, make_scheduler
from rtqm.qdisc.confucius import (
    NEW, Q1, Q2, Q3, WEIGHT_ONE, FlowRecord, compute_flow_weight, initial_weight_q128,
    intra_queue_examination, nearest_queue, quantized_reweight, queue_level_examination,
)


def pkt(flow, seq, size=1500, label=None):
    return Packet(flow, size, 0, seq, app_class=label)


def drain(s, now=0):
    out = []
    while True:
        p = s.dequeue(now)
        if p is None:
            return out
        out.append(p)


@pytest.mark.parametrize("kind", SCHEDULERS)
def test_every_scheduler_conserves_packets(kind):
    s = make_scheduler(kind, 30_000)
    dropped = []
    for i in range(40):
        dropped += s.enqueue(pkt(i % 3, i, label=REALTIME if i % 2 else WEB), i * 10)
    got = drain(s, 1000)
    assert len(got) + len(dropped) == 40
    assert s.backlog_bytes == 0 and s.backlog_packets == 0


def test_unknown_scheduler_and_config_rejected():
    with pytest.raises(ConfigurationError):
        make_scheduler("wfq")
    with pytest.raises(ConfigurationError):
        make_scheduler("confucius", config={"bogus": 1})


def test_fifo_order_and_tail_drop():
    s = make_scheduler("fifo", 3000)
    assert s.enqueue(pkt("a", 1), 0) == []
    assert s.enqueue(pkt("b", 2), 0) == []
    dropped = s.enqueue(pkt("a", 3), 0)
    assert [p.seq for p in dropped] == [3]
    assert [p.seq for p in drain(s)] == [1, 2]


def test_fq_alternates_between_backlogged_flows():
    s = make_scheduler("fq")
    for i in range(4):
        s.enqueue(pkt("a", i), 0)
    for i in range(4, 8):
        s.enqueue(pkt("b", i), 0)
    assert [p.flow_id for p in drain(s)] == ["a", "b"] * 4


def test_strict_priority_serves_realtime_first():
    s = make_scheduler("strict")
    s.enqueue(pkt("w", 1, label=WEB), 0)
    s.enqueue(pkt("r", 2, label=REALTIME), 0)
    assert [p.seq for p in drain(s)] == [2, 1]


def test_cbq_1_5_ratio():
    s = make_scheduler("cbq_1_5")
    for i in range(60):
        s.enqueue(pkt("r", i, label=REALTIME), 0)
        s.enqueue(pkt("w", 100 + i, label=WEB), 0)
    first = [p.app_class for p in (s.dequeue(0) for _ in range(36))]
    assert first.count(REALTIME) == 6


def test_initial_weight_quantization():
    assert initial_weight_q128(Fraction(1, 3)) == 43
    assert initial_weight_q128(Fraction(1, 1000)) == 1
    assert initial_weight_q128(Fraction(5, 1)) == WEIGHT_ONE
    assert initial_weight_q128(Fraction(1, 256)) == 1  # 0.5 rounds up


def test_continuous_weight_doubles_each_interval():
    assert compute_flow_weight(0, Fraction(1, 8), 0.004) == 0.125
    assert compute_flow_weight(250, Fraction(1, 8), 0.004) == pytest.approx(0.25)
    assert compute_flow_weight(10_000, Fraction(1, 8), 0.004) == 1.0
    with pytest.raises(ValueError):
        compute_flow_weight(-1, 1, 0.004)


def test_quantized_reweight_needs_a_full_interval():
    r = FlowRecord("f", 0)
    r.weight_q128 = 16
    quantized_reweight(r, 249.0)
    assert r.weight_q128 == 16
    quantized_reweight(r, 250.0)
    assert r.weight_q128 == 32


def test_nearest_queue_ties_go_low():
    t = (0.1, 0.5, 0.9)
    assert nearest_queue(0.0, t) == Q1
    assert nearest_queue(0.3, t) == Q1
    assert nearest_queue(0.31, t) == Q2
    assert nearest_queue(0.7, t) == Q2
    assert nearest_queue(1.0, t) == Q3


def test_intra_queue_hysteresis():
    shares = {"a": 0.6, "b": 0.3, "c": 0.1}
    moves = dict(intra_queue_examination(shares, 0.1))
    assert moves == {"a": +1, "c": -1}
    assert intra_queue_examination({"solo": 1.0}, 0.1) == []


def test_queue_level_persistence():
    streaks = {}
    t = (0.1, 0.5, 0.9)
    assert queue_level_examination([0.4, None, None], t, streaks, 2) == []
    assert queue_level_examination([0.4, None, None], t, streaks, 2) == [(1, 2)]
    assert queue_level_examination([0.2, None, None], t, {}, 1) == []


def test_config_lambda_sets_doubling_interval():
    assert ConfuciusConfig().doubling_ms == 250.0
    assert ConfuciusConfig(lambda_per_ms=10).doubling_ms == pytest.approx(0.1)
    assert ConfuciusConfig(reweight_period_ms=100.0).doubling_ms == 100.0
    for bad in ({"lambda_per_ms": 0}, {"alpha": 0.6}, {"occupancy_targets": (0.5, 0.4, 0.9)},
                {"persistence": 0}):
        with pytest.raises(ConfigurationError):
            ConfuciusConfig(**bad)


def test_lone_flow_graduates_at_once():
    s = ConfuciusScheduler(100_000)
    s.enqueue(pkt("a", 1), 0)
    assert s.queue_of("a") == NEW
    s.dequeue(1)
    assert s.queue_of("a") == Q1
    assert s.moves[0][4] == "graduate"


def test_new_flows_start_small_and_graduate_after_doublings():
    s = ConfuciusScheduler(1_000_000)
    # arriving alone, each of these graduates as soon as its batch closes
    for i in range(3):
        s.enqueue(pkt(f"old{i}", i), i)
    s.advance(3)
    assert [s.queue_of(f"old{i}") for i in range(3)] == [Q1] * 3
    # a batch of four against three established flows starts at 3/4
    for i in range(4):
        s.enqueue(pkt(f"new{i}", 10 + i), 1000)
    s.advance(1000)
    w = [s.flows[f"new{i}"].weight_q128 for i in range(4)]
    assert w == [96] * 4
    s.advance(1000 + 249_999)
    assert all(s.queue_of(f"new{i}") == NEW for i in range(4))
    s.advance(1000 + 250_000)
    assert all(s.queue_of(f"new{i}") != NEW for i in range(4))
    s.check_invariants()


def test_confucius_ignores_labels():
    def order(label):
        s = ConfuciusScheduler(50_000)
        for i in range(30):
            s.enqueue(pkt(i % 4, i, label=label if i % 2 else None), i * 100)
        return [(p.flow_id, p.seq) for p in drain(s, 5000)]
    assert order(REALTIME) == order(None) == order(WEB)


def test_overflow_drops_from_longest_queue():
    s = ConfuciusScheduler(6000)
    s.enqueue(pkt("small", 0), 0)
    for i in range(1, 6):
        dropped = s.enqueue(pkt("big", i), 0)
    assert all(p.flow_id == "big" for p in dropped)
    assert s.flows["small"].queued_bytes == 1500
    s.check_invariants()
