import pytest
from hypothesis import given, strategies as st

from rtqm.engine import (
    CapacityProfile, ConfigurationError, Link, Packet, Simulation, TimeTravelError,
    default_buffer_limit, serialization_us,
)
from rtqm.qdisc import make_scheduler


def test_events_fire_in_time_then_insertion_order():
    sim = Simulation()
    seen = []
    sim.schedule(20, seen.append, "late")
    sim.schedule(10, seen.append, "a")
    sim.schedule(10, seen.append, "b")
    sim.run_until(100)
    assert seen == ["a", "b", "late"]
    assert sim.now == 100


def test_cancelled_event_does_not_fire():
    sim = Simulation()
    seen = []
    h = sim.schedule(5, seen.append, 1)
    h.cancel()
    sim.run_until(10)
    assert seen == [] and not h.fired and sim.pending() == 0


def test_scheduling_in_the_past_raises():
    sim = Simulation()
    sim.run_until(50)
    with pytest.raises(TimeTravelError):
        sim.schedule(49, print)


def test_run_until_leaves_future_events():
    sim = Simulation()
    sim.schedule(200, print)
    sim.run_until(100)
    assert sim.pending() == 1 and sim.now == 100


@given(st.lists(st.tuples(st.integers(0, 1000), st.integers()), max_size=60))
def test_event_order_is_stable_sort_of_times(events):
    sim = Simulation()
    fired = []
    for i, (t, _) in enumerate(events):
        sim.schedule(t, fired.append, i)
    sim.run_until(2000)
    expected = [i for i, _ in sorted(enumerate(events), key=lambda x: (x[1][0], x[0]))]
    assert fired == expected


def test_capacity_profile_lookup_and_validation():
    p = CapacityProfile([(0, 10_000_000), (1_000_000, 5_000_000)])
    assert p.at(0) == 10_000_000
    assert p.at(999_999) == 10_000_000
    assert p.at(1_000_000) == 5_000_000
    assert p.peak == 10_000_000
    for bad in ([], [(5, 1)], [(0, 1), (0, 2)], [(0, 0)]):
        with pytest.raises(ConfigurationError):
            CapacityProfile(bad)


def test_serialization_rounds_up():
    assert serialization_us(1500, 25_000_000) == 480
    assert serialization_us(1, 3) == 2_666_667


def test_default_buffer_is_two_bdp_at_peak():
    assert default_buffer_limit(CapacityProfile.constant(25e6)) == 250_000
    assert default_buffer_limit(CapacityProfile([(0, 10e6), (1000, 50e6)])) == 500_000


def test_link_serializes_back_to_back_and_adds_propagation():
    sim = Simulation()
    out = []
    link = Link(sim, CapacityProfile.constant(12e6), make_scheduler("fifo", 10_000), 20.0,
                deliver=lambda p, t: out.append((p.seq, t)))
    for i in range(3):
        link.receive(Packet("f", 1500, 0, i))
    sim.run_until(100_000)
    assert out == [(0, 1000 + 20_000), (1, 2000 + 20_000), (2, 3000 + 20_000)]
    assert link.stats.transmitted == 3 and link.stats.busy_us == 3000


def test_link_counts_tail_drops():
    sim = Simulation()
    link = Link(sim, CapacityProfile.constant(1e6), make_scheduler("fifo", 3000), 1.0)
    for i in range(5):
        link.receive(Packet("f", 1500, 0, i))
    # one packet is on the wire, two fit the buffer
    assert link.stats.dropped == 2
    assert link.stats.drops_by_flow == {"f": 2}
