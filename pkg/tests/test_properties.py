"""Structural scheduler invariants driven by hypothesis."""
from hypothesis import given, settings, strategies as st

from rtqm.engine import MTU
from rtqm.properties import prop_dwrr, prop_intra_dead_zone, prop_queue_dead_zone, prop_scheduler
from rtqm.qdisc.confucius import NEW, WEIGHT_ONE

dt = st.one_of(st.just(0), st.integers(1, 400), st.integers(400, 4000))
op = st.one_of(
    st.tuples(st.just("enq"), st.integers(0, 5), st.integers(40, MTU), dt),
    st.tuples(st.just("deq"), dt),
)


@settings(max_examples=1000)
@given(st.lists(op, min_size=1, max_size=150))
def test_scheduler_order_conservation_and_weights(ops):
    prop_scheduler(ops)


@settings(max_examples=1000)
@given(
    st.lists(st.floats(0.001, 1.0), min_size=2, max_size=8),
    st.floats(0.01, 0.45),
)
def test_intra_queue_dead_zone(raw, alpha):
    total = sum(raw)
    prop_intra_dead_zone([x / total for x in raw], alpha)


level = st.one_of(st.none(), st.floats(0.0, 1.0))


@settings(max_examples=1000)
@given(st.lists(st.lists(level, min_size=3, max_size=3), min_size=1, max_size=12), st.integers(1, 3))
def test_queue_level_dead_zone_and_persistence(levels, persistence):
    prop_queue_dead_zone(levels, persistence)


@st.composite
def dwrr_cases(draw):
    members = [(0, draw(st.integers(1, WEIGHT_ONE)))]
    for q in range(4):
        for _ in range(draw(st.integers(0, 3))):
            members.append((q, draw(st.integers(1, WEIGHT_ONE)) if q == NEW else WEIGHT_ONE))
    if len({q for q, _ in members}) < 2:
        members.append((3, WEIGHT_ONE))
    sizes = draw(st.lists(st.integers(40, MTU), min_size=1, max_size=64))
    return members, sizes, draw(st.integers(1, 600))


@settings(max_examples=1000)
@given(dwrr_cases())
def test_dwrr_service_tracks_queue_weights(case):
    prop_dwrr(*case)
