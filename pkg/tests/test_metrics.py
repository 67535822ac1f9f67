import json

import pytest
from hypothesis import given, strategies as st

from rtqm.metrics import (
    FrameDelaySeries, RunReport, atomic_write, delay_quantiles, jfi, max_frame_delay,
    service_rate_series, stall_duration,
)

FRAME = 1000 / 30


def series(delays, fps=30):
    return FrameDelaySeries([(round(i * 1000 / fps, 3), d) for i, d in enumerate(delays)], fps)


def test_thirty_frames_over_threshold_stall_one_second():
    assert stall_duration(series([400.0] * 30)) == pytest.approx(1000.0, abs=0.01)


def test_no_stall_below_threshold():
    assert stall_duration(series([50.0, 189.9, 190.0])) == 0.0


def test_isolated_late_frame_stalls_one_interval():
    assert stall_duration(series([10, 10, 500, 10])) == pytest.approx(FRAME, abs=0.01)


def test_frame_spacing_is_validated():
    with pytest.raises(ValueError):
        FrameDelaySeries([(0.0, 1.0), (50.0, 1.0)], 30)
    with pytest.raises(ValueError):
        stall_duration(FrameDelaySeries([], 30))


def test_max_frame_delay():
    assert max_frame_delay(series([3, 9, 4])) == 9


def test_jfi_values():
    assert jfi([2, 1, 1]) == pytest.approx(16 / 18)
    assert jfi([5, 5, 5, 5]) == pytest.approx(1.0)
    assert jfi([1, 0, 0, 0]) == pytest.approx(0.25)
    for bad in ([], [0, 0], [-1, 2]):
        with pytest.raises(ValueError):
            jfi(bad)


@given(st.lists(st.floats(0, 1e9), min_size=1, max_size=40).filter(lambda x: any(v > 0 for v in x)))
def test_jfi_bounds(xs):
    v = jfi(xs)
    assert 1 / len(xs) - 1e-9 <= v <= 1 + 1e-9


@given(st.lists(st.floats(0, 2000), min_size=1, max_size=120), st.floats(0, 1000), st.floats(0, 1000))
def test_stall_is_bounded_and_monotone_in_threshold(delays, a, b):
    s = series(delays)
    lo, hi = sorted((a, b))
    assert 0 <= stall_duration(s, hi) <= stall_duration(s, lo) <= len(delays) * FRAME + 0.01


def test_service_rate_series_constant_stream():
    log = [(i * 1000, 1250) for i in range(1, 1001)]  # 1250 B every ms = 10 Mbit/s
    t, r = service_rate_series(log, 100.0, 1000.0)
    assert len(t) == 10
    assert r[1:] == pytest.approx([10e6] * 9)
    with pytest.raises(ValueError):
        service_rate_series(log, 0)


def test_delay_quantiles():
    q = delay_quantiles([1000, 2000, 3000, 4000])
    assert q["max"] == 4.0 and q["mean"] == 2.5 and q["p50"] == 2.5
    assert delay_quantiles([]) == {}


def test_report_json_is_sorted_and_has_totals():
    rep = RunReport("s", "fifo", 1, 1000.0, stall_ms={"b": 2.0, "a": 1.0}, plt_ms={"0": 10.0})
    d = json.loads(rep.to_json())
    assert d["total_stall_ms"] == 3.0 and d["mean_plt_ms"] == 10.0
    assert list(d) == sorted(d)


def test_atomic_write_replaces(tmp_path):
    p = tmp_path / "x" / "f.txt"
    atomic_write(p, "one")
    atomic_write(p, "two")
    assert p.read_text() == "two"
    assert [f.name for f in p.parent.iterdir()] == ["f.txt"]
