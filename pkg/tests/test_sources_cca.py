import pytest

from rtqm.cca import AckSample, CubicCca, make_cca
from rtqm.engine import MTU, ConfigurationError
from rtqm.metrics import build_report
from rtqm.runner import run_scenario
from rtqm.sources import frame_packet_sizes
from rtqm.workload import HopConfig, Scenario


def ack(now=1000, rtt=40_000, acked=MTU):
    return AckSample(now=now, rtt_us=rtt, acked_bytes=acked, send_time=now - rtt,
                     recv_time=now - rtt // 2, delivery_rate=1e7, inflight=10 * MTU)


@pytest.mark.parametrize("name", ["FLUID", "CUBIC_LIKE", "COPA_LIKE", "GCC_LIKE", "BBR_LIKE", "copa_like"])
def test_make_cca_known_names(name):
    cca = make_cca(name)
    cca.on_start(0)
    cca.on_ack(ack())
    assert cca.target_rate() > 0


def test_make_cca_rejects_unknown_and_bad_params():
    with pytest.raises(ConfigurationError):
        make_cca("RENO")
    with pytest.raises(ConfigurationError):
        make_cca("COPA_LIKE", beta=0.5)
    with pytest.raises(ConfigurationError):
        make_cca("FLUID", k=0)


def test_cubic_multiplicative_decrease():
    c = CubicCca()
    c.cwnd = 100.0 * MTU
    c.on_loss(0)
    assert c.cwnd == pytest.approx(70.0 * MTU)
    assert c.ssthresh == c.cwnd
    c.on_timeout(1)
    assert c.cwnd == MTU


def test_frame_packet_sizes():
    assert frame_packet_sizes(1e6, 30) == [MTU] * 2 + [4166 - 2 * MTU]
    assert sum(frame_packet_sizes(12e6, 30)) == 50_000
    # below the floor a single small packet still goes out
    assert frame_packet_sizes(1e3, 30) == [625]


def _solo(kind, **src):
    base = {"type": kind, "id": "x", "cca": "CUBIC_LIKE", "cca_params": {}, "start_ms": 0.0}
    base.update(src)
    return Scenario(duration_ms=5_000.0, scheduler="fifo", hops=[HopConfig(capacity_mbps=25.0, managed=True)],
                    sources=[base])


def test_finite_transfer_completes_and_reports_fct():
    res = run_scenario(_solo("bulk", size=300_000))
    s = res.bulk["x"]
    assert s.completion_time is not None
    rep = build_report(res)
    # 300 kB at 25 Mbps takes 96 ms of serialization plus slow start round trips
    assert 96 < rep.fct_ms["x"] < 1000


@pytest.mark.parametrize("cca", ["COPA_LIKE", "GCC_LIKE"])
def test_video_alone_on_idle_link_never_stalls(cca):
    rep = build_report(run_scenario(_solo("video", cca=cca, fps=30)))
    assert rep.stall_ms["x"] == 0
    assert 0 < rep.max_frame_delay_ms["x"] < 190
    assert rep.throughput_bps["x"] > 150_000


def test_bbr_video_delay_spike_is_confined_to_startup():
    res = run_scenario(_solo("video", cca="BBR_LIKE", fps=30))
    delays = res.videos["x"].frame_delays(res.duration_us)
    late = [d for t, d in delays if d >= 190]
    assert all(t < 1000 for t, d in delays if d >= 190)
    assert late, "startup overshoot is expected to push a few frames past 190 ms"
    assert max(d for t, d in delays if t >= 1000) < 100
