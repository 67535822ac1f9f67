"""Traffic sources: a reliable packet sender plus video, web and bulk drivers."""
from __future__ import annotations

from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .cca import AckSample, CongestionControl, CubicCca
from .engine import MTU, REALTIME, US_PER_MS, US_PER_S, WEB, ConfigurationError, Packet, Simulation

MIN_RTO_US = 200 * US_PER_MS
MAX_RTO_US = 60 * US_PER_S
INITIAL_RTO_US = 1 * US_PER_S
DEFAULT_B0 = 10 * MTU


class Sender:
    """Reliable, ordered-delivery sender for one flow.

    Payload is cut into numbered parts.  Each transmission gets a fresh
    sequence number; a retransmitted part keeps its part id so the receiver
    can discard duplicates.  Because every scheduler in this package keeps a
    flow's packets in order, an acknowledgement for ``seq`` proves every
    outstanding packet with a smaller sequence number was dropped.

    ``size=None`` means an unbounded bulk transfer.  With ``app_driven`` the
    sender ignores the controller's window and pacing, spacing packets only
    at ``app_pacing_bps`` when the application sets it, and never times out
    (lost parts are resent when a later acknowledgement exposes the gap).
    """

    def __init__(self, sim: Simulation, flow_id, cca: CongestionControl, send: Callable,
                 ack_delay_us: int, app_class: Optional[str] = None,
                 size: Optional[int] = None, start_us: int = 0, stop_us: Optional[int] = None,
                 app_driven: bool = False, mss: int = MTU):
        self.sim = sim
        self.flow_id = flow_id
        self.cca = cca
        self.send = send
        self.ack_delay_us = ack_delay_us
        self.app_class = app_class
        self.size = size
        self.start_us = start_us
        self.stop_us = stop_us
        self.app_driven = app_driven
        self.mss = mss

        self._next_seq = 0
        self._next_part = 0
        self._n_parts = None if size is None else max(1, -(-size // mss))
        self._app: deque = deque()
        self._retx: deque = deque()
        self.outstanding: OrderedDict = OrderedDict()
        self.inflight = 0
        self.delivered = 0
        self.delivered_time = 0
        self._recover = -1
        self._next_send = 0
        self.app_pacing_bps: Optional[float] = None
        self._pace_event = None
        self._rto_event = None
        self._last_progress = 0
        self.srtt: Optional[float] = None
        self.rttvar = 0.0
        self.rto = INITIAL_RTO_US
        self.stopped = False

        # receiver side
        self.parts_received: set = set()
        self.bytes_received = 0
        self.packets_received = 0
        self.completion_time: Optional[int] = None
        self.delivery_log: list = []
        self.on_part: Optional[Callable] = None

        self.packets_sent = 0
        self.retransmissions = 0
        self.losses = 0
        self.loss_events = 0
        self.timeouts = 0
        self.rtt_samples = 0
        self.queue_delay_sum = 0.0
        # per-second [sum_us, count] of queueing delay seen by acknowledgements
        self.qdelay_bins: dict = {}

        sim.schedule(start_us, self._start)

    # payload ---------------------------------------------------------------

    def part_size(self, part: int) -> int:
        if self.size is None or part < self._n_parts - 1:
            return self.mss
        return self.size - self.mss * (self._n_parts - 1)

    def push(self, parts: Sequence[tuple]) -> list:
        """Queue application parts ``(part_id, size, frame_id)``; returns packets sent now."""
        self._app.extend(parts)
        return self._pump()

    def _peek(self):
        if self._retx:
            return self._retx[0]
        if self.app_driven:
            return self._app[0] if self._app else None
        if self.stopped:
            return None
        if self._n_parts is None or self._next_part < self._n_parts:
            p = self._next_part
            return (p, self.part_size(p), None)
        return None

    def _take(self):
        if self._retx:
            return self._retx.popleft()
        if self.app_driven:
            return self._app.popleft()
        p = self._next_part
        self._next_part += 1
        return (p, self.part_size(p), None)

    @property
    def done_sending(self) -> bool:
        return self._peek() is None and not self.outstanding

    # transmission ------------------------------------------------------------

    def _start(self) -> None:
        self._last_progress = self.sim.now
        self._next_send = self.sim.now
        self.cca.on_start(self.sim.now)
        if self.stop_us is not None:
            self.sim.schedule(max(self.stop_us, self.sim.now), self._stop)
        self._pump()

    def _stop(self) -> None:
        self.stopped = True

    def _pump(self) -> list:
        sent = []
        now = self.sim.now
        cca = self.cca
        while True:
            item = self._peek()
            if item is None:
                break
            if self.app_driven:
                rate = self.app_pacing_bps
            else:
                rate = cca.pacing_rate
                if cca.cwnd is not None and self.inflight > 0 and self.inflight + item[1] > cca.cwnd:
                    break
            if rate is not None and now < self._next_send:
                if self._pace_event is None:
                    self._pace_event = self.sim.schedule(self._next_send, self._pace_fire)
                break
            item = self._take()
            sent.append(self._transmit(*item))
            if rate:
                self._next_send = max(now, self._next_send) + int(item[1] * 8 * US_PER_S / rate)
        return sent

    def _pace_fire(self) -> None:
        self._pace_event = None
        self._pump()

    def _transmit(self, part: int, size: int, frame_id) -> Packet:
        now = self.sim.now
        seq = self._next_seq
        self._next_seq += 1
        pkt = Packet(self.flow_id, size, now, seq, frame_id, self.app_class, part)
        pkt.sender = self
        if not self.outstanding:
            self.delivered_time = now
            self._last_progress = now
        pkt.delivered_snapshot = self.delivered
        pkt.delivered_time_snapshot = self.delivered_time
        # a video encoder tracks the controller, so its samples are not app limited
        app_limited = not self.app_driven and self._peek() is None
        self.outstanding[seq] = (part, size, now, frame_id, self.delivered, self.delivered_time, app_limited)
        self.inflight += size
        self.packets_sent += 1
        if not self.app_driven and self._rto_event is None:
            self._rto_event = self.sim.schedule(self._last_progress + self.rto, self._rto_fire)
        self.send(pkt)
        return pkt

    # receiver ----------------------------------------------------------------

    def arrive(self, pkt: Packet) -> None:
        """Packet reaches the receiver at the current simulation time."""
        now = self.sim.now
        self.packets_received += 1
        if pkt.part not in self.parts_received:
            self.parts_received.add(pkt.part)
            self.bytes_received += pkt.size
            self.delivery_log.append((now, pkt.size))
            if self.on_part is not None:
                self.on_part(pkt, now)
            if self.size is not None and self.completion_time is None and self.bytes_received >= self.size:
                self.completion_time = now
        self.sim.schedule(now + self.ack_delay_us, self._on_ack, pkt.seq, now)

    # acknowledgements ------------------------------------------------------------

    def _on_ack(self, seq: int, recv_time: int) -> None:
        out = self.outstanding
        if seq not in out:
            return
        now = self.sim.now
        lost = []
        while True:
            first = next(iter(out))
            if first >= seq:
                break
            lost.append((first, out.pop(first)))
        part, size, sent_at, frame_id, dl_snap, dlt_snap, app_limited = out.pop(seq)
        self.inflight -= size
        self.delivered += size
        self.delivered_time = now
        self._last_progress = now
        rtt = now - sent_at
        self._update_rto(rtt)
        self.rtt_samples += 1
        interval = now - dlt_snap
        rate = (self.delivered - dl_snap) * 8 * US_PER_S / interval if interval > 0 else 0.0
        if lost:
            self._declare_lost(lost, now)
        self.cca.on_ack(AckSample(now, rtt, size, sent_at, recv_time, rate, self.inflight,
                                  app_limited, self.delivered, dl_snap))
        if self.cca.min_rtt_us is not None:
            qd = rtt - self.cca.min_rtt_us
            self.queue_delay_sum += qd
            b = self.qdelay_bins.setdefault(now // US_PER_S, [0, 0])
            b[0] += qd
            b[1] += 1
        self._pump()

    def _declare_lost(self, lost: list, now: int) -> None:
        for seq, (part, size, _, frame_id, *_rest) in lost:
            self.inflight -= size
            self.losses += 1
            self._retx.append((part, size, frame_id))
            self.retransmissions += 1
        self.cca.on_packets_lost(len(lost), now)
        if lost[0][0] > self._recover:
            self.loss_events += 1
            self._recover = self._next_seq - 1
            self.cca.on_loss(now)

    def _update_rto(self, rtt: int) -> None:
        if self.srtt is None:
            self.srtt = float(rtt)
            self.rttvar = rtt / 2
        else:
            self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - rtt)
            self.srtt = 0.875 * self.srtt + 0.125 * rtt
        self.rto = int(min(max(self.srtt + max(1000, 4 * self.rttvar), MIN_RTO_US), MAX_RTO_US))

    def _rto_fire(self) -> None:
        self._rto_event = None
        if not self.outstanding:
            return
        now = self.sim.now
        due = self._last_progress + self.rto
        if now < due:
            self._rto_event = self.sim.schedule(due, self._rto_fire)
            return
        self.timeouts += 1
        lost = list(self.outstanding.items())
        self.outstanding.clear()
        for _, (part, size, _, frame_id, *_rest) in lost:
            self.inflight -= size
            self._retx.append((part, size, frame_id))
            self.retransmissions += 1
        self._recover = self._next_seq - 1
        self.cca.on_timeout(now)
        self.rto = min(2 * self.rto, MAX_RTO_US)
        self._last_progress = now
        self._pump()
        if self.outstanding and self._rto_event is None:
            self._rto_event = self.sim.schedule(self._last_progress + self.rto, self._rto_fire)


@dataclass
class FrameRecord:
    frame_id: int
    generation_time: int
    size: int
    parts: int
    remaining: int
    completion_time: Optional[int] = None

    def delay_us(self) -> Optional[int]:
        if self.completion_time is None:
            return None
        return self.completion_time - self.generation_time


class VideoSource:
    """Frame-emitting real-time source whose bitrate follows its controller."""

    def __init__(self, sim: Simulation, sender: Sender, fps: int = 30,
                 floor_bps: float = 150_000.0, max_rate_bps: Optional[float] = None,
                 start_us: int = 0, stop_us: Optional[int] = None,
                 pacing_factor: Optional[float] = 2.5):
        if fps <= 0:
            raise ConfigurationError("fps must be positive")
        self.sim = sim
        self.sender = sender
        self.fps = fps
        self.floor = floor_bps
        self.max_rate = max_rate_bps
        # frames leave through a pacer running this many times the encoder rate
        self.pacing_factor = pacing_factor
        self.start_us = start_us
        self.stop_us = stop_us
        self.frames: list = []
        self._by_part: dict = {}
        self._next_part = 0
        self.rate_log: list = []
        sender.on_part = self._part_delivered
        sim.schedule(start_us, self._tick, 0)

    def frame_time(self, index: int) -> int:
        # integer microsecond boundaries; the fractional remainder carries over
        return self.start_us + index * US_PER_S // self.fps

    def current_rate(self) -> float:
        rate = self.sender.cca.target_rate()
        if self.max_rate is not None:
            rate = min(rate, self.max_rate)
        return rate

    def _tick(self, index: int) -> None:
        now = self.sim.now
        if self.stop_us is not None and now >= self.stop_us:
            return
        video_frame_emit(self, now)
        self.sim.schedule(self.frame_time(index + 1), self._tick, index + 1)

    def _part_delivered(self, pkt: Packet, now: int) -> None:
        frame = self._by_part.pop(pkt.part, None)
        if frame is None:
            return
        frame.remaining -= 1
        if frame.remaining == 0:
            frame.completion_time = now

    def frame_delays(self, horizon_us: Optional[int] = None) -> list:
        """(generation_ms, delay_ms) per frame; unfinished frames count up to the horizon."""
        out = []
        for f in self.frames:
            d = f.delay_us()
            if d is None:
                if horizon_us is None:
                    continue
                d = horizon_us - f.generation_time
            out.append((f.generation_time / US_PER_MS, d / US_PER_MS))
        return out


def frame_packet_sizes(rate_bps: float, fps: int, floor_bps: float = 150_000.0, mss: int = MTU) -> list:
    """Sizes of the packets carrying one frame at ``rate_bps``."""
    if rate_bps < floor_bps:
        return [min(mss, max(1, int(floor_bps / fps / 8)))]
    frame = max(1, int(rate_bps / fps / 8))
    n = -(-frame // mss)
    return [mss] * (n - 1) + [frame - mss * (n - 1)]


def video_frame_emit(source: VideoSource, now: int) -> list:
    """Generate one frame at ``now`` and hand its packets to the network."""
    rate = source.current_rate()
    sizes = frame_packet_sizes(rate, source.fps, source.floor, source.sender.mss)
    frame = FrameRecord(len(source.frames), now, sum(sizes), len(sizes), len(sizes))
    source.frames.append(frame)
    source.rate_log.append((now, rate))
    if source.pacing_factor:
        source.sender.app_pacing_bps = max(rate, source.floor) * source.pacing_factor
    parts = []
    for sz in sizes:
        pid = source._next_part
        source._next_part += 1
        source._by_part[pid] = frame
        parts.append((pid, sz, frame.frame_id))
    return source.sender.push(parts)


@dataclass
class WebPage:
    page_id: int
    start_us: int
    flows: list = field(default_factory=list)

    def completed(self) -> bool:
        return all(f.completion_time is not None for f in self.flows)

    def plt_us(self, horizon_us: Optional[int] = None) -> Optional[int]:
        if self.completed():
            return max(f.completion_time for f in self.flows) - self.start_us
        if horizon_us is None:
            return None
        return horizon_us - self.start_us


def spawn_web_page(sim: Simulation, send: Callable, ack_delay_us: int, n_flows: int,
                   sizes: Sequence[int], start_ms: float, page_id: int = 0,
                   offsets_ms: Optional[Sequence[float]] = None, initial_burst: int = DEFAULT_B0,
                   flow_prefix: str = "web", cubic_beta: float = 0.7) -> WebPage:
    """Start ``n_flows`` Cubic transfers of the given sizes at ``start_ms``.

    A single size is reused for every flow.  All flows start together unless
    per-flow ``offsets_ms`` are given.
    """
    sizes = list(sizes)
    if not sizes:
        raise ConfigurationError("a web page needs at least one flow size")
    if n_flows < 1:
        raise ConfigurationError("a web page needs at least one flow")
    if len(sizes) == 1:
        sizes = sizes * n_flows
    if len(sizes) != n_flows:
        raise ConfigurationError("number of sizes does not match the flow count")
    if any(s <= 0 for s in sizes):
        raise ConfigurationError("web flow sizes must be positive")
    offsets = list(offsets_ms) if offsets_ms is not None else [0.0] * n_flows
    start_us = int(round(start_ms * US_PER_MS))
    page = WebPage(page_id, start_us)
    iw = max(1, initial_burst // MTU)
    for i, (size, off) in enumerate(zip(sizes, offsets)):
        cca = CubicCca(beta=cubic_beta, initial_window=iw)
        fstart = start_us + int(round(off * US_PER_MS))
        s = Sender(sim, f"{flow_prefix}{page_id}.{i}", cca, send, ack_delay_us,
                   app_class=WEB, size=int(size), start_us=fstart)
        s.page_id = page_id
        page.flows.append(s)
    return page
