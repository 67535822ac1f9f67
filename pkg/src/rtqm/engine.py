"""Deterministic discrete-event core: clock, event queue, packets and links.

Time is kept in integer microseconds throughout the simulator.  Capacities
are integer bits per second.
"""
from __future__ import annotations

import bisect
import heapq
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

US_PER_MS = 1000
US_PER_S = 1_000_000
MTU = 1500

REALTIME = "REALTIME"
WEB = "WEB"


class SimulationError(Exception):
    pass


class TimeTravelError(SimulationError):
    """Raised when an event is scheduled before the current clock."""


class ConfigurationError(SimulationError):
    pass


def ms(value: float) -> int:
    return int(round(value * US_PER_MS))


class Packet:
    __slots__ = (
        "flow_id", "size", "birth_time", "enqueue_time", "seq", "frame_id",
        "app_class", "part", "delivered_snapshot", "delivered_time_snapshot",
        "sender", "stamp",
    )

    def __init__(self, flow_id, size, birth_time, seq, frame_id=None,
                 app_class=None, part=None):
        self.flow_id = flow_id
        self.size = size
        self.birth_time = birth_time
        self.enqueue_time = -1
        self.seq = seq
        self.frame_id = frame_id
        self.app_class = app_class
        # identifies the payload unit; survives retransmission under a new seq
        self.part = part
        self.delivered_snapshot = 0
        self.delivered_time_snapshot = 0
        self.sender = None
        self.stamp = 0

    def __repr__(self):
        return f"Packet({self.flow_id!r}, seq={self.seq}, size={self.size})"


class EventHandle:
    __slots__ = ("time", "cancelled", "fired")

    def __init__(self, time: int):
        self.time = time
        self.cancelled = False
        self.fired = False

    def cancel(self) -> None:
        self.cancelled = True


class Simulation:
    """Virtual clock plus a timestamp-ordered event heap.

    Events at equal timestamps fire in insertion order.
    """

    def __init__(self) -> None:
        self.now = 0
        self._heap: list = []
        self._seq = itertools.count()
        self.events_fired = 0

    def schedule(self, at: int, fn: Callable, *args: Any) -> EventHandle:
        if at < self.now:
            raise TimeTravelError(f"cannot schedule at {at} us, clock is at {self.now} us")
        handle = EventHandle(at)
        heapq.heappush(self._heap, (at, next(self._seq), handle, fn, args))
        return handle

    def schedule_in(self, delay: int, fn: Callable, *args: Any) -> EventHandle:
        return self.schedule(self.now + delay, fn, *args)

    def run_until(self, t_end: int) -> None:
        heap = self._heap
        pop = heapq.heappop
        while heap and heap[0][0] <= t_end:
            at, _, handle, fn, args = pop(heap)
            if handle.cancelled:
                continue
            self.now = at
            handle.fired = True
            self.events_fired += 1
            fn(*args)
        if t_end > self.now:
            self.now = t_end

    def pending(self) -> int:
        return sum(1 for e in self._heap if not e[2].cancelled)


class CapacityProfile:
    """Piecewise-constant capacity series of (start_us, bits_per_second)."""

    def __init__(self, segments: Sequence[tuple[int, int]]):
        if not segments:
            raise ConfigurationError("capacity profile needs at least one segment")
        starts = [int(s) for s, _ in segments]
        rates = [int(r) for _, r in segments]
        if starts[0] != 0:
            raise ConfigurationError("capacity profile must start at time 0")
        for a, b in zip(starts, starts[1:]):
            if b <= a:
                raise ConfigurationError("capacity profile start times must be strictly increasing")
        for r in rates:
            if r <= 0:
                raise ConfigurationError("capacity must be positive")
        self.starts = starts
        self.rates = rates

    @classmethod
    def constant(cls, bps: float) -> "CapacityProfile":
        return cls([(0, int(bps))])

    def at(self, t: int) -> int:
        i = bisect.bisect_right(self.starts, t) - 1
        return self.rates[i]

    @property
    def peak(self) -> int:
        return max(self.rates)

    def mean(self, t_end: Optional[int] = None) -> float:
        """Time-weighted mean rate in bits/s over [0, t_end]."""
        if t_end is None:
            if len(self.starts) == 1:
                return float(self.rates[0])
            # average over the declared segments, last one weighted like the mean step
            t_end = self.starts[-1] + (self.starts[-1] // max(1, len(self.starts) - 1))
        total = 0.0
        for i, (s, r) in enumerate(zip(self.starts, self.rates)):
            e = self.starts[i + 1] if i + 1 < len(self.starts) else t_end
            e = min(e, t_end)
            if e > s:
                total += (e - s) * r
        return total / t_end if t_end > 0 else float(self.rates[0])

    def scaled(self, factor: float) -> "CapacityProfile":
        return CapacityProfile([(s, max(1, int(r * factor))) for s, r in zip(self.starts, self.rates)])


def serialization_us(size_bytes: int, bps: int) -> int:
    return -(-size_bytes * 8 * US_PER_S // bps)


def default_buffer_limit(profile: CapacityProfile, rtt_ms: float = 40.0) -> int:
    """Two bandwidth-delay products at the peak capacity, in bytes."""
    return int(2 * profile.peak * rtt_ms / 1000 / 8)


@dataclass
class LinkStats:
    admitted: int = 0
    dropped: int = 0
    transmitted: int = 0
    busy_us: int = 0
    drops_by_flow: dict = field(default_factory=dict)


class Link:
    """A serializing hop with a fixed one-way propagation delay.

    ``deliver`` is called as ``deliver(packet, arrival_time)`` at the instant
    serialization ends; ``arrival_time`` already includes propagation.
    """

    def __init__(self, sim: Simulation, profile: CapacityProfile, scheduler,
                 propagation_delay_ms: float = 20.0,
                 deliver: Optional[Callable] = None, name: str = "link"):
        self.sim = sim
        self.profile = profile
        self.scheduler = scheduler
        self.prop_us = ms(propagation_delay_ms)
        self.deliver = deliver
        self.name = name
        self.busy = False
        self.stats = LinkStats()
        self.on_drop: Optional[Callable] = None
        self.on_dequeue: Optional[Callable] = None
        # schedulers that drop at dequeue time (CoDel and friends) report here
        scheduler.drop_hook = self._record_drop

    def _record_drop(self, pkt: Packet, now: int) -> None:
        self.stats.dropped += 1
        self.stats.drops_by_flow[pkt.flow_id] = self.stats.drops_by_flow.get(pkt.flow_id, 0) + 1
        if self.on_drop is not None:
            self.on_drop(pkt, now)

    def receive(self, pkt: Packet) -> None:
        now = self.sim.now
        pkt.enqueue_time = now
        self.stats.admitted += 1
        dropped = self.scheduler.enqueue(pkt, now)
        if dropped:
            for d in dropped:
                self._record_drop(d, now)
        if not self.busy:
            self._transmit_next()

    def _transmit_next(self) -> None:
        now = self.sim.now
        pkt = self.scheduler.dequeue(now)
        if pkt is None:
            self.busy = False
            return
        self.busy = True
        if self.on_dequeue is not None:
            self.on_dequeue(pkt, now)
        # rate is bound at serialization start; mid-packet capacity changes apply to the next packet
        tx = serialization_us(pkt.size, self.profile.at(now))
        self.stats.busy_us += tx
        self.sim.schedule(now + tx, self._tx_done, pkt)

    def _tx_done(self, pkt: Packet) -> None:
        self.stats.transmitted += 1
        if self.deliver is not None:
            self.deliver(pkt, self.sim.now + self.prop_us)
        self._transmit_next()


def chain_links(sim: Simulation, links: Sequence[Link], deliver: Callable) -> None:
    """Wire links in series; the last one hands packets to ``deliver``."""
    for a, b in zip(links, links[1:]):
        def hop(pkt, arrival, _next=b):
            sim.schedule(arrival, _next.receive, pkt)
        a.deliver = hop
    links[-1].deliver = deliver
