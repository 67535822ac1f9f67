"""Comparison queueing disciplines."""
from __future__ import annotations

import math
import random
from collections import deque
from dataclasses import dataclass, asdict
from typing import Mapping, Optional

from ..engine import MTU, REALTIME, US_PER_MS, WEB, ConfigurationError, Packet
from .base import DrrRing, PacketFifo, Scheduler


@dataclass
class BaselineConfig:
    codel_target_ms: float = 5.0
    codel_interval_ms: float = 100.0
    red_min: int = 30_000
    red_max: int = 90_000
    red_p_max: float = 0.1
    red_weight: float = 0.002
    cbq_weights: tuple = (1, 1)
    sjf_thresholds: tuple = (100_000, 1_000_000, 10_000_000)
    quantum: int = MTU

    def __post_init__(self):
        self.cbq_weights = tuple(self.cbq_weights)
        self.sjf_thresholds = tuple(int(x) for x in self.sjf_thresholds)
        self.validate()

    def validate(self) -> None:
        if not 0 < self.codel_target_ms < self.codel_interval_ms:
            raise ConfigurationError("codel target must be positive and below the interval")
        if not 0 <= self.red_min < self.red_max:
            raise ConfigurationError("red_min must be below red_max")
        if not 0 < self.red_p_max <= 1:
            raise ConfigurationError("red_p_max must lie in (0, 1]")
        if len(self.cbq_weights) != 2 or any(w <= 0 for w in self.cbq_weights):
            raise ConfigurationError("cbq weights must be two positive numbers")
        if list(self.sjf_thresholds) != sorted(set(self.sjf_thresholds)):
            raise ConfigurationError("sjf thresholds must be strictly increasing")

    @classmethod
    def from_dict(cls, data: Mapping) -> "BaselineConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown baseline config keys: {sorted(unknown)}")
        return cls(**dict(data))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cbq_weights"] = list(self.cbq_weights)
        d["sjf_thresholds"] = list(self.sjf_thresholds)
        return d


class FifoScheduler(Scheduler):
    name = "fifo"

    def __init__(self, buffer_limit: Optional[int] = None):
        super().__init__(buffer_limit)
        self.q = PacketFifo()

    def enqueue(self, pkt: Packet, now: int) -> list:
        if self.buffer_limit is not None and self.backlog_bytes + pkt.size > self.buffer_limit:
            return [pkt]
        self.q.push(pkt)
        self.backlog_bytes += pkt.size
        self.backlog_packets += 1
        return []

    def dequeue(self, now: int) -> Optional[Packet]:
        if not self.q:
            return None
        pkt = self.q.pop()
        self.backlog_bytes -= pkt.size
        self.backlog_packets -= 1
        return pkt


class FqScheduler(Scheduler):
    """Per-flow queues served by byte-fair deficit round robin."""

    name = "fq"

    def __init__(self, buffer_limit: Optional[int] = None, quantum: int = MTU):
        super().__init__(buffer_limit)
        self.ring = DrrRing(quantum)

    def enqueue(self, pkt: Packet, now: int) -> list:
        self.ring.push(pkt.flow_id, pkt)
        self.backlog_bytes += pkt.size
        self.backlog_packets += 1
        dropped = []
        while self.over_limit():
            victim = self.ring.drop_tail(self.ring.longest())
            self.backlog_bytes -= victim.size
            self.backlog_packets -= 1
            dropped.append(victim)
        return dropped

    def dequeue(self, now: int) -> Optional[Packet]:
        pkt = self.ring.pop()
        if pkt is not None:
            self.backlog_bytes -= pkt.size
            self.backlog_packets -= 1
        return pkt


class CodelState:
    """CoDel control law state for one queue (times in microseconds)."""

    def __init__(self, target_us: int, interval_us: int):
        self.target = target_us
        self.interval = interval_us
        self.first_above_time = 0
        self.drop_next = 0
        self.count = 0
        self.lastcount = 0
        self.dropping = False

    def control_law(self, t: int, count: int) -> int:
        return t + int(self.interval / math.sqrt(count))

    def ok_to_drop(self, sojourn_us: int, backlog_bytes: int, now: int) -> bool:
        """Sojourn bookkeeping for one dequeued packet; True once above target for an interval."""
        if sojourn_us < self.target or backlog_bytes <= MTU:
            self.first_above_time = 0
            return False
        if self.first_above_time == 0:
            self.first_above_time = now + self.interval
            return False
        return now >= self.first_above_time

    def dequeue(self, fifo: PacketFifo, now: int, on_drop) -> Optional[Packet]:
        def pull():
            if not fifo:
                self.first_above_time = 0
                return None, False
            pkt = fifo.pop()
            return pkt, self.ok_to_drop(now - pkt.enqueue_time, fifo.bytes + pkt.size, now)

        pkt, drop_ok = pull()
        if pkt is None:
            self.dropping = False
            return None
        if self.dropping:
            if not drop_ok:
                self.dropping = False
            while self.dropping and now >= self.drop_next:
                on_drop(pkt)
                self.count += 1
                pkt, drop_ok = pull()
                if pkt is None or not drop_ok:
                    self.dropping = False
                else:
                    self.drop_next = self.control_law(self.drop_next, self.count)
        elif drop_ok:
            on_drop(pkt)
            pkt, _ = pull()
            self.dropping = True
            delta = self.count - self.lastcount
            if delta > 1 and now - self.drop_next < 16 * self.interval:
                self.count = delta
            else:
                self.count = 1
            self.drop_next = self.control_law(now, self.count)
            self.lastcount = self.count
        return pkt


def codel_dequeue_gate(sojourn_ms: float, state: CodelState, now_us: int,
                       backlog_bytes: int = 10 * MTU) -> str:
    """Single-packet view of the CoDel decision: ``"deliver"`` or ``"drop"``."""
    ok = state.ok_to_drop(int(round(sojourn_ms * US_PER_MS)), backlog_bytes, now_us)
    if state.dropping:
        if not ok:
            state.dropping = False
            return "deliver"
        if now_us >= state.drop_next:
            state.count += 1
            state.drop_next = state.control_law(state.drop_next, state.count)
            return "drop"
        return "deliver"
    if ok:
        state.dropping = True
        state.count = 1
        state.drop_next = state.control_law(now_us, state.count)
        return "drop"
    return "deliver"


class CodelScheduler(Scheduler):
    name = "codel"

    def __init__(self, buffer_limit: Optional[int] = None, target_ms: float = 5.0,
                 interval_ms: float = 100.0):
        super().__init__(buffer_limit)
        self.q = PacketFifo()
        self.state = CodelState(int(target_ms * US_PER_MS), int(interval_ms * US_PER_MS))

    def enqueue(self, pkt: Packet, now: int) -> list:
        if self.buffer_limit is not None and self.backlog_bytes + pkt.size > self.buffer_limit:
            return [pkt]
        self.q.push(pkt)
        self.backlog_bytes += pkt.size
        self.backlog_packets += 1
        return []

    def dequeue(self, now: int) -> Optional[Packet]:
        def dropped(p):
            self.backlog_bytes -= p.size
            self.backlog_packets -= 1
            self._dequeue_drop(p, now)

        pkt = self.state.dequeue(self.q, now, dropped)
        if pkt is not None:
            self.backlog_bytes -= pkt.size
            self.backlog_packets -= 1
        return pkt


class _CodelFlow:
    __slots__ = ("fifo", "deficit", "codel", "listed")

    def __init__(self, target_us, interval_us):
        self.fifo = PacketFifo()
        self.deficit = 0
        self.codel = CodelState(target_us, interval_us)
        self.listed = False


class FqCodelScheduler(Scheduler):
    """Flow queueing with per-flow CoDel and a new-flow list served first."""

    name = "fq_codel"

    def __init__(self, buffer_limit: Optional[int] = None, target_ms: float = 5.0,
                 interval_ms: float = 100.0, quantum: int = MTU):
        super().__init__(buffer_limit)
        self.quantum = quantum
        self.target_us = int(target_ms * US_PER_MS)
        self.interval_us = int(interval_ms * US_PER_MS)
        self.flows: dict = {}
        self.new_flows: deque = deque()
        self.old_flows: deque = deque()

    def enqueue(self, pkt: Packet, now: int) -> list:
        f = self.flows.get(pkt.flow_id)
        if f is None:
            f = self.flows[pkt.flow_id] = _CodelFlow(self.target_us, self.interval_us)
        f.fifo.push(pkt)
        self.backlog_bytes += pkt.size
        self.backlog_packets += 1
        if not f.listed:
            f.listed = True
            f.deficit = self.quantum
            self.new_flows.append(f)
        dropped = []
        while self.over_limit():
            fat = max((x for x in self.flows.values() if x.fifo), key=lambda x: x.fifo.bytes)
            victim = fat.fifo.pop()
            self.backlog_bytes -= victim.size
            self.backlog_packets -= 1
            dropped.append(victim)
        return dropped

    def dequeue(self, now: int) -> Optional[Packet]:
        def dropped(p):
            self.backlog_bytes -= p.size
            self.backlog_packets -= 1
            self._dequeue_drop(p, now)

        while True:
            if self.new_flows:
                lst = self.new_flows
            elif self.old_flows:
                lst = self.old_flows
            else:
                return None
            f = lst[0]
            if f.deficit <= 0:
                f.deficit += self.quantum
                lst.popleft()
                self.old_flows.append(f)
                continue
            pkt = f.codel.dequeue(f.fifo, now, dropped)
            if pkt is None:
                lst.popleft()
                if lst is self.new_flows and self.old_flows:
                    self.old_flows.append(f)
                else:
                    f.listed = False
                continue
            f.deficit -= pkt.size
            self.backlog_bytes -= pkt.size
            self.backlog_packets -= 1
            return pkt


def red_drop_probability(avg: float, red_min: float, red_max: float, p_max: float) -> float:
    if avg < red_min:
        return 0.0
    if avg > red_max:
        return 1.0
    return p_max * (avg - red_min) / (red_max - red_min)


class RedScheduler(Scheduler):
    name = "red"

    def __init__(self, buffer_limit: Optional[int] = None, red_min: int = 30_000,
                 red_max: int = 90_000, p_max: float = 0.1, weight: float = 0.002,
                 seed: int = 0):
        super().__init__(buffer_limit)
        self.q = PacketFifo()
        self.red_min, self.red_max, self.p_max, self.weight = red_min, red_max, p_max, weight
        self.avg = 0.0
        self.idle_since: Optional[int] = 0
        self.rng = random.Random(seed)

    def red_admit(self, now: int) -> bool:
        if self.idle_since is not None:
            # decay as if one small packet per millisecond had left during idleness
            idle_ms = (now - self.idle_since) / US_PER_MS
            self.avg *= (1 - self.weight) ** idle_ms
            self.idle_since = None
        self.avg = (1 - self.weight) * self.avg + self.weight * self.q.bytes
        p = red_drop_probability(self.avg, self.red_min, self.red_max, self.p_max)
        return not (p > 0 and self.rng.random() < p)

    def enqueue(self, pkt: Packet, now: int) -> list:
        if not self.red_admit(now):
            return [pkt]
        if self.buffer_limit is not None and self.backlog_bytes + pkt.size > self.buffer_limit:
            return [pkt]
        self.q.push(pkt)
        self.backlog_bytes += pkt.size
        self.backlog_packets += 1
        return []

    def dequeue(self, now: int) -> Optional[Packet]:
        if not self.q:
            return None
        pkt = self.q.pop()
        self.backlog_bytes -= pkt.size
        self.backlog_packets -= 1
        if not self.q:
            self.idle_since = now
        return pkt


class SjfScheduler(Scheduler):
    """Least-attained-service: flows with fewer bytes served so far go first.

    Attained service is bucketed by thresholds; flows in the same bucket are
    served round robin one packet at a time.
    """

    name = "sjf"

    def __init__(self, buffer_limit: Optional[int] = None,
                 thresholds=(100_000, 1_000_000, 10_000_000)):
        super().__init__(buffer_limit)
        self.thresholds = tuple(thresholds)
        self.queues: dict = {}
        self.attained: dict = {}
        self.active: deque = deque()

    def level(self, flow_id) -> int:
        sent = self.attained.get(flow_id, 0)
        return sum(1 for t in self.thresholds if sent >= t)

    def enqueue(self, pkt: Packet, now: int) -> list:
        q = self.queues.get(pkt.flow_id)
        if q is None:
            q = self.queues[pkt.flow_id] = PacketFifo()
        if not q:
            self.active.append(pkt.flow_id)
        q.push(pkt)
        self.backlog_bytes += pkt.size
        self.backlog_packets += 1
        dropped = []
        while self.over_limit():
            fid = max(self.active, key=lambda f: (self.level(f), self.queues[f].bytes))
            victim = self.queues[fid].pop_tail()
            if not self.queues[fid]:
                self.active.remove(fid)
            self.backlog_bytes -= victim.size
            self.backlog_packets -= 1
            dropped.append(victim)
        return dropped

    def dequeue(self, now: int) -> Optional[Packet]:
        if not self.active:
            return None
        best_i, best_lvl = 0, None
        for i, fid in enumerate(self.active):
            lvl = self.level(fid)
            if best_lvl is None or lvl < best_lvl:
                best_i, best_lvl = i, lvl
                if lvl == 0:
                    break
        fid = self.active[best_i]
        del self.active[best_i]
        q = self.queues[fid]
        pkt = q.pop()
        if q:
            self.active.append(fid)
        self.attained[fid] = self.attained.get(fid, 0) + pkt.size
        self.backlog_bytes -= pkt.size
        self.backlog_packets -= 1
        return pkt


def _label(pkt: Packet) -> str:
    return REALTIME if pkt.app_class == REALTIME else WEB


class CbqScheduler(Scheduler):
    """Two label-based classes, each a FIFO, sharing the link by weighted DRR."""

    uses_labels = True

    def __init__(self, buffer_limit: Optional[int] = None, weights=(1, 1), quantum: int = MTU):
        super().__init__(buffer_limit)
        self.weights = tuple(weights)
        self.name = f"cbq_{weights[0]}_{weights[1]}"
        ring = DrrRing(quantum)
        w = {REALTIME: weights[0], WEB: weights[1]}
        ring.quantum_for = lambda key: quantum * w[key]
        self.ring = ring

    def enqueue(self, pkt: Packet, now: int) -> list:
        self.ring.push(_label(pkt), pkt)
        self.backlog_bytes += pkt.size
        self.backlog_packets += 1
        dropped = []
        while self.over_limit():
            victim = self.ring.drop_tail(self.ring.longest())
            self.backlog_bytes -= victim.size
            self.backlog_packets -= 1
            dropped.append(victim)
        return dropped

    def dequeue(self, now: int) -> Optional[Packet]:
        pkt = self.ring.pop()
        if pkt is not None:
            self.backlog_bytes -= pkt.size
            self.backlog_packets -= 1
        return pkt


class StrictPriorityScheduler(Scheduler):
    name = "strict"
    uses_labels = True

    def __init__(self, buffer_limit: Optional[int] = None):
        super().__init__(buffer_limit)
        self.classes = {REALTIME: PacketFifo(), WEB: PacketFifo()}

    def enqueue(self, pkt: Packet, now: int) -> list:
        if self.buffer_limit is not None and self.backlog_bytes + pkt.size > self.buffer_limit:
            return [pkt]
        self.classes[_label(pkt)].push(pkt)
        self.backlog_bytes += pkt.size
        self.backlog_packets += 1
        return []

    def dequeue(self, now: int) -> Optional[Packet]:
        for cls in (REALTIME, WEB):
            q = self.classes[cls]
            if q:
                pkt = q.pop()
                self.backlog_bytes -= pkt.size
                self.backlog_packets -= 1
                return pkt
        return None
