"""Age-aware weighted scheduler with occupancy-based flow classification.

Flows start in a dedicated NEW queue with a small weight that doubles every
reweight period until it reaches one (128 in the 1/128 fixed-point unit used
here).  At that point the flow graduates into whichever of the three class
queues has the occupancy target closest to the flow's measured occupancy.
Classes are revisited every reclassify period, both per flow (hysteresis
around the fair share) and per queue (midpoint crossing).  The four queues
are served by deficit-weighted round robin; inside a queue flows share
byte-fairly and each flow's packets stay in arrival order.

Packet labels are never consulted.
"""
from __future__ import annotations

import heapq
import itertools
import math
from collections import deque
from dataclasses import dataclass, field, asdict
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

from ..engine import MTU, US_PER_MS, ConfigurationError, Packet
from .base import Scheduler

NEW, Q1, Q2, Q3 = 0, 1, 2, 3
QUEUE_NAMES = ("NEW", "Q1", "Q2", "Q3")
WEIGHT_ONE = 128
_EPS = 1e-12


@dataclass
class ConfuciusConfig:
    lambda_per_ms: float = 0.004
    alpha: float = 0.10
    # doubling interval; derived as 1/lambda when left unset
    reweight_period_ms: Optional[float] = None
    reclassify_period_ms: float = 100.0
    occupancy_targets: tuple = (0.10, 0.50, 0.90)
    quantum: int = MTU
    # consecutive periods a queue must sit past a midpoint before it moves
    persistence: int = 2
    # a flow with an empty backlog for this long is forgotten
    idle_timeout_ms: float = 1000.0

    def __post_init__(self):
        self.occupancy_targets = tuple(float(t) for t in self.occupancy_targets)
        self.validate()

    def validate(self) -> None:
        if not self.lambda_per_ms > 0:
            raise ConfigurationError("lambda_per_ms must be positive")
        if not 0 < self.alpha < 0.5:
            raise ConfigurationError("alpha must lie in (0, 0.5)")
        if (self.reweight_period_ms is not None and self.reweight_period_ms <= 0) \
                or self.reclassify_period_ms <= 0:
            raise ConfigurationError("periods must be positive")
        t = self.occupancy_targets
        if len(t) != 3:
            raise ConfigurationError("occupancy_targets needs exactly three fractions")
        if not all(0 < x < 1 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ConfigurationError("occupancy_targets must be strictly increasing in (0, 1)")
        if self.quantum <= 0 or self.persistence < 1 or self.idle_timeout_ms <= 0:
            raise ConfigurationError("quantum, persistence and idle timeout must be positive")

    @classmethod
    def from_dict(cls, data: Mapping) -> "ConfuciusConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown confucius config keys: {sorted(unknown)}")
        return cls(**dict(data))

    @property
    def doubling_ms(self) -> float:
        if self.reweight_period_ms is not None:
            return self.reweight_period_ms
        return 1.0 / self.lambda_per_ms

    def to_dict(self) -> dict:
        d = asdict(self)
        d["occupancy_targets"] = list(self.occupancy_targets)
        return d


def compute_flow_weight(age_ms: float, initial_factor, lam: float) -> float:
    """Continuous flow weight: the initial factor doubled every 1/lam ms, capped at one."""
    if age_ms < 0:
        raise ValueError("age must be non-negative")
    return min(float(initial_factor) * 2.0 ** (lam * age_ms), 1.0)


def initial_weight_q128(factor) -> int:
    """Round-to-nearest quantization of a weight factor, floored at 1/128."""
    w = math.floor(float(factor) * WEIGHT_ONE + 0.5)
    return max(1, min(WEIGHT_ONE, w))


def nearest_queue(occupancy: float, targets: Sequence[float]) -> int:
    """Class queue index (1-based) whose target is closest; ties go to the lower index."""
    best, best_d = 1, None
    for i, t in enumerate(targets, start=1):
        d = abs(occupancy - t)
        if best_d is None or d < best_d - _EPS:
            best, best_d = i, d
    return best


def intra_queue_examination(shares: Mapping, alpha: float) -> list:
    """Hysteresis test inside one queue.

    ``shares`` maps a flow key to its fraction of the queue's bytes.  Returns
    ``(key, +1)`` for flows to promote and ``(key, -1)`` for flows to demote.
    """
    n = len(shares)
    if n < 2:
        return []
    fair = 1.0 / n
    out = []
    for key, s in shares.items():
        if s >= fair + alpha - _EPS:
            out.append((key, +1))
        elif s <= fair - alpha + _EPS:
            out.append((key, -1))
    return out


def queue_level_examination(levels: Sequence[Optional[float]], targets: Sequence[float],
                            streaks: Optional[dict] = None, persistence: int = 1) -> list:
    """Whole-queue moves for the class queues.

    ``levels[i]`` is the aggregate occupancy of class queue ``i+1`` or ``None``
    when it has no members.  ``streaks`` carries consecutive-crossing counts
    between calls.  Returns ``(src, dst)`` pairs with 1-based queue indices.
    """
    if streaks is None:
        streaks = {}
    moves = []
    n = len(targets)
    for i in range(1, n + 1):
        level = levels[i - 1]
        up_key, down_key = (i, +1), (i, -1)
        if level is None:
            streaks[up_key] = streaks[down_key] = 0
            continue
        t = targets[i - 1]
        if i < n and level > (t + targets[i]) / 2:
            streaks[up_key] = streaks.get(up_key, 0) + 1
        else:
            streaks[up_key] = 0
        if i > 1 and level < (targets[i - 2] + t) / 2:
            streaks[down_key] = streaks.get(down_key, 0) + 1
        else:
            streaks[down_key] = 0
        if streaks[up_key] >= persistence:
            moves.append((i, i + 1))
            streaks[up_key] = 0
        elif streaks[down_key] >= persistence:
            moves.append((i, i - 1))
            streaks[down_key] = 0
    return moves


class FlowRecord:
    __slots__ = (
        "flow_id", "arrival_time", "weight_q128", "initial_factor", "queue_idx",
        "packets", "queued_bytes", "deficit", "fresh", "last_reweight",
        "last_active", "byte_time", "last_touch", "served", "periods",
        "bytes_ema", "served_ema", "occupancy", "occupancy_ema", "alive",
    )

    def __init__(self, flow_id, arrival_time: int):
        self.flow_id = flow_id
        self.arrival_time = arrival_time
        self.weight_q128 = WEIGHT_ONE
        self.initial_factor = Fraction(1)
        self.queue_idx = NEW
        self.packets: deque = deque()
        self.queued_bytes = 0
        self.deficit = 0
        self.fresh = False
        self.last_reweight = arrival_time
        self.last_active = arrival_time
        self.byte_time = 0
        self.last_touch = arrival_time
        self.served = 0
        self.periods = 0
        self.bytes_ema = 0.0
        self.served_ema = 0.0
        # own queueing delay relative to the time needed to drain a full buffer
        self.occupancy = 0.0
        # fraction of its queue's bytes held by this flow
        self.occupancy_ema = 0.0
        self.alive = True

    def touch(self, now: int) -> None:
        self.byte_time += self.queued_bytes * (now - self.last_touch)
        self.last_touch = now


def quantized_reweight(record: FlowRecord, now_ms: float, period_ms: float = 250.0) -> FlowRecord:
    """Left-shift the weight once if a full doubling interval has elapsed."""
    if now_ms * US_PER_MS - record.last_reweight >= period_ms * US_PER_MS:
        record.weight_q128 = min(record.weight_q128 << 1, WEIGHT_ONE)
        record.last_reweight += int(round(period_ms * US_PER_MS))
    return record


class VirtualQueue:
    def __init__(self, idx: int, target: Optional[float], quantum: int):
        self.idx = idx
        self.target = target
        self.quantum = quantum
        self.members: dict = {}
        self.weight = 0
        self.bytes = 0
        self.active: deque = deque()
        self.deficit = 0.0
        self.fresh = False

    def __len__(self) -> int:
        return len(self.members)

    def add(self, rec: FlowRecord) -> None:
        self.members[rec.flow_id] = rec
        rec.queue_idx = self.idx
        rec.deficit = 0
        rec.fresh = False
        self.weight += rec.weight_q128
        self.bytes += rec.queued_bytes
        if rec.packets:
            self.active.append(rec)

    def remove(self, rec: FlowRecord) -> None:
        del self.members[rec.flow_id]
        self.weight -= rec.weight_q128
        self.bytes -= rec.queued_bytes
        if rec.packets:
            self.active.remove(rec)
        rec.deficit = 0
        rec.fresh = False

    def select(self) -> FlowRecord:
        """Flow whose head packet is next under byte-fair round robin."""
        active = self.active
        while True:
            rec = active[0]
            if not rec.fresh:
                rec.deficit += self.quantum
                rec.fresh = True
            if rec.packets[0].size <= rec.deficit:
                return rec
            rec.fresh = False
            active.rotate(-1)

    def reset_round(self) -> None:
        self.deficit = 0.0
        self.fresh = False


class ConfuciusScheduler(Scheduler):
    name = "confucius"

    DEFAULT_BUFFER = 250_000

    def __init__(self, buffer_limit: Optional[int] = None,
                 config: Optional[ConfuciusConfig] = None,
                 record_diagnostics: bool = True):
        super().__init__(buffer_limit)
        self.config = config or ConfuciusConfig()
        c = self.config
        self.queues = [VirtualQueue(NEW, None, c.quantum)] + [
            VirtualQueue(i + 1, t, c.quantum) for i, t in enumerate(c.occupancy_targets)
        ]
        self.flows: dict = {}
        self._ring: deque = deque()
        self._reweight_heap: list = []
        self._heap_seq = itertools.count()
        self._stamp = itertools.count(1)
        self._batch: list = []
        self._batch_time = -1
        self._reweight_us = max(1, int(round(c.doubling_ms * US_PER_MS)))
        self._period_us = int(round(c.reclassify_period_ms * US_PER_MS))
        self._idle_us = int(round(c.idle_timeout_ms * US_PER_MS))
        self._next_tick = self._period_us
        self._streaks: dict = {}
        self.record_diagnostics = record_diagnostics
        self.diagnostic_rows: list = []
        self.moves: list = []

    # admission -----------------------------------------------------------

    def enqueue(self, pkt: Packet, now: int) -> list:
        self._advance(now)
        rec = self.flows.get(pkt.flow_id)
        if rec is None:
            rec = self._on_flow_arrival(pkt.flow_id, now)
        rec.touch(now)
        pkt.stamp = next(self._stamp)
        vq = self.queues[rec.queue_idx]
        if not rec.packets:
            vq.active.append(rec)
        if vq.bytes == 0:
            self._ring.append(vq)
        rec.packets.append(pkt)
        rec.queued_bytes += pkt.size
        rec.last_active = now
        vq.bytes += pkt.size
        self.backlog_bytes += pkt.size
        self.backlog_packets += 1
        dropped = []
        limit = self._limit()
        while self.backlog_bytes > limit:
            dropped.append(self._drop_one(now))
        return dropped

    def _limit(self) -> int:
        return self.buffer_limit if self.buffer_limit is not None else self.DEFAULT_BUFFER

    def _drop_one(self, now: int) -> Packet:
        victim_q = None
        for vq in self.queues:
            if vq.bytes > 0 and (victim_q is None or vq.bytes >= victim_q.bytes):
                victim_q = vq
        rec = max(victim_q.active, key=lambda r: r.packets[-1].stamp)
        rec.touch(now)
        pkt = rec.packets.pop()
        rec.queued_bytes -= pkt.size
        victim_q.bytes -= pkt.size
        self.backlog_bytes -= pkt.size
        self.backlog_packets -= 1
        if not rec.packets:
            victim_q.active.remove(rec)
            rec.deficit = 0
            rec.fresh = False
        if victim_q.bytes == 0:
            self._ring.remove(victim_q)
            victim_q.reset_round()
        return pkt

    def _on_flow_arrival(self, flow_id, now: int) -> FlowRecord:
        """Create the record in NEW and (re)compute the arrival batch's factor.

        Flows whose first packets arrive at the same instant form one batch and
        share the NEW-queue population snapshot taken after all of them joined.
        """
        if self._batch and now != self._batch_time:
            self._close_batch()
        rec = FlowRecord(flow_id, now)
        self.flows[flow_id] = rec
        new_q = self.queues[NEW]
        new_q.add(rec)
        self._batch.append(rec)
        self._batch_time = now
        f_ext = max(1, sum(len(q) for q in self.queues[1:]))
        q_new = max(1, len(new_q))
        factor = Fraction(f_ext, q_new)
        for r in self._batch:
            if r.queue_idx != NEW:
                continue
            w = initial_weight_q128(factor)
            new_q.weight += w - r.weight_q128
            r.weight_q128 = w
            r.initial_factor = factor
        heapq.heappush(self._reweight_heap, (now + self._reweight_us, next(self._heap_seq), rec))
        return rec

    def _close_batch(self) -> None:
        batch, self._batch = self._batch, []
        for r in batch:
            if r.alive and r.queue_idx == NEW and r.weight_q128 >= WEIGHT_ONE:
                self._graduate(r, self._batch_time)

    # service -------------------------------------------------------------

    def dequeue(self, now: int) -> Optional[Packet]:
        self._advance(now)
        ring = self._ring
        if not ring:
            return None
        misses = 0
        while True:
            vq = ring[0]
            if not vq.fresh:
                vq.deficit += vq.quantum * vq.weight / WEIGHT_ONE
                vq.fresh = True
            rec = vq.select()
            size = rec.packets[0].size
            if size <= vq.deficit:
                return self._serve(vq, rec, now)
            vq.fresh = False
            ring.rotate(-1)
            misses += 1
            if misses >= len(ring):
                self._skip_rounds()
                misses = 0

    def _skip_rounds(self) -> None:
        # every backlogged queue failed a full pass; jump ahead by the number
        # of whole rounds the closest queue still needs
        rounds = None
        for vq in self._ring:
            q = vq.quantum * vq.weight / WEIGHT_ONE
            need = vq.select().packets[0].size - vq.deficit
            r = max(1, math.ceil(need / q))
            rounds = r if rounds is None else min(rounds, r)
        if rounds and rounds > 1:
            for vq in self._ring:
                vq.deficit += (rounds - 1) * vq.quantum * vq.weight / WEIGHT_ONE

    def _serve(self, vq: VirtualQueue, rec: FlowRecord, now: int) -> Packet:
        rec.touch(now)
        pkt = rec.packets.popleft()
        size = pkt.size
        rec.queued_bytes -= size
        rec.deficit -= size
        rec.served += size
        rec.last_active = now
        vq.deficit -= size
        vq.bytes -= size
        self.backlog_bytes -= size
        self.backlog_packets -= 1
        if not rec.packets:
            vq.active.popleft()
            rec.deficit = 0
            rec.fresh = False
        if vq.bytes == 0:
            self._ring.popleft()
            vq.reset_round()
        return pkt

    # periodic work, run lazily ---------------------------------------------

    def advance(self, now: int) -> None:
        """Bring periodic state up to ``now`` without touching any packet."""
        self._advance(now)

    def _advance(self, now: int) -> None:
        if self._batch and now > self._batch_time:
            self._close_batch()
        heap = self._reweight_heap
        while True:
            t_rw = heap[0][0] if heap else None
            if t_rw is not None and t_rw <= now and t_rw <= self._next_tick:
                _, _, rec = heapq.heappop(heap)
                self._reweight(rec, t_rw)
            elif self._next_tick <= now:
                t = self._next_tick
                self._next_tick += self._period_us
                self._reclassify(t)
            else:
                break

    def _reweight(self, rec: FlowRecord, t: int) -> None:
        if not rec.alive or rec.queue_idx != NEW:
            return
        new_q = self.queues[NEW]
        w = min(rec.weight_q128 << 1, WEIGHT_ONE)
        new_q.weight += w - rec.weight_q128
        rec.weight_q128 = w
        rec.last_reweight = t
        if w >= WEIGHT_ONE:
            self._graduate(rec, t)
        else:
            heapq.heappush(self._reweight_heap, (t + self._reweight_us, next(self._heap_seq), rec))

    def _graduate(self, rec: FlowRecord, t: int) -> None:
        dst = nearest_queue(rec.occupancy, self.config.occupancy_targets)
        self._move(rec, dst, t, "graduate")

    def _move(self, rec: FlowRecord, dst_idx: int, t: int, reason: str) -> None:
        src = self.queues[rec.queue_idx]
        if src.idx == dst_idx:
            return
        dst = self.queues[dst_idx]
        src.remove(rec)
        if src.bytes == 0 and src in self._ring:
            self._ring.remove(src)
            src.reset_round()
        dst.add(rec)
        if rec.packets and dst not in self._ring:
            self._ring.append(dst)
        self.moves.append((t, rec.flow_id, src.idx, dst_idx, reason))

    def _reclassify(self, t: int) -> None:
        c = self.config
        buf = self._limit()
        start = t - self._period_us
        live = list(self.flows.values())
        for rec in live:
            rec.touch(t)
            span = t - max(start, rec.arrival_time)
            if span > 0:
                avg = rec.byte_time / span
                if rec.periods == 0:
                    rec.bytes_ema = avg
                    rec.served_ema = float(rec.served)
                else:
                    rec.bytes_ema = 0.5 * rec.bytes_ema + 0.5 * avg
                    rec.served_ema = 0.5 * rec.served_ema + 0.5 * rec.served
                rec.periods += 1
            rec.byte_time = 0
            rec.served = 0
        for rec in live:
            if rec.queued_bytes == 0 and t - rec.last_active >= self._idle_us:
                self._forget(rec)
        live = [r for r in live if r.alive]
        total_served = sum(r.served_ema for r in live)
        for rec in live:
            rec.occupancy = self._normalized(rec.bytes_ema, rec.served_ema, total_served, buf)

        for vq in self.queues[1:]:
            total = sum(r.bytes_ema for r in vq.members.values())
            n = len(vq)
            for r in vq.members.values():
                r.occupancy_ema = r.bytes_ema / total if total > 0 else (1.0 / n)

        targets = c.occupancy_targets
        moves = []
        for vq in self.queues[1:]:
            shares = {r.flow_id: r.occupancy_ema for r in vq.members.values()}
            for fid, direction in intra_queue_examination(shares, c.alpha):
                dst = vq.idx + direction
                if not Q1 <= dst <= Q3:
                    continue
                rec = vq.members[fid]
                # shares are relative to the queue's members, so only act when
                # the flow's own occupancy has left this queue's safe region
                mid = (targets[vq.idx - 1] + targets[dst - 1]) / 2
                if (direction > 0 and rec.occupancy > mid) or (direction < 0 and rec.occupancy < mid):
                    moves.append((rec, dst, "promote" if direction > 0 else "demote"))
        for rec, dst, why in moves:
            self._move(rec, dst, t, why)

        levels = []
        for vq in self.queues[1:]:
            if not vq.members:
                levels.append(None)
                continue
            b = sum(r.bytes_ema for r in vq.members.values())
            s = sum(r.served_ema for r in vq.members.values())
            levels.append(self._normalized(b, s, total_served, buf))
        for src, dst in queue_level_examination(levels, c.occupancy_targets, self._streaks, c.persistence):
            for rec in list(self.queues[src].members.values()):
                self._move(rec, dst, t, "queue_up" if dst > src else "queue_down")

        if self.record_diagnostics:
            t_ms = t / US_PER_MS
            for rec in live:
                self.diagnostic_rows.append(
                    (t_ms, rec.flow_id, rec.queue_idx, rec.weight_q128, rec.occupancy, rec.occupancy_ema))

    @staticmethod
    def _normalized(bytes_avg: float, served: float, total_served: float, buf: int) -> float:
        # queueing delay of the bytes relative to the drain time of a full buffer
        if bytes_avg <= 0:
            return 0.0
        if served <= 0 or total_served <= 0:
            return 1.0
        share = served / total_served
        return min(1.0, bytes_avg / (buf * share))

    def _forget(self, rec: FlowRecord) -> None:
        self.queues[rec.queue_idx].remove(rec)
        rec.alive = False
        del self.flows[rec.flow_id]

    # introspection ---------------------------------------------------------

    def queue_of(self, flow_id) -> Optional[int]:
        rec = self.flows.get(flow_id)
        return None if rec is None else rec.queue_idx

    def assignment(self) -> dict:
        return {fid: rec.queue_idx for fid, rec in self.flows.items()}

    def check_invariants(self) -> None:
        """Raise AssertionError if internal accounting is inconsistent."""
        seen = set()
        total = 0
        for vq in self.queues:
            w = b = 0
            for fid, rec in vq.members.items():
                assert fid not in seen, f"flow {fid} in two queues"
                seen.add(fid)
                assert rec.queue_idx == vq.idx
                if vq.idx != NEW:
                    assert rec.weight_q128 == WEIGHT_ONE
                w += rec.weight_q128
                b += rec.queued_bytes
                assert rec.queued_bytes == sum(p.size for p in rec.packets)
                assert (rec in vq.active) == bool(rec.packets)
            assert w == vq.weight, "queue weight mismatch"
            assert b == vq.bytes, "queue bytes mismatch"
            assert (vq in self._ring) == (vq.bytes > 0)
            total += b
        assert seen == set(self.flows), "orphaned flow record"
        assert total == self.backlog_bytes
