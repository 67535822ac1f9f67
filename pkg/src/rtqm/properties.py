"""Structural invariants of the Confucius scheduler as case-driven checks.

Each property has a generator that draws a random case from a numpy
``Generator`` and a checker that raises ``AssertionError`` when the case
exposes a violation.  ``rtqm validate`` drives them with numpy; the test
suite drives the same checkers with hypothesis strategies.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .engine import MTU, Packet
from .qdisc.confucius import (
    NEW, WEIGHT_ONE, ConfuciusConfig, ConfuciusScheduler, FlowRecord,
    initial_weight_q128, intra_queue_examination, queue_level_examination,
)

# fast clocks so that short op sequences cover reweights, reclassification
# and idle expiry
DRIVE_CONFIG = {"lambda_per_ms": 0.5, "reclassify_period_ms": 1.0, "idle_timeout_ms": 5.0}


def gen_ops(rng: np.random.Generator, n_ops: Optional[int] = None) -> list:
    """Random op list: ("enq", flow, size, dt_us) and ("deq", dt_us)."""
    n_ops = int(rng.integers(10, 200)) if n_ops is None else n_ops
    n_flows = int(rng.integers(1, 7))
    ops = []
    for _ in range(n_ops):
        dt = int(rng.choice([0, 0, int(rng.integers(1, 400)), int(rng.integers(400, 4000))]))
        if rng.random() < 0.55:
            ops.append(("enq", int(rng.integers(n_flows)), int(rng.integers(40, MTU + 1)), dt))
        else:
            ops.append(("deq", dt))
    return ops


class Driver:
    """Feeds an op list to a scheduler while checking invariants after every op."""

    def __init__(self, config: Optional[dict] = None, buffer_limit: int = 12 * MTU):
        cfg = {**DRIVE_CONFIG, **(config or {})}
        self.sched = ConfuciusScheduler(buffer_limit, ConfuciusConfig.from_dict(cfg))
        self.period_us = self.sched._reweight_us
        self.now = 0
        self.seq = 0
        self.enq = self.deq = self.dropped = 0
        self.enq_bytes = self.deq_bytes = self.drop_bytes = 0
        self.last_seq: dict = {}
        self.watch: dict = {}

    def apply(self, op) -> None:
        s = self.sched
        if op[0] == "enq":
            _, flow, size, dt = op
            self.now += dt
            self.seq += 1
            pkt = Packet(flow, size, self.now, self.seq)
            pkt.enqueue_time = self.now
            self.enq += 1
            self.enq_bytes += size
            for d in s.enqueue(pkt, self.now):
                self.dropped += 1
                self.drop_bytes += d.size
        else:
            self.now += op[1]
            s.advance(self.now)
            had = s.backlog_packets
            pkt = s.dequeue(self.now)
            # work conservation: a backlog always yields a packet
            assert (pkt is None) == (had == 0), f"dequeue returned {pkt} with {had} queued"
            if pkt is not None:
                self.deq += 1
                self.deq_bytes += pkt.size
                prev = self.last_seq.get(pkt.flow_id, 0)
                assert pkt.seq > prev, f"flow {pkt.flow_id}: seq {pkt.seq} after {prev}"
                self.last_seq[pkt.flow_id] = pkt.seq
        self.after_op()

    def after_op(self) -> None:
        s = self.sched
        s.check_invariants()
        assert self.enq == self.deq + self.dropped + s.backlog_packets, "packet count leak"
        assert self.enq_bytes == self.deq_bytes + self.drop_bytes + s.backlog_bytes, "byte count leak"
        self._weights()

    def _weights(self) -> None:
        s = self.sched
        seen = set()
        for rec in s.flows.values():
            key = id(rec)
            seen.add(key)
            w = rec.weight_q128
            st = self.watch.get(key)
            if st is None:
                st = self.watch[key] = {"rec": rec, "w": w, "t": self.now, "grad": None}
            if rec.queue_idx == NEW:
                assert w < WEIGHT_ONE or self.now == rec.arrival_time, "full weight left in NEW"
                if self.now > rec.arrival_time and st["t"] > rec.arrival_time:
                    assert w >= st["w"], f"weight fell from {st['w']} to {w}"
                w0 = initial_weight_q128(rec.initial_factor)
                assert _is_doubling_of(w, w0), f"weight {w} is not a doubling of {w0}"
            else:
                assert w == WEIGHT_ONE
                if st["grad"] is None:
                    st["grad"] = self._graduation_time(rec)
                    expect = _expected_graduation(rec, self.period_us)
                    assert st["grad"] == expect, f"graduated at {st['grad']}, expected {expect}"
            st["w"], st["t"] = w, self.now
        for key in [k for k in self.watch if k not in seen]:
            del self.watch[key]

    def _graduation_time(self, rec: FlowRecord) -> int:
        for t, fid, src, _dst, why in reversed(self.sched.moves):
            if fid == rec.flow_id and src == NEW and why == "graduate" and t >= rec.arrival_time:
                return t
        raise AssertionError(f"flow {rec.flow_id} left NEW without a graduation")


def _is_doubling_of(w: int, w0: int) -> bool:
    x = w0
    while x < WEIGHT_ONE:
        if x == w:
            return True
        x <<= 1
    return w == WEIGHT_ONE


def _expected_graduation(rec: FlowRecord, period_us: int) -> int:
    w0 = initial_weight_q128(rec.initial_factor)
    if w0 >= WEIGHT_ONE:
        return rec.arrival_time
    m = math.ceil(math.log2(WEIGHT_ONE / w0))
    return rec.arrival_time + m * period_us


def prop_scheduler(ops: list, config: Optional[dict] = None) -> Driver:
    """Order, conservation, partition and weight properties over one op list."""
    d = Driver(config)
    for op in ops:
        d.apply(op)
    # drain: everything left must come out in order
    while d.sched.backlog_packets:
        d.apply(("deq", 0))
    return d


# hysteresis -----------------------------------------------------------------

def gen_shares(rng: np.random.Generator) -> tuple:
    n = int(rng.integers(2, 9))
    raw = rng.dirichlet(np.full(n, float(rng.choice([0.5, 2.0, 20.0]))))
    alpha = float(rng.uniform(0.01, 0.45))
    return [float(x) for x in raw], alpha


def prop_intra_dead_zone(shares: list, alpha: float) -> None:
    n = len(shares)
    fair = 1.0 / n
    flagged = dict(intra_queue_examination(dict(enumerate(shares)), alpha))
    for i, s in enumerate(shares):
        dev = s - fair
        if abs(dev) < alpha - 1e-9:
            assert i not in flagged, f"share {s} inside the dead zone was moved"
        if dev > alpha + 1e-9:
            assert flagged.get(i) == +1, f"share {s} above fair+alpha not promoted"
        if dev < -alpha - 1e-9:
            assert flagged.get(i) == -1, f"share {s} below fair-alpha not demoted"


def gen_levels(rng: np.random.Generator) -> tuple:
    steps = int(rng.integers(1, 12))
    seq = []
    for _ in range(steps):
        seq.append([None if rng.random() < 0.2 else float(rng.uniform(0, 1)) for _ in range(3)])
    return seq, int(rng.integers(1, 4))


def prop_queue_dead_zone(levels_seq: list, persistence: int,
                         targets=(0.10, 0.50, 0.90)) -> None:
    streaks: dict = {}
    run_up = [0, 0, 0]
    run_down = [0, 0, 0]
    for levels in levels_seq:
        moves = queue_level_examination(levels, targets, streaks, persistence)
        moved = dict(moves)
        for i in range(1, 4):
            lv = levels[i - 1]
            up_mid = (targets[i - 1] + targets[i]) / 2 if i < 3 else None
            dn_mid = (targets[i - 2] + targets[i - 1]) / 2 if i > 1 else None
            above = lv is not None and up_mid is not None and lv > up_mid
            below = lv is not None and dn_mid is not None and lv < dn_mid
            run_up[i - 1] = run_up[i - 1] + 1 if above else 0
            run_down[i - 1] = run_down[i - 1] + 1 if below else 0
            if not above and not below:
                assert i not in moved, f"queue {i} at {lv} inside the dead zone moved"
            if i in moved:
                want = +1 if moved[i] > i else -1
                run = run_up if want > 0 else run_down
                assert run[i - 1] >= persistence, "moved before persisting"
                run[i - 1] = 0
            elif above:
                assert run_up[i - 1] < persistence, f"queue {i} persisted above midpoint without moving"
            elif below:
                assert run_down[i - 1] < persistence, f"queue {i} persisted below midpoint without moving"


# DWRR ---------------------------------------------------------------------

def gen_dwrr(rng: np.random.Generator) -> tuple:
    members = []
    for q in range(4):
        k = int(rng.integers(0 if q else 1, 4))
        for _ in range(k):
            w = int(rng.integers(1, WEIGHT_ONE + 1)) if q == NEW else WEIGHT_ONE
            members.append((q, w))
    if len({q for q, _ in members}) < 2:
        members.append((3, WEIGHT_ONE))
    sizes = [int(rng.integers(40, MTU + 1)) for _ in range(64)]
    return members, sizes, int(rng.integers(20, 600))


def prop_dwrr(members: list, sizes: list, n_serve: int) -> None:
    """Each saturated queue's bytes stay within one quantum of its weighted entitlement.

    After ``r`` complete rounds a queue with quantum ``Q`` has sent more than
    ``r*Q - max_packet`` and at most ``(r+1)*Q`` bytes; a common ``r`` must
    exist for every backlogged queue.
    """
    cfg = ConfuciusConfig(lambda_per_ms=1e-9, reclassify_period_ms=1e9, idle_timeout_ms=1e9)
    s = ConfuciusScheduler(None, cfg, record_diagnostics=False)
    s.DEFAULT_BUFFER = 1 << 62
    for fid, (q, w) in enumerate(members):
        rec = FlowRecord(fid, 0)
        rec.weight_q128 = w
        s.queues[q].add(rec)
        s.flows[fid] = rec
    per_flow = n_serve + 2
    seq = 0
    for fid in range(len(members)):
        for j in range(per_flow):
            seq += 1
            s.enqueue(Packet(fid, sizes[(fid + j) % len(sizes)], 0, seq), 0)
    served = [0, 0, 0, 0]
    owner = {fid: q for fid, (q, _) in enumerate(members)}
    for _ in range(n_serve):
        pkt = s.dequeue(0)
        served[owner[pkt.flow_id]] += pkt.size
    maxpkt = max(sizes)
    lo, hi = -math.inf, math.inf
    for vq in s.queues:
        if not vq.members:
            continue
        quantum = vq.quantum * vq.weight / WEIGHT_ONE
        b = served[vq.idx]
        lo = max(lo, b / quantum - 1)
        hi = min(hi, (b + maxpkt) / quantum)
    assert lo <= hi + 1e-9, f"served {served} has no common round count ({lo:.3f} > {hi:.3f})"


PROPERTIES = {
    "scheduler": (lambda rng: (gen_ops(rng),), prop_scheduler),
    "intra_dead_zone": (gen_shares, prop_intra_dead_zone),
    "queue_dead_zone": (gen_levels, prop_queue_dead_zone),
    "dwrr_ratio": (gen_dwrr, prop_dwrr),
}


def run_all(cases: int = 1000, seed: int = 0, config: Optional[dict] = None) -> dict:
    """Run every property on ``cases`` random cases; returns per-property failures."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, (gen, prop) in PROPERTIES.items():
        failures = []
        for i in range(cases):
            case = gen(rng)
            try:
                if name == "scheduler":
                    prop(*case, config=config)
                else:
                    prop(*case)
            except AssertionError as exc:
                failures.append(f"case {i}: {exc}")
        out[name] = {"cases": cases, "failures": failures}
    return out
