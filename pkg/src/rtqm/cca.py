"""Simplified congestion-control models.

Each model exposes ``cwnd`` (bytes, or ``None`` for no window) and
``pacing_rate`` (bits/s, or ``None`` for unpaced), plus ``target_rate`` which
app-limited sources such as a video encoder follow.  Senders feed back one
:class:`AckSample` per acknowledged packet and call ``on_loss`` once per loss
event.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional

from .engine import MTU, US_PER_MS, US_PER_S, ConfigurationError

FLUID = "FLUID"
CUBIC_LIKE = "CUBIC_LIKE"
COPA_LIKE = "COPA_LIKE"
GCC_LIKE = "GCC_LIKE"
BBR_LIKE = "BBR_LIKE"
ALGORITHMS = (FLUID, CUBIC_LIKE, COPA_LIKE, GCC_LIKE, BBR_LIKE)

DEFAULT_FLOOR_BPS = 150_000.0
DEFAULT_CEILING_BPS = 10e9


@dataclass
class AckSample:
    now: int
    rtt_us: int
    acked_bytes: int
    send_time: int
    recv_time: int
    delivery_rate: float
    inflight: int
    app_limited: bool = False
    delivered: int = 0
    delivered_at_send: int = 0


@dataclass
class CcaState:
    """Plain-value state of a rate controller."""

    algorithm: str
    rate: float
    floor: float = DEFAULT_FLOOR_BPS
    ceiling: float = DEFAULT_CEILING_BPS
    c_scale: float = 0.0
    rtt_estimate_ms: float = 0.0
    params: dict = field(default_factory=dict)


def fluid_cca_step(state: CcaState, q_delayed: float, dt: float, k: float, q0: float) -> CcaState:
    """One explicit Euler step of ds/dt = -k (q(t - tau) - q0) * C_scale.

    ``q_delayed`` and ``q0`` are in ms, ``dt`` in ms and ``k`` in 1/ms^2.
    ``state.c_scale`` carries the capacity scale in the same unit as ``rate``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    rate = state.rate - k * (q_delayed - q0) * dt * state.c_scale
    rate = min(max(rate, state.floor), state.ceiling)
    return replace(state, rate=rate)


class CongestionControl:
    algorithm = "base"

    def __init__(self, mss: int = MTU, floor_bps: float = DEFAULT_FLOOR_BPS,
                 ceiling_bps: float = DEFAULT_CEILING_BPS):
        if floor_bps <= 0 or ceiling_bps < floor_bps:
            raise ConfigurationError("rate floor must be positive and below the ceiling")
        self.mss = mss
        self.floor = floor_bps
        self.ceiling = ceiling_bps
        self.cwnd: Optional[float] = None
        self.pacing_rate: Optional[float] = None
        self.min_rtt_us: Optional[int] = None
        self.srtt_us: Optional[float] = None

    def _clamp(self, rate: float) -> float:
        return min(max(rate, self.floor), self.ceiling)

    def _track_rtt(self, s: AckSample) -> None:
        if self.min_rtt_us is None or s.rtt_us < self.min_rtt_us:
            self.min_rtt_us = s.rtt_us
        self.srtt_us = s.rtt_us if self.srtt_us is None else 0.875 * self.srtt_us + 0.125 * s.rtt_us

    def target_rate(self) -> float:
        if self.pacing_rate is not None:
            return self._clamp(self.pacing_rate)
        rtt = self.srtt_us or 40 * US_PER_MS
        return self._clamp(self.cwnd * 8 * US_PER_S / rtt)

    def on_start(self, now: int) -> None:
        pass

    def on_ack(self, s: AckSample) -> None:
        self._track_rtt(s)

    def on_loss(self, now: int) -> None:
        pass

    def on_packets_lost(self, count: int, now: int) -> None:
        """Per-packet loss notification; loss-event reaction lives in ``on_loss``."""

    def on_timeout(self, now: int) -> None:
        self.on_loss(now)

    def describe(self) -> dict:
        return {"algorithm": self.algorithm, "cwnd": self.cwnd, "pacing_rate": self.pacing_rate}


class FluidCca(CongestionControl):
    """Rate follows the linear delay-error law of the fluid model.

    The capacity scale is the measured delivery rate of the flow, so the
    controller reacts in proportion to the service it actually receives.
    """

    algorithm = FLUID

    def __init__(self, k: float = 0.001, q0_ms: float = 10.0, initial_rate_bps: float = 2e6,
                 **kw):
        super().__init__(**kw)
        if k <= 0:
            raise ConfigurationError("k must be positive")
        self.k = k
        self.q0 = q0_ms
        self.state = CcaState(FLUID, self._clamp(initial_rate_bps), self.floor, self.ceiling)
        self.pacing_rate = self.state.rate
        self._last = None
        self._delivery = 0.0

    def on_ack(self, s: AckSample) -> None:
        self._track_rtt(s)
        if s.delivery_rate > 0:
            self._delivery = s.delivery_rate if self._delivery == 0 else 0.9 * self._delivery + 0.1 * s.delivery_rate
        if self._last is not None and s.now > self._last:
            q = (s.rtt_us - self.min_rtt_us) / US_PER_MS
            dt = (s.now - self._last) / US_PER_MS
            self.state.c_scale = self._delivery or self.state.rate
            self.state = fluid_cca_step(self.state, q, dt, self.k, self.q0)
        self._last = s.now
        self.pacing_rate = self.state.rate


class CubicCca(CongestionControl):
    """Window-based cubic growth, ack clocked and unpaced."""

    algorithm = CUBIC_LIKE
    C = 0.4

    def __init__(self, beta: float = 0.7, initial_window: int = 10, fast_convergence: bool = False, **kw):
        super().__init__(**kw)
        if not 0 < beta < 1:
            raise ConfigurationError("cubic beta must lie in (0, 1)")
        self.beta = beta
        self.cwnd = float(initial_window * self.mss)
        self.ssthresh = math.inf
        self.w_max = 0.0
        self.w_last_max = 0.0
        self.fast_convergence = fast_convergence
        self._epoch: Optional[int] = None
        self._k = 0.0
        self._origin = 0.0
        self._w_est = 0.0

    def on_ack(self, s: AckSample) -> None:
        self._track_rtt(s)
        if self.cwnd < self.ssthresh:
            self.cwnd += s.acked_bytes
            return
        mss = self.mss
        if self._epoch is None:
            self._epoch = s.now
            if self.cwnd < self.w_max:
                self._k = ((self.w_max - self.cwnd) / mss / self.C) ** (1 / 3)
                self._origin = self.w_max
            else:
                self._k = 0.0
                self._origin = self.cwnd
            self._w_est = self.cwnd
        t = (s.now - self._epoch) / US_PER_S + (self.min_rtt_us or 0) / US_PER_S
        target = self._origin + self.C * (t - self._k) ** 3 * mss
        self._w_est += 3 * (1 - self.beta) / (1 + self.beta) * s.acked_bytes * mss / self.cwnd
        if target > self.cwnd:
            self.cwnd += (target - self.cwnd) * s.acked_bytes / self.cwnd
        else:
            self.cwnd += 0.01 * mss * s.acked_bytes / self.cwnd
        self.cwnd = max(self.cwnd, self._w_est)

    def on_loss(self, now: int) -> None:
        self._epoch = None
        if self.fast_convergence and self.cwnd < self.w_last_max:
            self.w_last_max = self.cwnd
            self.w_max = self.cwnd * (1 + self.beta) / 2
        else:
            self.w_last_max = self.w_max = self.cwnd
        self.cwnd = max(self.cwnd * self.beta, 2.0 * self.mss)
        self.ssthresh = self.cwnd

    def on_timeout(self, now: int) -> None:
        self.on_loss(now)
        self.cwnd = float(self.mss)


class _WindowedMin:
    def __init__(self):
        self.samples: deque = deque()

    def add(self, t: int, v: float, window: int) -> float:
        q = self.samples
        while q and q[-1][1] >= v:
            q.pop()
        q.append((t, v))
        while q[0][0] < t - window:
            q.popleft()
        return q[0][1]


class _WindowedMax:
    def __init__(self):
        self.samples: deque = deque()

    def add(self, t: int, v: float, window: int) -> float:
        q = self.samples
        while q and q[-1][1] <= v:
            q.pop()
        q.append((t, v))
        while q[0][0] < t - window:
            q.popleft()
        return q[0][1]

    def value(self) -> float:
        return self.samples[0][1] if self.samples else 0.0


class CopaCca(CongestionControl):
    """Delay-target window controller with velocity.

    On every acknowledgement the standing queueing delay (shortest RTT over
    the last half round trip, minus the path minimum) is compared with the
    target.  The window moves by ``velocity / (delta * cwnd)`` packets per
    acknowledgement in the indicated direction, i.e. ``velocity / delta``
    packets per round trip.  Velocity doubles once the direction has held
    for three round trips and resets to one when it flips.  Packets are paced
    at twice the window rate.
    """

    algorithm = COPA_LIKE

    def __init__(self, target_ms: float = 5.0, delta: float = 0.5, initial_window: int = 10,
                 max_velocity: int = 8, **kw):
        super().__init__(**kw)
        if target_ms <= 0 or delta <= 0:
            raise ConfigurationError("copa target and delta must be positive")
        self.target_us = target_ms * US_PER_MS
        self.delta = delta
        self.cwnd = float(initial_window * self.mss)
        self.velocity = 1
        self.direction = 0
        self.same = 0
        self.max_velocity = max_velocity
        self._standing = _WindowedMin()
        self._standing_rtt = None
        self._next_check: Optional[int] = None
        self._cwnd_at_check = self.cwnd
        self.pacing_rate = None

    def on_ack(self, s: AckSample) -> None:
        self._track_rtt(s)
        self._standing_rtt = self._standing.add(s.now, s.rtt_us, int(max(self.srtt_us / 2, 1)))
        dq = self._standing_rtt - self.min_rtt_us
        step = self.velocity * self.mss * s.acked_bytes / (self.delta * self.cwnd)
        if dq < self.target_us:
            self.cwnd += step
        else:
            self.cwnd = max(self.cwnd - step, 2.0 * self.mss)
        if self._next_check is None:
            self._next_check = s.now + int(self.srtt_us)
        elif s.now >= self._next_check:
            d = 1 if self.cwnd > self._cwnd_at_check else -1
            if d == self.direction:
                self.same += 1
                if self.same >= 3:
                    self.velocity = min(self.velocity * 2, self.max_velocity)
            else:
                self.direction, self.velocity, self.same = d, 1, 0
            self._cwnd_at_check = self.cwnd
            self._next_check = s.now + int(self.srtt_us)
        self.cwnd = min(self.cwnd, self.ceiling * self._standing_rtt / 8 / US_PER_S)
        self.pacing_rate = self._clamp(2 * self.cwnd * 8 * US_PER_S / self._standing_rtt)

    def target_rate(self) -> float:
        rtt = self._standing_rtt or self.srtt_us or 40 * US_PER_MS
        return self._clamp(self.cwnd * 8 * US_PER_S / rtt)

    def on_timeout(self, now: int) -> None:
        self.cwnd = max(self.cwnd / 2, 2.0 * self.mss)
        self.velocity, self.same = 1, 0


class GccCca(CongestionControl):
    """Delay-gradient controller in the style of WebRTC congestion control.

    A least-squares trend of one-way queueing delay over recent packet
    groups is compared against an adaptive threshold.  Overuse sets the rate
    to a fraction of the measured receive rate; otherwise the rate grows
    multiplicatively, doubling quickly until the first overuse.  A separate
    loss branch cuts the rate by half the loss fraction whenever more than
    10% of the packets in a report interval were lost, which covers a full
    buffer where the delay gradient goes flat.
    """

    algorithm = GCC_LIKE
    GROUP_US = 5 * US_PER_MS
    WINDOW = 20

    def __init__(self, initial_rate_bps: float = 2e6, backoff: float = 0.85,
                 increase_per_s: float = 1.08, startup_per_s: float = 4.0, **kw):
        super().__init__(**kw)
        self.rate = self._clamp(initial_rate_bps)
        self.backoff = backoff
        self.increase_per_s = increase_per_s
        self.startup_per_s = startup_per_s
        self.startup = True
        self.state = "increase"
        self.threshold = 12.5
        self._min_owd: Optional[int] = None
        self._group_start: Optional[int] = None
        self._group_owd: list = []
        self._group_recv = 0
        self._trend: deque = deque(maxlen=self.WINDOW)
        self._smoothed = 0.0
        self._overuse_since: Optional[int] = None
        self._last_update: Optional[int] = None
        self._last_thresh_update: Optional[int] = None
        self._recv: deque = deque()
        self._recv_bytes = 0
        self._last_decrease = -10 ** 12
        self.signal = "normal"
        self.pacing_rate = self.rate
        self._report_start: Optional[int] = None
        self._acked = 0
        self._lost = 0

    REPORT_US = 200 * US_PER_MS

    def on_packets_lost(self, count: int, now: int) -> None:
        self._lost += count

    def _loss_report(self, now: int) -> None:
        if self._report_start is None:
            self._report_start = now
            return
        if now - self._report_start < self.REPORT_US:
            return
        total = self._acked + self._lost
        if total and self._lost / total > 0.1:
            self.rate = self._clamp(self.rate * (1 - 0.5 * self._lost / total))
            self.startup = False
        self._acked = self._lost = 0
        self._report_start = now

    def receive_rate(self, now_recv: int) -> float:
        window = 500 * US_PER_MS
        while self._recv and self._recv[0][0] < now_recv - window:
            self._recv_bytes -= self._recv.popleft()[1]
        span = max(now_recv - self._recv[0][0], 50 * US_PER_MS) if self._recv else window
        return self._recv_bytes * 8 * US_PER_S / span

    def on_ack(self, s: AckSample) -> None:
        self._track_rtt(s)
        self._recv.append((s.recv_time, s.acked_bytes))
        self._recv_bytes += s.acked_bytes
        owd = s.recv_time - s.send_time
        if self._min_owd is None or owd < self._min_owd:
            self._min_owd = owd
        if self._group_start is None or s.send_time - self._group_start > self.GROUP_US:
            if self._group_owd:
                self._close_group(s.now)
            self._group_start = s.send_time
            self._group_owd = []
        self._group_owd.append(owd - self._min_owd)
        self._group_recv = s.recv_time
        self._update_rate(s)
        self._acked += 1
        self._loss_report(s.now)
        self.pacing_rate = self.rate

    def _close_group(self, now: int) -> None:
        d = sum(self._group_owd) / len(self._group_owd) / US_PER_MS
        self._smoothed = 0.9 * self._smoothed + 0.1 * d if self._trend else d
        self._trend.append((self._group_recv / US_PER_MS, self._smoothed))
        if len(self._trend) < 2:
            return
        xs = [p[0] for p in self._trend]
        ys = [p[1] for p in self._trend]
        mx = sum(xs) / len(xs)
        my = sum(ys) / len(ys)
        den = sum((x - mx) ** 2 for x in xs)
        slope = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / den if den > 0 else 0.0
        m = slope * min(len(self._trend), 60) * 4.0 * 10
        if self._last_thresh_update is not None:
            dt_ms = min((now - self._last_thresh_update) / US_PER_MS, 100.0)
            gain = 0.01 if abs(m) > self.threshold else 0.00018
            if abs(m) < self.threshold + 15:
                self.threshold += gain * (abs(m) - self.threshold) * dt_ms
                self.threshold = min(max(self.threshold, 6.0), 600.0)
        self._last_thresh_update = now
        if m > self.threshold:
            if self._overuse_since is None:
                self._overuse_since = now
            if now - self._overuse_since >= 10 * US_PER_MS:
                self.signal = "overuse"
        elif m < -self.threshold:
            self._overuse_since = None
            self.signal = "underuse"
        else:
            self._overuse_since = None
            self.signal = "normal"

    def _update_rate(self, s: AckSample) -> None:
        now = s.now
        if self._last_update is None:
            self._last_update = now
            return
        dt = (now - self._last_update) / US_PER_S
        self._last_update = now
        rtt = self.srtt_us or 40 * US_PER_MS
        if self.signal == "overuse":
            if now - self._last_decrease > rtt:
                self.rate = min(self.rate, self.backoff * self.receive_rate(s.recv_time))
                self._last_decrease = now
                self.startup = False
            self.state = "hold"
        elif self.signal == "underuse":
            self.state = "hold"
        else:
            if self.state == "hold" and now - self._last_decrease > rtt:
                self.state = "increase"
            if self.state == "increase":
                factor = self.startup_per_s if self.startup else self.increase_per_s
                self.rate *= factor ** min(dt, 1.0)
                cap = 1.5 * self.receive_rate(s.recv_time) + 10 * self.mss * 8
                if self.rate > cap and not self.startup:
                    self.rate = cap
        self.rate = self._clamp(self.rate)

    def on_loss(self, now: int) -> None:
        pass


class BbrCca(CongestionControl):
    """Model-based pacing: windowed-max bandwidth, minimum RTT, gain cycling.

    Startup doubles per round until bandwidth plateaus, drain empties the
    startup queue, then an eight-phase cycle paces at 1.25, 0.75 and six
    times 1.0 the bandwidth estimate.  The window is twice the estimated
    bandwidth-delay product.  Losses are ignored and there is no periodic
    minimum-RTT probe.
    """

    algorithm = BBR_LIKE
    STARTUP_GAIN = 2.885
    CYCLE = (1.25, 0.75, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)

    def __init__(self, cwnd_gain: float = 2.0, initial_rate_bps: float = 2e6,
                 bw_window_rounds: int = 10, **kw):
        super().__init__(**kw)
        self.cwnd_gain = cwnd_gain
        self.bw_window_rounds = bw_window_rounds
        self.mode = "startup"
        self.pacing_gain = self.STARTUP_GAIN
        self._bw = _WindowedMax()
        self.btl_bw = initial_rate_bps
        self.full_bw = 0.0
        self.full_bw_count = 0
        self.round = 0
        self._next_round_delivered = 0
        self.cycle_index = 0
        self._cycle_start = 0
        self.pacing_rate = self._clamp(self.STARTUP_GAIN * initial_rate_bps)
        self.cwnd = 10.0 * self.mss

    def bdp_bytes(self) -> float:
        return self.btl_bw * (self.min_rtt_us or 40 * US_PER_MS) / 8 / US_PER_S

    def on_ack(self, s: AckSample) -> None:
        self._track_rtt(s)
        round_start = False
        if s.delivered_at_send >= self._next_round_delivered:
            self._next_round_delivered = s.delivered
            self.round += 1
            round_start = True
        if s.delivery_rate > 0 and (not s.app_limited or s.delivery_rate >= self.btl_bw):
            window = int(self.bw_window_rounds * (self.min_rtt_us or 40 * US_PER_MS))
            self.btl_bw = self._bw.add(s.now, s.delivery_rate, window)
        elif self._bw.samples:
            window = int(self.bw_window_rounds * (self.min_rtt_us or 40 * US_PER_MS))
            while len(self._bw.samples) > 1 and self._bw.samples[0][0] < s.now - window:
                self._bw.samples.popleft()
            self.btl_bw = self._bw.value()
        if self.mode == "startup" and round_start:
            if self.btl_bw >= 1.25 * self.full_bw:
                self.full_bw = self.btl_bw
                self.full_bw_count = 0
            else:
                self.full_bw_count += 1
                if self.full_bw_count >= 3:
                    self.mode = "drain"
                    self.pacing_gain = 1 / self.STARTUP_GAIN
        if self.mode == "drain" and s.inflight <= self.bdp_bytes():
            self.mode = "probe_bw"
            self.cycle_index = 0
            self._cycle_start = s.now
            self.pacing_gain = self.CYCLE[0]
        if self.mode == "probe_bw" and s.now - self._cycle_start > (self.min_rtt_us or 0):
            self.cycle_index = (self.cycle_index + 1) % len(self.CYCLE)
            self._cycle_start = s.now
            self.pacing_gain = self.CYCLE[self.cycle_index]
        self.pacing_rate = self._clamp(self.pacing_gain * self.btl_bw)
        gain = self.STARTUP_GAIN if self.mode == "startup" else self.cwnd_gain
        self.cwnd = max(gain * self.bdp_bytes(), 4.0 * self.mss)

    def target_rate(self) -> float:
        # a rate-driven encoder may not outrun what the window would admit
        rate = self.pacing_rate
        if self.srtt_us:
            rate = min(rate, self.cwnd * 8 * US_PER_S / self.srtt_us)
        return self._clamp(rate)


def make_cca(algorithm: str, **params) -> CongestionControl:
    classes = {
        FLUID: FluidCca,
        CUBIC_LIKE: CubicCca,
        COPA_LIKE: CopaCca,
        GCC_LIKE: GccCca,
        BBR_LIKE: BbrCca,
    }
    key = str(algorithm).upper()
    if key not in classes:
        raise ConfigurationError(f"unknown congestion control {algorithm!r}")
    try:
        return classes[key](**params)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for {key}: {exc}") from None
