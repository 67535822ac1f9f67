"""Fluid model of a real-time flow facing a burst of new flows.

Units are fixed internally: time in ms, capacity in bits/ms, sizes in bytes,
responsiveness ``k`` in 1/ms^2 and the weight decay ``lam`` in 1/ms.  The
closed forms give the worst-case queueing delay of the real-time flow under
each policy; :func:`integrate_fluid` solves the underlying delay differential
equation numerically and serves as their oracle.
"""
from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

FQ = "FQ"
FIFO = "FIFO"
CBQ = "CBQ"
CONFUCIUS = "CONFUCIUS"
POLICIES = (FQ, FIFO, CBQ, CONFUCIUS)

LOG2E = math.log2(math.e)


class FluidWarning(UserWarning):
    """Parameters sit outside the regime where the closed forms are accurate."""


@dataclass(frozen=True)
class FluidParams:
    k: float = 0.001
    q0: float = 10.0
    tau: float = 40.0
    lam: float = 0.004
    C: float = 25_000.0
    N: int = 9
    B: float = 15_000.0
    B0: float = 15_000.0

    def __post_init__(self):
        for name in ("k", "q0", "tau", "lam", "C", "B", "B0"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive finite number, got {v!r}")
        if not isinstance(self.N, int) or self.N < 0:
            raise ValueError(f"N must be a non-negative integer, got {self.N!r}")

    def check_regime(self) -> list:
        """Return (and emit) warnings for parameters outside the small-delay regime."""
        out = []
        if self.tau * math.sqrt(self.k) > 0.3:
            out.append(f"tau*sqrt(k) = {self.tau * math.sqrt(self.k):.3f} exceeds 0.3")
        if self.lam > 0.02:
            out.append(f"lam = {self.lam} exceeds 0.02, series terms lose accuracy")
        for msg in out:
            warnings.warn(msg, FluidWarning, stacklevel=2)
        return out

    def replace(self, **kw) -> "FluidParams":
        d = asdict(self)
        d.update(kw)
        return FluidParams(**d)


@dataclass(frozen=True)
class PolicyBound:
    policy: str
    q_max: float
    fct_delta_vs_fq: float
    flag: str


def _cbq_core(p: FluidParams) -> float:
    return 2.0 / 3.0 * math.sqrt(2.0 / p.k) + p.q0 + p.tau


def qmax_fq(p: FluidParams) -> float:
    return p.N * _cbq_core(p)


def qmax_cbq(p: FluidParams) -> float:
    return _cbq_core(p)


def qmax_fifo(p: FluidParams) -> float:
    """Lower bound; the burst enters in bits so that B0/(q0*C) is dimensionless."""
    return (p.N * p.B0 * 8.0 / (p.q0 * p.C) + 1.0) * _cbq_core(p)


def _confucius_terms(p: FluidParams):
    k, q0, tau = p.k, p.q0, p.tau
    rk = math.sqrt(k)
    f0 = 2 * q0 + 6 * tau + 8 / (2 * rk)
    f1 = 10 / (3 * k) + 2 * q0 * tau + 2 * tau ** 2 + 4 * q0 / rk + 16 * tau / (3 * rk)
    f2 = (4 * q0 / k + 6 * tau / k + q0 * tau ** 2 + tau ** 3
          + 6 * q0 * tau / rk + 11 * tau ** 2 / rk)
    return f0, f1, f2


def qmax_confucius_series(p: FluidParams) -> float:
    if p.lam > 0.02:
        warnings.warn(f"lam = {p.lam} is outside the series radius", FluidWarning, stacklevel=2)
    f0, f1, f2 = _confucius_terms(p)
    return f0 + f1 * p.lam + f2 * p.lam ** 2


def qmax_confucius_simplified(p: FluidParams) -> float:
    lam, k = p.lam, p.k
    return 6 * p.q0 + 15 * p.tau + 8 * lam / k + (10 * p.q0 + 15 * p.tau) * lam ** 2 / k


def t0_root(p: FluidParams) -> float:
    """Time after the feedback delay at which the sending rate first reaches zero."""
    lam, k, C = p.lam, p.k, p.C
    a = C * (k / 2.0) / (lam ** 2 + k * math.exp(lam * p.tau))
    b = C - a
    if b <= 0:
        raise ValueError("degenerate parameters: A >= C")
    return (-lam * a + math.sqrt((lam * a) ** 2 + 2 * b * k * (a + b))) / (b * k)


def fct_delta(policy: str, p: FluidParams) -> float:
    """Extra completion time of a new flow relative to fair queueing, in ms."""
    policy = _policy(policy)
    if policy in (FQ, FIFO):
        # FIFO finishes no later than FQ; reported as zero and flagged
        return 0.0
    if policy == CBQ:
        return max(p.N - 1, 0) * p.B * 8.0 / p.C
    n = p.N
    if n < 1:
        return 0.0
    return (0.5 - math.log2((n + 1) / 2) / n - 1 / (2 * n)) / p.lam


def fct_delta_bound(p: FluidParams) -> float:
    return LOG2E / p.lam


def fit_responsiveness(probe_period_ms: float) -> float:
    if not probe_period_ms > 0:
        raise ValueError("probe period must be positive")
    return (2 * math.pi / probe_period_ms) ** 2


_FLAGS = {FQ: "approx", CBQ: "approx", FIFO: "lower", CONFUCIUS: "upper"}


def qmax_closed(policy: str, p: FluidParams) -> float:
    policy = _policy(policy)
    if policy == FQ:
        return qmax_fq(p)
    if policy == FIFO:
        return qmax_fifo(p)
    if policy == CBQ:
        return qmax_cbq(p)
    return qmax_confucius_simplified(p)


def policy_bound(policy: str, p: FluidParams) -> PolicyBound:
    policy = _policy(policy)
    return PolicyBound(policy, qmax_closed(policy, p), fct_delta(policy, p), _FLAGS[policy])


def _policy(policy: str) -> str:
    up = str(policy).upper()
    if up not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    return up


def service_rate(policy: str, p: FluidParams, t: float) -> float:
    """Bandwidth left to the real-time flow at time ``t`` (bits/ms)."""
    C, N = p.C, p.N
    if policy == FQ:
        return C / (N + 1)
    if policy == CBQ:
        return C / 2 if N > 0 else C
    if policy == FIFO:
        base = p.q0 * C
        return C * base / (base + N * p.B0 * 8.0)
    if N == 0:
        return C
    return max(C / 2 * 2.0 ** (-p.lam * t), C / (N + 1))


def max_step(p: FluidParams) -> float:
    return min(p.tau / 10.0, 0.01 / math.sqrt(p.k))


def default_horizon(p: FluidParams) -> float:
    return 8 * math.sqrt(2 / p.k) + 4 * p.tau + 3000.0


@dataclass
class FluidTrace:
    policy: str
    t: np.ndarray
    s: np.ndarray
    p: np.ndarray
    q: np.ndarray
    r: np.ndarray

    @property
    def q_max(self) -> float:
        return float(self.q.max())


def integrate_fluid(p: FluidParams, policy: str, t_end: float | None = None,
                    dt: float | None = None) -> FluidTrace:
    """Explicit Euler integration of the delayed rate law.

    The sender's rate ``s`` follows ds/dt = -k (q(t - tau) - q0) r, where
    ``r`` is the policy's service rate, so the controller's capacity scale is
    the bandwidth it actually receives.  Backlog ``p`` (bits) integrates
    s - r and the queueing delay is q = p / r.  Before time zero the system
    rests at its equilibrium s = C, p = q0 C.
    """
    policy = _policy(policy)
    limit = max_step(p)
    dt = limit / 2 if dt is None else dt
    if not dt > 0 or dt > limit * (1 + 1e-12):
        raise ValueError(f"dt={dt} ms is too coarse; it must not exceed {limit:.4g} ms")
    t_end = default_horizon(p) if t_end is None else t_end
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    n = int(math.ceil(t_end / dt)) + 1
    lag = max(1, int(round(p.tau / dt)))
    k, q0 = p.k, p.q0
    s = p.C
    backlog = q0 * p.C
    history = deque([0.0] * lag, maxlen=lag)
    ts, ss, ps, qs, rs = (np.empty(n) for _ in range(5))
    for i in range(n):
        t = i * dt
        r = service_rate(policy, p, t)
        ts[i], ss[i], ps[i], rs[i] = t, s, backlog, r
        qs[i] = backlog / r
        delayed = history[0]
        history.append(backlog - q0 * r)
        s = max(s - k * delayed * dt, 0.0)
        backlog = max(backlog + (s - r) * dt, 0.0)
    return FluidTrace(policy, ts, ss, ps, qs, rs)


PARAM_KEYS = {
    "k": ("k", float), "q0": ("q0", float), "tau": ("tau", float), "lambda": ("lam", float),
    "lam": ("lam", float), "N": ("N", int), "B": ("B", float), "B0": ("B0", float),
}


def parse_param_file(text: str) -> tuple:
    """Parse ``key=value`` lines into (FluidParams, options).

    Capacity is given as ``C_mbps`` (converted to bits/ms) or ``C`` in bits/ms.
    ``t_end`` and ``dt`` are integrator options.  ``#`` starts a comment.
    """
    kw: dict = {}
    opts: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (x.strip() for x in line.split("=", 1))
        try:
            if key in PARAM_KEYS:
                name, conv = PARAM_KEYS[key]
                kw[name] = conv(value)
            elif key == "C_mbps":
                kw["C"] = float(value) * 1000.0
            elif key == "C":
                kw["C"] = float(value)
            elif key in ("t_end", "dt"):
                opts[key] = float(value)
            else:
                raise ValueError(f"unknown parameter {key!r}")
        except ValueError as e:
            raise ValueError(f"line {lineno}: {e}") from None
    return FluidParams(**kw), opts


def analyze_rows(p: FluidParams, t_end: float | None = None, dt: float | None = None) -> list:
    rows = []
    for policy in POLICIES:
        b = policy_bound(policy, p)
        integrated = integrate_fluid(p, policy, t_end, dt).q_max
        rows.append({
            "policy": policy,
            "q_max_closed_ms": b.q_max,
            "q_max_integrated_ms": integrated,
            "fct_delta_ms": b.fct_delta_vs_fq,
            "bound_flag": b.flag,
        })
    return rows
