"""Scenario model, trace files, synthetic workload generators and experiment templates."""
from __future__ import annotations

import copy
import csv
import json
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .engine import US_PER_MS, CapacityProfile, ConfigurationError

# page shape: flow count quantiles and size range
PAGE_COUNT_MEDIAN = 8
PAGE_COUNT_P90 = 19
PAGE_COUNT_MAX = 250
PAGE_SIZE_MIN = 100
PAGE_SIZE_MAX = 100_000
PAGE_SIZE_MEDIAN = 15_000
PAGE_GAP_MS = 53_000.0

# deep enough to hold the largest simultaneous page burst without loss
SWEEP_BUFFER = 3_000_000
SWEEP_N = (5, 10, 20, 40, 60, 80, 100)
SWEEP_SIZE = (15_000, 150_000, 1_000_000, 3_000_000, 9_000_000)
ABRF_FACTORS = (2, 4, 8, 16)
PROBING_RTTS = (20, 40, 60, 80, 100, 120, 140, 160)

_Z90 = 1.2815515655446004


class TraceFormatError(ConfigurationError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


@dataclass
class TraceSummary:
    mean_mbps: float
    std_mbps: float
    segments: int
    declared_mean_mbps: Optional[float] = None


def _profile_stats(profile: CapacityProfile) -> tuple:
    starts = profile.starts
    if len(starts) == 1:
        return profile.rates[0] / 1e6, 0.0
    steps = np.diff(starts)
    durations = np.append(steps, steps.mean())
    rates = np.asarray(profile.rates, dtype=float) / 1e6
    mean = float(np.average(rates, weights=durations))
    std = float(np.sqrt(np.average((rates - mean) ** 2, weights=durations)))
    return mean, std


def summarize_profile(profile: CapacityProfile) -> TraceSummary:
    mean, std = _profile_stats(profile)
    return TraceSummary(mean, std, len(profile.starts))


def load_bandwidth_trace(path) -> tuple:
    """Parse a ``time_ms,capacity_mbps`` file into a profile and its summary.

    Lines starting with ``#`` are comments; ``# mean_mbps=<x>`` declares a
    summary value that is echoed back for cross-checking.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"bandwidth trace not found: {path}")
    segments = []
    declared = None
    header_seen = False
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if body.startswith("mean_mbps="):
                    try:
                        declared = float(body.split("=", 1)[1])
                    except ValueError:
                        raise TraceFormatError(path, lineno, "bad mean_mbps comment") from None
                continue
            if not header_seen:
                cols = [c.strip() for c in line.split(",")]
                if cols != ["time_ms", "capacity_mbps"]:
                    raise TraceFormatError(path, lineno, "expected header 'time_ms,capacity_mbps'")
                header_seen = True
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise TraceFormatError(path, lineno, "expected two comma-separated fields")
            try:
                t_ms, mbps = float(parts[0]), float(parts[1])
            except ValueError:
                raise TraceFormatError(path, lineno, "non-numeric field") from None
            if mbps <= 0:
                raise TraceFormatError(path, lineno, "capacity must be positive")
            if segments and t_ms * US_PER_MS <= segments[-1][0]:
                raise TraceFormatError(path, lineno, "times must be strictly increasing")
            if not segments and t_ms != 0:
                raise TraceFormatError(path, lineno, "first record must be at time 0")
            segments.append((int(round(t_ms * US_PER_MS)), int(round(mbps * 1e6))))
    if not header_seen:
        raise TraceFormatError(path, 1, "missing header line")
    if not segments:
        raise TraceFormatError(path, 2, "trace has no records")
    profile = CapacityProfile(segments)
    summary = summarize_profile(profile)
    summary.declared_mean_mbps = declared
    return profile, summary


def write_bandwidth_trace(path, profile: CapacityProfile) -> None:
    mean, _ = _profile_stats(profile)
    with Path(path).open("w") as fh:
        fh.write(f"# mean_mbps={mean:.6f}\n")
        fh.write("time_ms,capacity_mbps\n")
        for s, r in zip(profile.starts, profile.rates):
            fh.write(f"{s / US_PER_MS:g},{r / 1e6:.6f}\n")


def generate_bandwidth_trace(mean_mbps: float, duration_ms: float = 60_000.0, step_ms: float = 500.0,
                             cv: float = 0.3, seed: int = 0) -> CapacityProfile:
    """Log-normal AR(1) capacity series rescaled to the requested mean."""
    if mean_mbps <= 0 or duration_ms <= 0 or step_ms <= 0:
        raise ConfigurationError("trace mean, duration and step must be positive")
    rng = np.random.default_rng(seed)
    n = max(1, int(math.ceil(duration_ms / step_ms)))
    sigma = math.sqrt(math.log(1 + cv * cv))
    rho = 0.8
    x = np.empty(n)
    x[0] = rng.normal()
    for i in range(1, n):
        x[i] = rho * x[i - 1] + math.sqrt(1 - rho * rho) * rng.normal()
    rates = np.exp(sigma * x)
    rates = np.maximum(rates / rates.mean(), 0.05)
    rates *= mean_mbps / rates.mean()
    step_us = int(round(step_ms * US_PER_MS))
    return CapacityProfile([(i * step_us, max(1, int(round(r * 1e6)))) for i, r in enumerate(rates)])


def load_web_trace(path) -> dict:
    """Read one page: ``start_offset_ms,size_bytes`` per flow (header optional)."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"web trace not found: {path}")
    offsets, sizes = [], []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if parts == ["start_offset_ms", "size_bytes"]:
                continue
            if len(parts) != 2:
                raise TraceFormatError(path, lineno, "expected two comma-separated fields")
            try:
                off, size = float(parts[0]), int(parts[1])
            except ValueError:
                raise TraceFormatError(path, lineno, "non-numeric field") from None
            if off < 0 or size <= 0:
                raise TraceFormatError(path, lineno, "offset must be >= 0 and size > 0")
            offsets.append(off)
            sizes.append(size)
    if not sizes:
        raise TraceFormatError(path, 1, "page has no flows")
    return {"offsets_ms": offsets, "sizes": sizes}


def write_web_trace(path, page: dict) -> None:
    offsets = page.get("offsets_ms") or [0.0] * len(page["sizes"])
    with Path(path).open("w") as fh:
        fh.write("start_offset_ms,size_bytes\n")
        for off, size in zip(offsets, page["sizes"]):
            fh.write(f"{off:g},{int(size)}\n")


def page_count_sigma() -> float:
    return math.log(PAGE_COUNT_P90 / PAGE_COUNT_MEDIAN) / _Z90


def sample_flow_size(rng: np.random.Generator) -> int:
    # two log-uniform halves joined at the median
    u = rng.random()
    if u < 0.5:
        lo, hi, v = PAGE_SIZE_MIN, PAGE_SIZE_MEDIAN, u / 0.5
    else:
        lo, hi, v = PAGE_SIZE_MEDIAN, PAGE_SIZE_MAX, (u - 0.5) / 0.5
    return int(round(math.exp(math.log(lo) + v * (math.log(hi) - math.log(lo)))))


def generate_web_page(seed: int) -> dict:
    """Synthetic page: flow count and per-flow sizes, all starting together."""
    rng = np.random.default_rng(seed)
    count = rng.lognormal(math.log(PAGE_COUNT_MEDIAN), page_count_sigma())
    n = int(min(max(round(count), 1), PAGE_COUNT_MAX))
    sizes = [sample_flow_size(rng) for _ in range(n)]
    return {"offsets_ms": [0.0] * n, "sizes": sizes}


@dataclass
class HopConfig:
    capacity_mbps: Optional[float] = 25.0
    trace: Optional[str] = None
    segments: Optional[list] = None
    propagation_delay_ms: float = 20.0
    scheduler: Optional[str] = None
    managed: bool = False
    buffer_bytes: Optional[int] = None

    def profile(self, base_dir: Optional[Path] = None) -> CapacityProfile:
        if self.segments:
            return CapacityProfile([(int(round(t * US_PER_MS)), int(round(m * 1e6))) for t, m in self.segments])
        if self.trace:
            p = Path(self.trace)
            if not p.is_absolute() and base_dir is not None:
                p = base_dir / p
            return load_bandwidth_trace(p)[0]
        if self.capacity_mbps is None or self.capacity_mbps <= 0:
            raise ConfigurationError("hop needs a positive capacity, a trace or segments")
        return CapacityProfile.constant(self.capacity_mbps * 1e6)


SOURCE_TYPES = ("video", "bulk", "web", "web_series")


@dataclass
class Scenario:
    name: str = "scenario"
    duration_ms: float = 30_000.0
    seed: int = 1
    scheduler: str = "confucius"
    scheduler_config: dict = field(default_factory=dict)
    hops: list = field(default_factory=lambda: [HopConfig(managed=True)])
    ack_delay_ms: Optional[float] = None
    buffer_rtt_ms: float = 40.0
    labels: bool = True
    sources: list = field(default_factory=list)
    base_dir: Optional[str] = None

    def validate(self) -> None:
        if not self.duration_ms > 0:
            raise ConfigurationError("duration_ms must be positive")
        if not self.hops:
            raise ConfigurationError("scenario needs at least one hop")
        if sum(1 for h in self.hops if h.managed) != 1:
            raise ConfigurationError("exactly one hop must be marked managed")
        from .qdisc import SCHEDULERS
        if self.scheduler not in SCHEDULERS:
            raise ConfigurationError(f"unknown scheduler {self.scheduler!r}")
        for h in self.hops:
            if h.scheduler is not None and h.scheduler not in SCHEDULERS:
                raise ConfigurationError(f"unknown hop scheduler {h.scheduler!r}")
            if h.trace:
                p = Path(h.trace)
                if not p.is_absolute() and self.base_dir:
                    p = Path(self.base_dir) / p
                if not p.exists():
                    raise ConfigurationError(f"bandwidth trace not found: {p}")
        ids = set()
        for src in self.sources:
            kind = src.get("type")
            if kind not in SOURCE_TYPES:
                raise ConfigurationError(f"unknown source type {kind!r}")
            sid = src.get("id")
            if sid is not None:
                if sid in ids:
                    raise ConfigurationError(f"duplicate source id {sid!r}")
                ids.add(sid)
            if kind == "web" and "trace" in src:
                p = Path(src["trace"])
                if not p.is_absolute() and self.base_dir:
                    p = Path(self.base_dir) / p
                if not p.exists():
                    raise ConfigurationError(f"web trace not found: {p}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    @classmethod
    def from_dict(cls, data: dict, base_dir: Optional[str] = None) -> "Scenario":
        data = copy.deepcopy(dict(data))
        known = set(cls.__dataclass_fields__) - {"base_dir"}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown scenario keys: {sorted(unknown)}")
        hops = data.pop("hops", None)
        sc = cls(**data)
        if hops is not None:
            try:
                sc.hops = [h if isinstance(h, HopConfig) else HopConfig(**h) for h in hops]
            except TypeError as exc:
                raise ConfigurationError(f"bad hop entry: {exc}") from None
        sc.base_dir = base_dir
        return sc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "Scenario":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"scenario file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        sc = cls.from_dict(data, base_dir=str(path.parent))
        sc.validate()
        return sc

    @property
    def managed_hop(self) -> HopConfig:
        return next(h for h in self.hops if h.managed)


def _coerce(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(scenario: Scenario, overrides: list) -> Scenario:
    """Apply ``dotted.key=value`` overrides; every path must already exist."""
    data = scenario.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if isinstance(node, list):
                try:
                    node = node[int(p)]
                except (ValueError, IndexError):
                    raise ConfigurationError(f"override path {key!r} does not exist") from None
            elif isinstance(node, dict) and p in node:
                node = node[p]
            else:
                raise ConfigurationError(f"override path {key!r} does not exist")
        last = parts[-1]
        value = _coerce(raw)
        if isinstance(node, list):
            try:
                node[int(last)] = value
            except (ValueError, IndexError):
                raise ConfigurationError(f"override path {key!r} does not exist") from None
        elif isinstance(node, dict) and (last in node or node is data.get("scheduler_config")):
            node[last] = value
        else:
            raise ConfigurationError(f"override path {key!r} does not exist")
    out = Scenario.from_dict(data, base_dir=scenario.base_dir)
    out.validate()
    return out


# experiment templates --------------------------------------------------------

def _video(sid="rt", cca="COPA_LIKE", **kw) -> dict:
    d = {"type": "video", "id": sid, "cca": cca, "cca_params": {}, "start_ms": 0.0, "fps": 30}
    d.update(kw)
    return d


def _bulk(sid, cca, **kw) -> dict:
    d = {"type": "bulk", "id": sid, "cca": cca, "cca_params": {}, "start_ms": 0.0}
    d.update(kw)
    return d


RT_FLUID = {"k": 0.001, "q0_ms": 10.0}


def _website_compete(scheduler="confucius", seed=1, rt_cca="COPA_LIKE", pages=2,
                     capacity_mbps=25.0, first_page_ms=10_000.0, gap_ms=PAGE_GAP_MS, **_):
    duration = first_page_ms + (pages - 1) * gap_ms + 10_000.0
    return Scenario(
        name="website_compete", duration_ms=duration, seed=seed, scheduler=scheduler,
        hops=[HopConfig(capacity_mbps=capacity_mbps, managed=True)],
        sources=[
            _video("rt", rt_cca),
            {"type": "web_series", "id": "pages", "first_ms": first_page_ms, "gap_ms": gap_ms,
             "count": pages, "seed": seed},
        ])


def _sweep_n(scheduler="confucius", seed=1, n=10, size=15_000, capacity_mbps=25.0,
             page_ms=5_000.0, tail_ms=5_000.0, buffer_bytes=SWEEP_BUFFER, **_):
    return Scenario(
        name="sweep_n", duration_ms=page_ms + tail_ms, seed=seed, scheduler=scheduler,
        hops=[HopConfig(capacity_mbps=capacity_mbps, managed=True, buffer_bytes=buffer_bytes)],
        sources=[
            _video("rt", "FLUID", cca_params=dict(RT_FLUID)),
            {"type": "web", "id": "page", "start_ms": page_ms, "sizes": [int(size)] * int(n)},
        ])


def _sweep_size(scheduler="confucius", seed=1, size=15_000, n=5, capacity_mbps=25.0,
                page_ms=5_000.0, buffer_bytes=SWEEP_BUFFER, **_):
    # enough room for the largest transfers to finish under any policy
    tail = 5_000.0 + n * size * 8 / (capacity_mbps * 1e3) * 2
    return _sweep_n(scheduler=scheduler, seed=seed, n=n, size=size, capacity_mbps=capacity_mbps,
                    page_ms=page_ms, tail_ms=tail, buffer_bytes=buffer_bytes)


FOUR_CCAS = ("CUBIC_LIKE", "BBR_LIKE", "COPA_LIKE", "GCC_LIKE")


def _four_cca(scheduler="confucius", seed=1, duration_ms=100_000.0, capacity_mbps=25.0,
              only=None, **_):
    ccas = FOUR_CCAS if only is None else tuple(only)
    return Scenario(
        name="four_cca", duration_ms=duration_ms, seed=seed, scheduler=scheduler,
        hops=[HopConfig(capacity_mbps=capacity_mbps, managed=True)],
        sources=[_bulk(c.split("_")[0].lower(), c) for c in ccas])


def abrf_profile(capacity_mbps: float, factor: int, cut_ms: float, staged: bool,
                 stage_ms: float = 250.0) -> list:
    if not staged:
        return [[0.0, capacity_mbps], [cut_ms, capacity_mbps / factor]]
    segs = [[0.0, capacity_mbps]]
    steps = int(round(math.log2(factor)))
    for i in range(1, steps + 1):
        segs.append([cut_ms + (i - 1) * stage_ms, capacity_mbps / 2 ** i])
    return segs


def _abrf_sweep(scheduler="fifo", seed=1, factor=2, staged=False, cca="COPA_LIKE",
                capacity_mbps=25.0, cut_ms=10_000.0, tail_ms=15_000.0, **_):
    segs = abrf_profile(capacity_mbps, int(factor), cut_ms, bool(staged))
    params = dict(RT_FLUID) if cca == "FLUID" else {}
    return Scenario(
        name="abrf_sweep", duration_ms=cut_ms + tail_ms, seed=seed, scheduler=scheduler,
        hops=[HopConfig(segments=segs, managed=True)],
        sources=[_video("rt", cca, cca_params=params)])


def _probing(scheduler="confucius", seed=1, rtt_ms=40.0, capacity_mbps=25.0,
             duration_ms=30_000.0, **_):
    half = float(rtt_ms) / 2
    return Scenario(
        name="probing", duration_ms=duration_ms, seed=seed, scheduler=scheduler,
        hops=[HopConfig(capacity_mbps=capacity_mbps, propagation_delay_ms=half, managed=True)],
        ack_delay_ms=half, buffer_rtt_ms=float(rtt_ms),
        sources=[_bulk("bbr", "BBR_LIKE")])


def _multi_bottleneck(scheduler="confucius", seed=1, pages=2, capacity_mbps=25.0,
                      managed_mbps=100.0, first_page_ms=5_000.0, gap_ms=10_000.0, **_):
    duration = first_page_ms + (pages - 1) * gap_ms + 10_000.0
    return Scenario(
        name="multi_bottleneck", duration_ms=duration, seed=seed, scheduler=scheduler,
        hops=[
            HopConfig(capacity_mbps=managed_mbps, propagation_delay_ms=5.0, managed=True),
            HopConfig(capacity_mbps=capacity_mbps, propagation_delay_ms=10.0, scheduler="fifo"),
            HopConfig(capacity_mbps=managed_mbps, propagation_delay_ms=5.0, scheduler="fifo"),
        ],
        ack_delay_ms=20.0,
        sources=[
            _video("rt", "COPA_LIKE"),
            {"type": "web_series", "id": "pages", "first_ms": first_page_ms, "gap_ms": gap_ms,
             "count": pages, "seed": seed},
        ])


def _multi_video(scheduler="confucius", seed=1, videos=1, pages=2, capacity_mbps=25.0,
                 first_page_ms=5_000.0, gap_ms=10_000.0, rt_cca="COPA_LIKE", **_):
    duration = first_page_ms + (pages - 1) * gap_ms + 10_000.0
    srcs = [_video(f"rt{i}", rt_cca, start_ms=100.0 * i) for i in range(int(videos))]
    srcs.append({"type": "web_series", "id": "pages", "first_ms": first_page_ms, "gap_ms": gap_ms,
                 "count": pages, "seed": seed})
    return Scenario(
        name="multi_video", duration_ms=duration, seed=seed, scheduler=scheduler,
        hops=[HopConfig(capacity_mbps=capacity_mbps, managed=True)], sources=srcs)


TEMPLATES = {
    "website_compete": _website_compete,
    "sweep_n": _sweep_n,
    "sweep_size": _sweep_size,
    "four_cca": _four_cca,
    "abrf_sweep": _abrf_sweep,
    "probing": _probing,
    "multi_bottleneck": _multi_bottleneck,
    "multi_video": _multi_video,
}

TEMPLATE_GRIDS = {
    "website_compete": [{}],
    "sweep_n": [{"n": n} for n in SWEEP_N],
    "sweep_size": [{"size": s} for s in SWEEP_SIZE],
    "four_cca": [{}],
    "abrf_sweep": [{"factor": f, "staged": st} for st in (False, True) for f in ABRF_FACTORS],
    "probing": [{"rtt_ms": r} for r in PROBING_RTTS],
    "multi_bottleneck": [{}],
    "multi_video": [{"videos": v} for v in range(1, 6)],
}


def experiment_template(name: str, **params) -> Scenario:
    if name not in TEMPLATES:
        raise ConfigurationError(f"unknown template {name!r}; expected one of {', '.join(TEMPLATES)}")
    sc = TEMPLATES[name](**params)
    sc.validate()
    return sc


def template_grid(name: str) -> list:
    if name not in TEMPLATE_GRIDS:
        raise ConfigurationError(f"unknown template {name!r}")
    return [dict(p) for p in TEMPLATE_GRIDS[name]]
