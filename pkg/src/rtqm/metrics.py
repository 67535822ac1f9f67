"""Figures of merit computed from a finished run, and their file writers."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .engine import US_PER_MS, US_PER_S

STALL_THRESHOLD_MS = 190.0


class FrameDelaySeries:
    """Per-frame (generation_ms, delay_ms) pairs of one video flow."""

    def __init__(self, pairs: Iterable, fps: int = 30):
        self.pairs = [(float(t), float(d)) for t, d in pairs]
        self.fps = fps
        if fps <= 0:
            raise ValueError("fps must be positive")
        gap = 1000.0 / fps
        for (a, _), (b, _) in zip(self.pairs, self.pairs[1:]):
            # generation instants sit on integer microseconds
            if not b > a or abs((b - a) - gap) > 1e-3 + 1e-9:
                raise ValueError(f"frame times {a} and {b} are not one frame interval apart")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def interval_ms(self) -> float:
        return 1000.0 / self.fps

    def delays(self) -> np.ndarray:
        return np.array([d for _, d in self.pairs], dtype=float)


def stall_duration(series: FrameDelaySeries, threshold: float = STALL_THRESHOLD_MS) -> float:
    """Time during which the frame delay exceeds ``threshold``.

    Each frame's delay is held until the next frame is generated; the last
    frame is held for one frame interval.
    """
    pairs = series.pairs
    if not pairs:
        raise ValueError("empty frame series")
    total = 0.0
    for i, (t, d) in enumerate(pairs):
        if d > threshold:
            nxt = pairs[i + 1][0] if i + 1 < len(pairs) else t + series.interval_ms
            total += nxt - t
    return total


def max_frame_delay(series: FrameDelaySeries) -> float:
    return float(series.delays().max()) if len(series) else 0.0


def jfi(throughputs: Sequence[float]) -> float:
    x = np.asarray(throughputs, dtype=float)
    if x.size == 0 or np.any(x < 0) or not np.any(x > 0):
        raise ValueError("jfi needs non-negative throughputs, not all zero")
    x = x / x.max()  # scale-free; avoids underflow for tiny rates
    return float(x.sum() ** 2 / (x.size * np.square(x).sum()))


def flow_completion_ms(sender) -> Optional[float]:
    if sender.completion_time is None:
        return None
    return (sender.completion_time - sender.start_us) / US_PER_MS


def page_load_time(page, horizon_us: Optional[int] = None) -> tuple:
    """(plt_ms, complete).  Incomplete pages are charged up to the horizon."""
    plt = page.plt_us(horizon_us)
    return (None if plt is None else plt / US_PER_MS), page.completed()


def service_rate_series(delivery_log: Sequence, window_ms: float, t_end_ms: Optional[float] = None,
                        step_ms: Optional[float] = None) -> tuple:
    """Delivered bits per trailing window, divided by the window, in bits/s.

    ``delivery_log`` holds (time_us, bytes) pairs in time order.
    """
    if not window_ms > 0:
        raise ValueError("window must be positive")
    step_ms = window_ms if step_ms is None else step_ms
    if not step_ms > 0:
        raise ValueError("step must be positive")
    times = np.array([t for t, _ in delivery_log], dtype=np.int64)
    sizes = np.array([b for _, b in delivery_log], dtype=float)
    if t_end_ms is None:
        t_end_ms = times[-1] / US_PER_MS if times.size else window_ms
    grid = np.arange(window_ms, t_end_ms + 1e-9, step_ms)
    cum = np.concatenate([[0.0], np.cumsum(sizes)])
    hi = np.searchsorted(times, np.round(grid * US_PER_MS).astype(np.int64), side="right")
    lo = np.searchsorted(times, np.round((grid - window_ms) * US_PER_MS).astype(np.int64), side="right")
    rate = (cum[hi] - cum[lo]) * 8.0 / (window_ms / 1000.0)
    return grid, rate


def delay_quantiles(delays_us: Sequence[int], qs=(0.5, 0.9, 0.95, 0.99)) -> dict:
    if len(delays_us) == 0:
        return {}
    a = np.asarray(delays_us, dtype=float) / US_PER_MS
    out = {f"p{int(round(q * 100))}": float(np.quantile(a, q)) for q in qs}
    out["max"] = float(a.max())
    out["mean"] = float(a.mean())
    return out


@dataclass
class RunReport:
    scenario: str
    scheduler: str
    seed: int
    duration_ms: float
    stall_ms: dict = field(default_factory=dict)
    max_frame_delay_ms: dict = field(default_factory=dict)
    plt_ms: dict = field(default_factory=dict)
    incomplete_pages: list = field(default_factory=list)
    fct_ms: dict = field(default_factory=dict)
    throughput_bps: dict = field(default_factory=dict)
    jfi: Optional[float] = None
    packet_delay_quantiles: dict = field(default_factory=dict)
    queue_moves: int = 0

    @property
    def total_stall_ms(self) -> float:
        return float(sum(self.stall_ms.values()))

    @property
    def mean_plt_ms(self) -> Optional[float]:
        v = list(self.plt_ms.values())
        return float(np.mean(v)) if v else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_stall_ms"] = self.total_stall_ms
        d["mean_plt_ms"] = self.mean_plt_ms
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _throughput(sender, t0_us: int, t1_us: int) -> float:
    span = max(t1_us - t0_us, 1)
    got = sum(b for t, b in sender.delivery_log if t0_us <= t <= t1_us)
    return got * 8.0 * US_PER_S / span


def build_report(result, threshold: float = STALL_THRESHOLD_MS) -> RunReport:
    sc = result.scenario
    horizon = result.duration_us
    rep = RunReport(sc.name, result.scheduler.name, sc.seed, sc.duration_ms)
    for vid, video in result.videos.items():
        series = FrameDelaySeries(video.frame_delays(horizon), video.fps)
        if len(series):
            rep.stall_ms[vid] = stall_duration(series, threshold)
            rep.max_frame_delay_ms[vid] = max_frame_delay(series)
        else:
            rep.stall_ms[vid] = 0.0
            rep.max_frame_delay_ms[vid] = 0.0
    for page in result.pages:
        plt, done = page_load_time(page, horizon)
        rep.plt_ms[str(page.page_id)] = plt
        if not done:
            rep.incomplete_pages.append(page.page_id)
        for f in page.flows:
            fct = flow_completion_ms(f)
            if fct is not None:
                rep.fct_ms[str(f.flow_id)] = fct
    long_flows = {}
    for vid, video in result.videos.items():
        long_flows[vid] = video.sender
    long_flows.update(result.bulk)
    for fid, s in long_flows.items():
        end = horizon if s.stop_us is None else min(horizon, s.stop_us)
        rep.throughput_bps[fid] = _throughput(s, s.start_us, end)
        if s.size is not None and s.completion_time is not None:
            rep.fct_ms[fid] = flow_completion_ms(s)
    bulk = [rep.throughput_bps[f] for f in result.bulk] or list(rep.throughput_bps.values())
    if bulk and any(x > 0 for x in bulk):
        rep.jfi = jfi(bulk)
    rep.packet_delay_quantiles = delay_quantiles(result.queue_delays_us)
    rep.queue_moves = len(getattr(result.scheduler, "moves", ()))
    return rep


def _csv_text(header: Sequence[str], rows: Iterable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def frames_csv(result) -> str:
    rows = []
    for vid, video in result.videos.items():
        for f in video.frames:
            d = f.delay_us()
            rows.append([vid, f.frame_id, f"{f.generation_time / US_PER_MS:.3f}", f.size,
                         "" if d is None else f"{d / US_PER_MS:.3f}"])
    return _csv_text(["flow_id", "frame_id", "generation_ms", "size_bytes", "delay_ms"], rows)


def flows_csv(result) -> str:
    rows = []

    def row(kind, page, s):
        fct = flow_completion_ms(s)
        rows.append([s.flow_id, kind, "" if page is None else page, "" if s.size is None else s.size,
                     f"{s.start_us / US_PER_MS:.3f}", s.bytes_received,
                     "" if fct is None else f"{fct:.3f}", s.retransmissions, s.timeouts])

    for vid, video in result.videos.items():
        row("video", None, video.sender)
    for fid, s in result.bulk.items():
        row("bulk", None, s)
    for page in result.pages:
        for s in page.flows:
            row("web", page.page_id, s)
    return _csv_text(["flow_id", "kind", "page_id", "size_bytes", "start_ms", "bytes_received",
                      "fct_ms", "retransmissions", "timeouts"], rows)


def rates_csv(result, window_ms: float = 100.0) -> str:
    rows = []
    end = result.duration_us / US_PER_MS
    senders = [v.sender for v in result.videos.values()] + list(result.bulk.values())
    for s in senders:
        t, r = service_rate_series(s.delivery_log, window_ms, end)
        rows.extend([s.flow_id, f"{a:.1f}", f"{b:.1f}"] for a, b in zip(t, r))
    return _csv_text(["flow_id", "t_ms", "rate_bps"], rows)


def write_outputs(result, report: RunReport, out_dir) -> Path:
    out = Path(out_dir)
    atomic_write(out / "report.json", report.to_json() + "\n")
    atomic_write(out / "frames.csv", frames_csv(result))
    atomic_write(out / "flows.csv", flows_csv(result))
    atomic_write(out / "rates.csv", rates_csv(result))
    return out
