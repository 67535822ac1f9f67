"""Build a simulation from a :class:`Scenario`, run it and collect raw results."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .cca import make_cca
from .engine import (
    REALTIME, US_PER_MS, ConfigurationError, Link, Simulation, chain_links,
    default_buffer_limit, ms,
)
from .qdisc import make_scheduler
from .sources import Sender, VideoSource, spawn_web_page
from .workload import Scenario, generate_web_page, load_web_trace


@dataclass
class RunResult:
    scenario: Scenario
    duration_us: int
    videos: dict = field(default_factory=dict)
    bulk: dict = field(default_factory=dict)
    pages: list = field(default_factory=list)
    links: list = field(default_factory=list)
    managed_index: int = 0
    queue_delays_us: list = field(default_factory=list)
    max_queue_delay_us: dict = field(default_factory=dict)
    scheduler: object = None
    events: int = 0
    wall_s: float = 0.0

    @property
    def managed_link(self) -> Link:
        return self.links[self.managed_index]

    def all_senders(self) -> list:
        out = [v.sender for v in self.videos.values()]
        out += list(self.bulk.values())
        for p in self.pages:
            out += p.flows
        return out


def build(scenario: Scenario, seed: Optional[int] = None):
    scenario.validate()
    seed = scenario.seed if seed is None else seed
    sim = Simulation()
    base = Path(scenario.base_dir) if scenario.base_dir else None
    links = []
    managed_index = 0
    for i, hop in enumerate(scenario.hops):
        profile = hop.profile(base)
        limit = hop.buffer_bytes or default_buffer_limit(profile, scenario.buffer_rtt_ms)
        if hop.managed:
            kind = scenario.scheduler
            cfg = scenario.scheduler_config
            managed_index = i
        else:
            kind = hop.scheduler or "fifo"
            cfg = {}
        sched = make_scheduler(kind, limit, cfg, seed=seed + i)
        links.append(Link(sim, profile, sched, hop.propagation_delay_ms, name=f"hop{i}"))

    def deliver(pkt, arrival):
        sim.schedule(arrival, pkt.sender.arrive, pkt)

    chain_links(sim, links, deliver)
    entry = links[0].receive
    fwd_prop = sum(h.propagation_delay_ms for h in scenario.hops)
    ack_delay = ms(scenario.ack_delay_ms if scenario.ack_delay_ms is not None else fwd_prop)

    result = RunResult(scenario, ms(scenario.duration_ms), links=links, managed_index=managed_index,
                       scheduler=links[managed_index].scheduler)
    managed = links[managed_index]

    peak = result.max_queue_delay_us

    def on_dequeue(pkt, now):
        d = now - pkt.enqueue_time
        result.queue_delays_us.append(d)
        if d > peak.get(pkt.flow_id, -1):
            peak[pkt.flow_id] = d

    managed.on_dequeue = on_dequeue
    label = scenario.labels
    page_counter = 0
    for idx, src in enumerate(scenario.sources):
        kind = src["type"]
        sid = src.get("id", f"src{idx}")
        if kind in ("video", "bulk"):
            cca = make_cca(src.get("cca", "COPA_LIKE"), **src.get("cca_params", {}))
            start = ms(src.get("start_ms", 0.0))
            stop = src.get("stop_ms")
            stop = ms(stop) if stop is not None else None
            if kind == "video":
                sender = Sender(sim, sid, cca, entry, ack_delay, REALTIME if label else None,
                                start_us=start, app_driven=True)
                max_rate = src.get("max_rate_mbps")
                video = VideoSource(sim, sender, fps=int(src.get("fps", 30)),
                                    max_rate_bps=max_rate * 1e6 if max_rate else None,
                                    start_us=start, stop_us=stop,
                                    pacing_factor=src.get("pacing_factor", 2.5))
                result.videos[sid] = video
            else:
                sender = Sender(sim, sid, cca, entry, ack_delay, None, size=src.get("size"),
                                start_us=start, stop_us=stop)
                result.bulk[sid] = sender
        elif kind == "web":
            if "trace" in src:
                p = Path(src["trace"])
                if not p.is_absolute() and base is not None:
                    p = base / p
                page = load_web_trace(p)
            else:
                page = {"sizes": src["sizes"], "offsets_ms": src.get("offsets_ms")}
            wp = spawn_web_page(sim, entry, ack_delay, len(page["sizes"]), page["sizes"],
                                src.get("start_ms", 0.0), page_id=page_counter,
                                offsets_ms=page.get("offsets_ms"), flow_prefix=f"{sid}.")
            page_counter += 1
            result.pages.append(wp)
        elif kind == "web_series":
            series_seed = int(src.get("seed", seed))
            for j in range(int(src.get("count", 1))):
                page = generate_web_page(series_seed * 1000 + j)
                start = src.get("first_ms", 10_000.0) + j * src.get("gap_ms", 53_000.0)
                wp = spawn_web_page(sim, entry, ack_delay, len(page["sizes"]), page["sizes"], start,
                                    page_id=page_counter, offsets_ms=page["offsets_ms"],
                                    flow_prefix=f"{sid}.")
                page_counter += 1
                result.pages.append(wp)
        else:
            raise ConfigurationError(f"unknown source type {kind!r}")
    if not label:
        for p in result.pages:
            for f in p.flows:
                f.app_class = None
    return sim, result


def run_scenario(scenario: Scenario, seed: Optional[int] = None) -> RunResult:
    """Run ``scenario`` to its horizon.  Identical inputs give identical results."""
    t0 = time.perf_counter()
    sim, result = build(scenario, seed)
    sim.run_until(result.duration_us)
    for link in result.links:
        link.scheduler.advance(result.duration_us)
    result.events = sim.events_fired
    result.wall_s = time.perf_counter() - t0
    return result
