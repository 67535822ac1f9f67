"""Acceptance checks run by ``rtqm validate`` and by the acceptance tests.

Every check returns a :class:`CheckResult`.  Simulation runs are described by
small JSON-able specs so they can be farmed out to worker processes, cached
within one suite run and replayed for the determinism check.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import fluid
from .engine import US_PER_MS, US_PER_S
from .metrics import FrameDelaySeries, build_report, flows_csv, frames_csv, stall_duration
from .runner import run_scenario
from .workload import (
    ABRF_FACTORS, PROBING_RTTS, SWEEP_N, SWEEP_SIZE, experiment_template,
)

BUDGET_S = 15 * 60
FRAME_MS = 1000.0 / 30


@dataclass
class CheckResult:
    cid: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    data: dict = field(default_factory=dict)

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.cid:>2} {self.name}: {self.detail} ({self.seconds:.1f}s)"


class Context:
    """Settings and run cache shared by the checks of one suite run.

    ``confucius`` holds scheduler-config overrides applied to every Confucius
    run; a ``lambda_per_ms`` entry also replaces the fluid-model lambda.
    """

    def __init__(self, jobs: Optional[int] = None, confucius: Optional[dict] = None,
                 log: Optional[Callable[[str], None]] = None):
        self.jobs = max(1, jobs or os.cpu_count() or 1)
        self.confucius = dict(confucius or {})
        self.log = log or (lambda msg: None)
        self.cache: dict = {}
        self.started = time.perf_counter()

    @property
    def lam(self) -> float:
        return float(self.confucius.get("lambda_per_ms", 0.004))

    def spec(self, template: str, extract: str, **params) -> dict:
        return {"template": template, "params": params, "extract": extract,
                "confucius": self.confucius, "labels": params.pop("labels", True)}

    def run(self, specs: list) -> list:
        """Run specs (cached by content) and return their extracted summaries."""
        keys = [_key(s) for s in specs]
        todo = [(k, s) for k, s in dict(zip(keys, specs)).items() if k not in self.cache]
        if todo:
            self.log(f"  running {len(todo)} simulation(s)")
            for (k, _), out in zip(todo, self._map([s for _, s in todo])):
                self.cache[k] = out
        return [self.cache[k] for k in keys]

    def _map(self, specs: list) -> list:
        if self.jobs == 1 or len(specs) == 1:
            return [run_spec(s) for s in specs]
        with ProcessPoolExecutor(max_workers=min(self.jobs, len(specs))) as pool:
            return list(pool.map(run_spec, specs))


def _key(spec: dict) -> str:
    return json.dumps(spec, sort_keys=True)


def build_spec_scenario(spec: dict):
    sc = experiment_template(spec["template"], **spec["params"])
    sc.labels = spec.get("labels", True)
    if sc.scheduler == "confucius" and spec.get("confucius"):
        sc.scheduler_config = {**sc.scheduler_config, **spec["confucius"]}
    return sc


def run_spec(spec: dict) -> dict:
    """Worker entry point: run one spec and reduce it to plain data."""
    result = run_scenario(build_spec_scenario(spec))
    report = build_report(result)
    out = EXTRACTORS[spec["extract"]](result, report)
    out["digest"] = run_digest(result, report)
    return out


def run_digest(result, report) -> str:
    h = hashlib.sha256()
    h.update(report.to_json().encode())
    h.update(frames_csv(result).encode())
    h.update(flows_csv(result).encode())
    h.update(repr(getattr(result.scheduler, "moves", [])).encode())
    return h.hexdigest()


# extractors: RunResult -> small dict ----------------------------------------

def _ex_report(result, report) -> dict:
    return {"report": report.to_dict()}


def _ex_sweep(result, report) -> dict:
    page = [v for k, v in report.fct_ms.items() if k.startswith("page")]
    return {
        "stall_ms": report.total_stall_ms,
        "rt_qmax_ms": result.max_queue_delay_us.get("rt", 0) / US_PER_MS,
        "page_fct_ms": float(np.mean(page)) if page else None,
        "page_flows": len(page),
        "incomplete": list(report.incomplete_pages),
    }


def _ex_abrf(result, report) -> dict:
    cut = result.scenario.hops[0].segments[1][0]
    video = result.videos["rt"]
    after = [p for p in video.frame_delays(result.duration_us) if p[0] >= cut]
    return {"stall_ms": stall_duration(FrameDelaySeries(after, video.fps)) if after else 0.0}


def _ex_four(result, report) -> dict:
    bins = {fid: {str(k): v for k, v in s.qdelay_bins.items()} for fid, s in result.bulk.items()}
    moves = [list(m) for m in getattr(result.scheduler, "moves", [])]
    return {"jfi": report.jfi, "throughput_bps": report.throughput_bps, "moves": moves,
            "qdelay_bins": bins, "duration_ms": result.scenario.duration_ms}


def _ex_solo(result, report) -> dict:
    (s,) = result.bulk.values()
    return {"mean_qdelay_ms": s.queue_delay_sum / max(s.rtt_samples, 1) / US_PER_MS}


def _ex_moves(result, report) -> dict:
    return {"moves": [list(m) for m in getattr(result.scheduler, "moves", [])]}


EXTRACTORS = {
    "report": _ex_report, "sweep": _ex_sweep, "abrf": _ex_abrf, "four": _ex_four,
    "solo": _ex_solo, "moves": _ex_moves,
}


# 1-3: closed forms ----------------------------------------------------------

FLUID_GRID = [dict(k=k, q0=q0, tau=tau, N=n)
              for k in (0.0004, 0.001) for q0 in (1.0, 5.0, 10.0)
              for tau in (20.0, 40.0) for n in (2, 9, 50)]


def check_fluid_oracle(ctx: Context) -> CheckResult:
    cells = bad_err = bad_dir = 0
    worst = (0.0, None)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", fluid.FluidWarning)
        for g in FLUID_GRID:
            p = fluid.FluidParams(lam=ctx.lam, **g)
            for policy in fluid.POLICIES:
                closed = fluid.qmax_closed(policy, p)
                integ = fluid.integrate_fluid(p, policy).q_max
                cells += 1
                err = abs(closed - integ) / integ
                if err > worst[0]:
                    worst = (err, f"{policy} {g}")
                if err > 0.25:
                    bad_err += 1
                if policy == fluid.FIFO and closed > integ:
                    bad_dir += 1
                if policy == fluid.CONFUCIUS and integ > closed:
                    bad_dir += 1
    ok = bad_err == 0 and bad_dir == 0
    detail = (f"{cells} cells, {bad_err} beyond 25%, {bad_dir} bound-direction violations; "
              f"worst {worst[0]:.0%} at {worst[1]}")
    return CheckResult(1, "fluid oracle agreement", ok, detail,
                       data={"cells": cells, "beyond_tolerance": bad_err, "direction": bad_dir})


def check_copa_qmax(ctx: Context) -> CheckResult:
    lo, hi = 640 * 0.9, 640 * 1.1
    vals = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", fluid.FluidWarning)
        for q0 in (1.0, 2.0):
            p = fluid.FluidParams(k=0.001, tau=40.0, q0=q0, lam=ctx.lam)
            vals[f"series q0={q0:g}"] = fluid.qmax_confucius_series(p)
            vals[f"simplified q0={q0:g}"] = fluid.qmax_confucius_simplified(p)
    ok = all(lo <= v <= hi for v in vals.values())
    detail = ", ".join(f"{k} {v:.1f}" for k, v in vals.items()) + f" (need [{lo:.0f}, {hi:.0f}])"
    return CheckResult(2, "Copa-like q_max near 640 ms", ok, detail, data=vals)


def check_responsiveness(ctx: Context) -> CheckResult:
    pairs = [(5 * 40.0, 0.001), (8 * 40.0, 0.0004)]
    got = [(fluid.fit_responsiveness(t), ref) for t, ref in pairs]
    errs = [abs(k - ref) / ref for k, ref in got]
    ok = all(e <= 0.02 for e in errs)
    detail = ", ".join(f"k({t:g} ms)={k:.6f} vs {ref} ({e:.1%})" for (t, _), (k, ref), e in zip(pairs, got, errs))
    return CheckResult(3, "responsiveness fit", ok, detail, data={"errors": errs})


# 4-6: scaling, FCT and capacity cuts ----------------------------------------

SCALING_N = tuple(sorted(set(SWEEP_N) | {50}))


def check_scaling(ctx: Context) -> CheckResult:
    specs = {(s, n): ctx.spec("sweep_n", "sweep", scheduler=s, n=n)
             for s in ("fq", "confucius") for n in SCALING_N}
    res = dict(zip(specs, ctx.run(list(specs.values()))))
    fq_stall = [res["fq", n]["stall_ms"] for n in SCALING_N]
    monotone = all(b >= a for a, b in zip(fq_stall, fq_stall[1:]))
    ratio = res["fq", 50]["rt_qmax_ms"] / max(res["fq", 10]["rt_qmax_ms"], 1e-9)
    conf = [res["confucius", n]["stall_ms"] for n in SCALING_N]
    spread = max(conf) - min(conf)
    allowed = max(0.10 * max(conf), FRAME_MS)
    ok = monotone and 3.5 <= ratio <= 6.5 and spread <= allowed
    detail = (f"FQ stall {['%.0f' % x for x in fq_stall]} monotone={monotone}, "
              f"q_max ratio 50/10 = {ratio:.2f}; Confucius stall spread {spread:.0f} ms "
              f"(allowed {allowed:.0f})")
    return CheckResult(4, "scaling with page size N", ok, detail,
                       data={"fq_stall": fq_stall, "ratio": ratio, "confucius_stall": conf})


def check_fct(ctx: Context) -> CheckResult:
    bound = fluid.LOG2E / ctx.lam
    cells = [("sweep_n", "n", v) for v in SWEEP_N] + [("sweep_size", "size", v) for v in SWEEP_SIZE]
    specs = {}
    for tpl, key, v in cells:
        for s in ("confucius", "fq"):
            specs[tpl, v, s] = ctx.spec(tpl, "sweep", scheduler=s, **{key: v})
    res = dict(zip(specs, ctx.run(list(specs.values()))))
    fails, rows = [], []
    for tpl, key, v in cells:
        a, b = res[tpl, v, "confucius"], res[tpl, v, "fq"]
        if a["page_fct_ms"] is None or b["page_fct_ms"] is None or a["incomplete"] or b["incomplete"]:
            fails.append(f"{tpl} {key}={v}: page incomplete")
            continue
        delta = a["page_fct_ms"] - b["page_fct_ms"]
        rel = delta / b["page_fct_ms"]
        rows.append((tpl, v, delta, rel))
        if delta > bound:
            fails.append(f"{tpl} {key}={v}: +{delta:.0f} ms")
        if tpl == "sweep_size" and v >= 1_000_000 and rel > 0.10:
            fails.append(f"{tpl} size={v}: +{rel:.1%}")
    worst = max((r[2] for r in rows), default=float("nan"))
    detail = f"bound {bound:.0f} ms, worst delta {worst:.0f} ms" + (f"; {fails}" if fails else "")
    return CheckResult(5, "FCT penalty bound", not fails, detail, data={"rows": rows})


ABRF_CCAS = ("COPA_LIKE", "GCC_LIKE", "BBR_LIKE", "FLUID")


def check_abrf(ctx: Context) -> CheckResult:
    specs = {(c, f, st): ctx.spec("abrf_sweep", "abrf", cca=c, factor=f, staged=st)
             for c in ABRF_CCAS for st in (False, True) for f in ABRF_FACTORS}
    res = {k: v["stall_ms"] for k, v in zip(specs, ctx.run(list(specs.values())))}
    superlinear, staged_ok, parts = 0, 0, []
    for c in ABRF_CCAS:
        y2, y16 = res[c, 2, False], res[c, 16, False]
        ratio = y16 / y2 if y2 > 0 else (math.inf if y16 > 0 else 0.0)
        superlinear += ratio > 8
        s2, s16 = res[c, 2, True], res[c, 16, True]
        env = 2.5 * math.log2(16) / math.log2(2) * s2
        staged_ok += s16 <= env
        parts.append(f"{c}: one-shot {y2:.0f}->{y16:.0f} (x{ratio:.1f}), staged {s2:.0f}->{s16:.0f} "
                     f"(envelope {env:.0f})")
    ok = superlinear >= 3 and staged_ok >= 3
    detail = f"super-linear {superlinear}/4, staged within envelope {staged_ok}/4; " + "; ".join(parts)
    return CheckResult(6, "capacity-cut stall growth", ok, detail,
                       data={f"{c}|{f}|{st}": v for (c, f, st), v in res.items()})


# 7-8: four CCAs sharing the link --------------------------------------------

TARGET_QUEUES = {"copa": 1, "gcc": 1, "bbr": 2, "cubic": 3}
DELAY_CCAS = {"copa": "COPA_LIKE", "gcc": "GCC_LIKE"}
CONVERGE_MS = 10_000.0
WINDOW_S = 10


def assignment_timeline(moves: list) -> list:
    """[(t_ms, {flow: queue})] after each instant that changes the assignment."""
    state: dict = {}
    out = []
    for t_us, fid, _src, dst, _why in moves:
        state[fid] = dst
        t_ms = t_us / US_PER_MS
        if out and out[-1][0] == t_ms:
            out[-1] = (t_ms, dict(state))
        else:
            out.append((t_ms, dict(state)))
    return out


def convergence(moves: list, target: dict, end_ms: float) -> tuple:
    """(first time the target holds, fraction of the remaining time it holds)."""
    tl = assignment_timeline(moves)
    first = None
    held = 0.0
    for i, (t, st) in enumerate(tl):
        nxt = tl[i + 1][0] if i + 1 < len(tl) else end_ms
        good = all(st.get(f) == q for f, q in target.items())
        if good and first is None:
            first = t
        if good and first is not None:
            held += max(0.0, min(nxt, end_ms) - t)
    if first is None or first >= end_ms:
        return None, 0.0
    return first, held / (end_ms - first)


def window_means(bins: dict, duration_s: int, width: int = WINDOW_S, start: int = 0) -> list:
    out = []
    for a in range(start, duration_s, width):
        s = sum(bins.get(str(i), [0, 0])[0] for i in range(a, a + width))
        n = sum(bins.get(str(i), [0, 0])[1] for i in range(a, a + width))
        out.append(s / n / US_PER_MS if n else None)
    return out


def _four(ctx: Context, scheduler: str) -> dict:
    return ctx.run([ctx.spec("four_cca", "four", scheduler=scheduler)])[0]


def check_classification(ctx: Context) -> CheckResult:
    run = _four(ctx, "confucius")
    solo = dict(zip(DELAY_CCAS, ctx.run([
        ctx.spec("four_cca", "solo", only=[c], duration_ms=30_000.0) for c in DELAY_CCAS.values()])))
    end = run["duration_ms"]
    first, frac = convergence(run["moves"], TARGET_QUEUES, end)
    dur_s = int(end // 1000)
    delay_ok, parts = True, []
    for fid in DELAY_CCAS:
        ref = solo[fid]["mean_qdelay_ms"]
        # windows start once classification has had its 10 s
        wins = window_means(run["qdelay_bins"][fid], dur_s, start=int(CONVERGE_MS // 1000))
        worst = max((w for w in wins if w is not None), default=0.0)
        if worst >= 2 * ref:
            delay_ok = False
        parts.append(f"{fid} worst window {worst:.2f} ms vs solo {ref:.2f} ms")
    conv_ok = first is not None and first <= CONVERGE_MS and frac >= 0.90
    ok = conv_ok and delay_ok
    conv = "never" if first is None else f"at {first / 1000:.1f} s, held {frac:.1%}"
    detail = f"target assignment {conv}; " + "; ".join(parts)
    return CheckResult(7, "classification convergence", ok, detail,
                       data={"first_ms": first, "held": frac})


def check_fairness(ctx: Context) -> CheckResult:
    conf, fq = _four(ctx, "confucius"), _four(ctx, "fq")
    ok = conf["jfi"] is not None and fq["jfi"] is not None and conf["jfi"] >= 0.95 and fq["jfi"] >= 0.99
    detail = f"JFI Confucius {conf['jfi']:.3f} (>=0.95), FQ {fq['jfi']:.3f} (>=0.99)"
    return CheckResult(8, "fairness", ok, detail, data={"confucius": conf["jfi"], "fq": fq["jfi"]})


# 9: labels ---------------------------------------------------------------

def _label_specs(ctx: Context, labels: bool) -> list:
    out = []
    for seed in range(1, 11):
        if seed % 2:
            out.append(ctx.spec("website_compete", "report", seed=seed, pages=1,
                                first_page_ms=5_000.0, labels=labels))
        else:
            out.append(ctx.spec("multi_video", "report", seed=seed, videos=2, pages=1,
                                labels=labels))
    return out


def check_labels(ctx: Context) -> CheckResult:
    with_l = ctx.run(_label_specs(ctx, True))
    without = ctx.run(_label_specs(ctx, False))
    same = [a["digest"] == b["digest"] for a, b in zip(with_l, without)]
    ok = all(same)
    return CheckResult(9, "label blindness", ok, f"{sum(same)}/10 scenarios byte-identical")


# 10: structural properties --------------------------------------------------

def check_properties(ctx: Context) -> CheckResult:
    from . import properties
    t0 = time.perf_counter()
    counts = properties.run_all(cases=1000, seed=12345, config=ctx.confucius)
    failed = {k: v for k, v in counts.items() if v["failures"]}
    detail = ", ".join(f"{k} {v['cases'] - len(v['failures'])}/{v['cases']}" for k, v in counts.items())
    if failed:
        first = next(iter(failed.items()))
        detail += f"; first failure in {first[0]}: {first[1]['failures'][0]}"
    ctx.log(f"  properties took {time.perf_counter() - t0:.1f}s")
    return CheckResult(10, "structural properties", not failed, detail,
                       data={k: len(v["failures"]) for k, v in counts.items()})


# 11-13: scenario checks -----------------------------------------------------

def check_probing(ctx: Context) -> CheckResult:
    specs = [ctx.spec("probing", "moves", rtt_ms=float(r)) for r in PROBING_RTTS]
    late = {}
    for rtt, out in zip(PROBING_RTTS, ctx.run(specs)):
        late[rtt] = sum(1 for m in out["moves"] if m[0] >= 10 * US_PER_S)
    ok = not any(late.values())
    detail = "moves after 10 s by RTT: " + ", ".join(f"{r}ms:{n}" for r, n in late.items())
    return CheckResult(11, "probing robustness", ok, detail, data=late)


def check_neutrality(ctx: Context) -> CheckResult:
    a, b = ctx.run([ctx.spec("multi_bottleneck", "report", scheduler=s) for s in ("confucius", "fifo")])
    sa, sb = a["report"]["total_stall_ms"], b["report"]["total_stall_ms"]
    ma = max(a["report"]["max_frame_delay_ms"].values())
    mb = max(b["report"]["max_frame_delay_ms"].values())
    diff = abs(sa - sb) / max(sa, sb) if max(sa, sb) > 0 else 0.0
    ok = diff < 0.05
    detail = (f"stall Confucius {sa:.0f} ms vs FIFO {sb:.0f} ms ({diff:.1%}); "
              f"max frame delay {ma:.0f} vs {mb:.0f} ms")
    return CheckResult(12, "non-bottleneck neutrality", ok, detail, data={"diff": diff})


def check_multi_video(ctx: Context) -> CheckResult:
    counts = range(1, 6)
    specs = {(s, v): ctx.spec("multi_video", "report", scheduler=s, videos=v)
             for s in ("confucius", "fq") for v in counts}
    res = {k: r["report"]["stall_ms"] for k, r in zip(specs, ctx.run(list(specs.values())))}
    single = res["confucius", 1]["rt0"]
    # a zero single-flow stall still admits one frame interval of slack
    allowed = 2 * single + FRAME_MS
    worst = max(max(res["confucius", v].values()) for v in counts)
    fq_mean = [float(np.mean(list(res["fq", v].values()))) for v in counts]
    grows = fq_mean[-1] > fq_mean[0]
    ok = worst <= allowed and grows
    conf_mean = [float(np.mean(list(res["confucius", v].values()))) for v in counts]
    detail = (f"Confucius worst per-flow stall {worst:.0f} ms (allowed {allowed:.0f}); "
              f"mean per flow Confucius {['%.0f' % x for x in conf_mean]}, "
              f"FQ {['%.0f' % x for x in fq_mean]} grows={grows}")
    return CheckResult(13, "multi-video stall", ok, detail,
                       data={"confucius": conf_mean, "fq": fq_mean})


DETERMINISM_DEFAULT = [
    ("website_compete", {"pages": 1, "first_page_ms": 5_000.0}),
    ("sweep_n", {"n": 20}),
    ("abrf_sweep", {"factor": 4}),
    ("probing", {"rtt_ms": 80.0}),
    ("multi_bottleneck", {}),
    ("multi_video", {"videos": 3}),
]


def check_determinism(ctx: Context) -> CheckResult:
    """Replay every simulation already run in this suite (or a default set)."""
    specs = [json.loads(k) for k in ctx.cache]
    if not specs:
        specs = [ctx.spec(t, "report", **p) for t, p in DETERMINISM_DEFAULT]
        ctx.run(specs)
    before = [ctx.cache[_key(s)]["digest"] for s in specs]
    ctx.log(f"  replaying {len(specs)} simulation(s)")
    after = [r["digest"] for r in ctx._map(specs)]
    mismatched = [s["template"] for s, a, b in zip(specs, before, after) if a != b]
    elapsed = time.perf_counter() - ctx.started
    ok = not mismatched and elapsed < BUDGET_S
    detail = (f"{len(specs) - len(mismatched)}/{len(specs)} runs reproduced bit-exactly; "
              f"suite time {elapsed:.0f} s (budget {BUDGET_S} s)")
    if mismatched:
        detail += f"; differing: {sorted(set(mismatched))}"
    return CheckResult(14, "determinism and budget", ok, detail,
                       data={"runs": len(specs), "mismatched": len(mismatched), "elapsed_s": elapsed})


CHECKS = {
    1: check_fluid_oracle,
    2: check_copa_qmax,
    3: check_responsiveness,
    4: check_scaling,
    5: check_fct,
    6: check_abrf,
    7: check_classification,
    8: check_fairness,
    9: check_labels,
    10: check_properties,
    11: check_probing,
    12: check_neutrality,
    13: check_multi_video,
    14: check_determinism,
}


def run_checks(ids=None, ctx: Optional[Context] = None) -> list:
    ctx = ctx or Context()
    ids = sorted(CHECKS) if not ids else list(ids)
    unknown = [i for i in ids if i not in CHECKS]
    if unknown:
        raise KeyError(f"unknown check id(s) {unknown}; valid ids are 1-{max(CHECKS)}")
    out = []
    for i in ids:
        ctx.log(f"check {i}: {CHECKS[i].__name__}")
        t0 = time.perf_counter()
        try:
            res = CHECKS[i](ctx)
        except Exception as exc:  # a crashing check is a failing check
            res = CheckResult(i, CHECKS[i].__name__, False, f"error: {exc!r}")
        res.seconds = time.perf_counter() - t0
        ctx.log(res.line())
        out.append(res)
    return out
