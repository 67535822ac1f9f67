"""Command-line entry point: ``rtqm {run,sweep,analyze,compare,validate}``.

Exit codes: 0 success, 1 a check failed, 2 bad configuration or usage.
The default output root comes from ``RTQM_OUTPUT_ROOT`` (else ``./rtqm-out``).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .engine import ConfigurationError
from .fluid import FluidWarning, analyze_rows, parse_param_file
from .metrics import atomic_write, build_report, write_outputs
from .runner import run_scenario
from .workload import Scenario, apply_overrides, experiment_template, template_grid

OUTPUT_ENV = "RTQM_OUTPUT_ROOT"
EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("rtqm")


class UsageError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or "rtqm-out")


def _kv(items: Optional[list]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigurationError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = json.loads(v)
        except json.JSONDecodeError:
            out[k.strip()] = v
    return out


def parse_seeds(text: str) -> list:
    """``"1-20"``, ``"3"`` or ``"1,4,9"``."""
    seeds = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part[1:]:
                a, b = part.split("-", 1)
                lo, hi = int(a), int(b)
                if hi < lo:
                    raise ValueError
                seeds.extend(range(lo, hi + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise UsageError(f"bad seed list {text!r}") from None
    if not seeds:
        raise UsageError("empty seed list")
    return seeds


def reseed(sc: Scenario, seed: int) -> Scenario:
    """Copy of ``sc`` with its seed, and its generated web pages' seed, replaced."""
    data = sc.to_dict()
    data["seed"] = seed
    for src in data["sources"]:
        if src.get("type") == "web_series":
            src["seed"] = seed
    return Scenario.from_dict(data, base_dir=sc.base_dir)


def load_scenario(args) -> tuple:
    """Resolve the scenario from a file, a template or a saved invocation.

    Returns (scenario, description) where description records how it was built.
    """
    if args.template:
        params = _kv(args.param)
        sc = experiment_template(args.template, **params)
        desc = {"template": args.template, "params": params}
    elif args.scenario:
        path = Path(args.scenario)
        if not path.exists():
            raise ConfigurationError(f"scenario file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        if isinstance(data, dict) and "scenario" in data and "subcommand" in data:
            sc = Scenario.from_dict(data["scenario"], base_dir=data.get("base_dir") or str(path.parent))
            sc.validate()
            desc = {"invocation": str(path)}
        else:
            sc = Scenario.load(path)
            desc = {"scenario_file": str(path)}
    else:
        raise UsageError("give a scenario file or --template")
    if getattr(args, "override", None):
        sc = apply_overrides(sc, args.override)
    if getattr(args, "seed", None) is not None:
        sc = reseed(sc, args.seed)
    return sc, desc


def _invocation(sub: str, sc: Scenario, desc: dict, args, extra: Optional[dict] = None) -> dict:
    d = {
        "subcommand": sub,
        "version": __version__,
        "source": desc,
        "overrides": list(getattr(args, "override", None) or []),
        "seed": sc.seed,
        "scenario": sc.to_dict(),
        "base_dir": sc.base_dir,
    }
    d.update(extra or {})
    return d


def _run_one(sc: Scenario, out: Path):
    result = run_scenario(sc)
    report = build_report(result)
    write_outputs(result, report, out)
    return report


# subcommands -----------------------------------------------------------------

def cmd_run(args) -> int:
    sc, desc = load_scenario(args)
    out = Path(args.out) if args.out else output_root() / f"{sc.name}-{sc.scheduler}-s{sc.seed}"
    report = _run_one(sc, out)
    atomic_write(out / "invocation.json", json.dumps(_invocation("run", sc, desc, args), indent=2) + "\n")
    print(f"{out}: stall {report.total_stall_ms:.0f} ms, mean PLT "
          f"{'-' if report.mean_plt_ms is None else f'{report.mean_plt_ms:.0f} ms'}, "
          f"JFI {'-' if report.jfi is None else f'{report.jfi:.3f}'}")
    return EXIT_OK


def _summary_row(report) -> dict:
    return {
        "stall_ms": report.total_stall_ms,
        "plt_ms": report.mean_plt_ms,
        "jfi": report.jfi,
    }


def _sweep_job(job: tuple) -> dict:
    data, base_dir, out = job
    sc = Scenario.from_dict(data, base_dir=base_dir)
    return _summary_row(_run_one(sc, Path(out)))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def cmd_sweep(args) -> int:
    grid = template_grid(args.template)
    base = _kv(args.param)
    seeds = parse_seeds(args.seeds)
    out = Path(args.out) if args.out else output_root() / f"sweep-{args.template}-{args.scheduler}"
    jobs, cells = [], []
    for cell in grid:
        params = {**base, **cell, "scheduler": args.scheduler}
        for seed in seeds:
            sc = experiment_template(args.template, **{**params, "seed": seed})
            if args.override:
                sc = apply_overrides(sc, args.override)
            tag = "_".join(f"{k}-{v}" for k, v in sorted(cell.items())) or "default"
            run_dir = out / f"{tag}-s{seed}"
            jobs.append((sc.to_dict(), sc.base_dir, str(run_dir)))
            cells.append({**cell, "seed": seed, "dir": run_dir.name})
            atomic_write(run_dir / "invocation.json", json.dumps(
                _invocation("sweep", sc, {"template": args.template, "params": {**params, "seed": seed}},
                            args), indent=2) + "\n")
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    keys = sorted({k for c in cells for k in c} - {"seed", "dir"})
    header = keys + ["seed", "dir", "stall_ms", "plt_ms", "jfi"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for c, r in zip(cells, rows):
        w.writerow([_fmt(c.get(k)) for k in keys] + [c["seed"], c["dir"]]
                   + [_fmt(r[k]) for k in ("stall_ms", "plt_ms", "jfi")])
    atomic_write(out / "summary.csv", buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


ANALYZE_HEADER = ["policy", "q_max_closed_ms", "q_max_integrated_ms", "fct_delta_ms", "bound_flag"]


def cmd_analyze(args) -> int:
    path = Path(args.params)
    if not path.exists():
        raise ConfigurationError(f"parameter file not found: {path}")
    try:
        params, opts = parse_param_file(path.read_text())
    except ValueError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FluidWarning)
        for msg in params.check_regime():
            log.warning("%s", msg)
    rows = analyze_rows(params, opts.get("t_end"), opts.get("dt"))
    buf = io.StringIO()
    w = csv.DictWriter(buf, ANALYZE_HEADER, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    if args.out:
        atomic_write(Path(args.out), buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


COMPARE_HEADER = ["scheduler", "seed", "stall_ms", "plt_ms", "jfi"]


def compare_rows(sc: Scenario, schedulers: list, seeds: list, out: Optional[Path] = None,
                 jobs: int = 1) -> list:
    if not schedulers:
        raise UsageError("compare needs at least one scheduler")
    work = []
    for sched in schedulers:
        for seed in seeds:
            s = apply_overrides(reseed(sc, seed), [f"scheduler={sched}"])
            run_dir = None if out is None else out / f"{sched}-s{seed}"
            work.append((sched, seed, s, run_dir))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reps = list(pool.map(_compare_job, [(s.to_dict(), s.base_dir, d and str(d)) for *_, s, d in work]))
    else:
        reps = [_compare_job((s.to_dict(), s.base_dir, d and str(d))) for *_, s, d in work]
    return [{"scheduler": sched, "seed": seed, **r} for (sched, seed, _, _), r in zip(work, reps)]


def _compare_job(job: tuple) -> dict:
    data, base_dir, out = job
    sc = Scenario.from_dict(data, base_dir=base_dir)
    if out is None:
        return _summary_row(build_report(run_scenario(sc)))
    return _summary_row(_run_one(sc, Path(out)))


def mean_rows(rows: list) -> list:
    out = []
    for sched in dict.fromkeys(r["scheduler"] for r in rows):
        mine = [r for r in rows if r["scheduler"] == sched]
        agg = {"scheduler": sched, "seed": "mean"}
        for k in ("stall_ms", "plt_ms", "jfi"):
            vals = [r[k] for r in mine if r[k] is not None]
            agg[k] = float(np.mean(vals)) if vals else None
        out.append(agg)
    return out


def cmd_compare(args) -> int:
    schedulers = [s.strip() for s in (args.schedulers or "").split(",") if s.strip()]
    if not schedulers:
        raise UsageError("--schedulers must name at least one scheduler")
    sc, desc = load_scenario(args)
    seeds = parse_seeds(args.seeds)
    out = Path(args.out) if args.out else output_root() / f"compare-{sc.name}"
    rows = compare_rows(sc, schedulers, seeds, out if args.keep_runs else None, args.jobs)
    buf = io.StringIO()
    w = csv.DictWriter(buf, COMPARE_HEADER, lineterminator="\n")
    w.writeheader()
    for r in rows + mean_rows(rows):
        w.writerow({k: _fmt(r[k]) for k in COMPARE_HEADER})
    atomic_write(out / "comparison.csv", buf.getvalue())
    atomic_write(out / "invocation.json", json.dumps(
        _invocation("compare", sc, desc, args, {"schedulers": schedulers, "seeds": seeds}), indent=2) + "\n")
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_validate(args) -> int:
    from .checks import CHECKS, Context, run_checks
    ids = None
    if args.only:
        try:
            ids = [int(x) for x in args.only.split(",") if x.strip()]
        except ValueError:
            raise UsageError(f"--only takes comma-separated check numbers, got {args.only!r}") from None
        bad = [i for i in ids if i not in CHECKS]
        if bad:
            raise UsageError(f"unknown check(s) {bad}; valid: 1-{max(CHECKS)}")
    conf = _kv(args.set)
    if "lambda" in conf:
        conf["lambda_per_ms"] = conf.pop("lambda")
    from .qdisc import ConfuciusConfig
    ConfuciusConfig.from_dict(conf)  # reject unknown keys before any work
    ctx = Context(jobs=args.jobs, confucius=conf,
                  log=(lambda m: print(m, file=sys.stderr, flush=True)) if args.verbose else None)
    results = run_checks(ids, ctx)
    print(f"{'id':>3}  {'result':<6}  {'check':<30}  detail")
    for r in results:
        print(f"{r.cid:>3}  {'PASS' if r.passed else 'FAIL':<6}  {r.name:<30}  {r.detail}")
    n_ok = sum(r.passed for r in results)
    print(f"{n_ok}/{len(results)} checks passed")
    if args.json:
        atomic_write(Path(args.json), json.dumps(
            [{"id": r.cid, "name": r.name, "passed": r.passed, "detail": r.detail,
              "seconds": r.seconds, "data": r.data} for r in results], indent=2, default=str) + "\n")
    return EXIT_OK if n_ok == len(results) else EXIT_CHECK


# argument parsing -------------------------------------------------------------

def _scenario_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("scenario", nargs="?", help="scenario JSON file or a saved invocation.json")
    p.add_argument("--template", help="build the scenario from a named experiment template")
    p.add_argument("--param", action="append", metavar="KEY=VALUE", help="template parameter")
    p.add_argument("--override", action="append", metavar="DOTTED.KEY=VALUE",
                   help="override an existing scenario key, e.g. scheduler=fifo")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rtqm", description="Real-time aware queue management simulator")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="run one scenario")
    _scenario_args(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output directory (default under ${OUTPUT_ENV})")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a template over its parameter grid")
    p.add_argument("template")
    p.add_argument("--scheduler", default="confucius")
    p.add_argument("--param", action="append", metavar="KEY=VALUE")
    p.add_argument("--override", action="append", metavar="DOTTED.KEY=VALUE")
    p.add_argument("--seeds", default="1")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="evaluate the fluid-model bounds for a parameter file")
    p.add_argument("params", help="file of key=value lines")
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compare", help="run a scenario under several schedulers and seeds")
    _scenario_args(p)
    p.add_argument("--schedulers", required=True, help="comma-separated scheduler names")
    p.add_argument("--seeds", default="1", help="e.g. 1-20 or 1,2,5")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--keep-runs", action="store_true", help="write every run's files too")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("validate", help="run the acceptance checks")
    p.add_argument("--only", help="comma-separated check numbers, e.g. 1,4,9")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="Confucius setting for every check, e.g. lambda=10")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--json", help="write results as JSON")
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv: Optional[list] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        ap.print_usage(sys.stderr)
        print(f"rtqm: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigurationError, ValueError, KeyError) as exc:
        print(f"rtqm: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"rtqm: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
