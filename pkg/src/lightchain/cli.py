"""Command-line entry point: ``lightchain plan|simulate|sweep|report``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

from . import analysis, report
from .sim import ConfigInvalid, SimConfig, run, with_overrides

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3
SEED_ENV = "LIGHTCHAIN_SEED"

log = logging.getLogger("lightchain")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="lightchain", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    pl = sub.add_parser("plan", help="analytical thresholds")
    pl.add_argument("--n", type=int, default=10000)
    pl.add_argument("--f", type=float, default=0.165)
    pl.add_argument("--q", type=float, default=0.78)
    pl.add_argument("--lambda", dest="lam", type=int, default=48)
    pl.add_argument("--alpha", type=int, default=12)
    pl.add_argument("--adversary-churns", action=argparse.BooleanOptionalAction, default=False)
    pl.add_argument("--alphas", type=int, nargs="+", help="alpha values for the CSV table")
    pl.add_argument("--out", type=Path, help="also write the JSON report here")
    pl.add_argument("--csv", type=Path, help="write the (alpha, t) table here")

    sm = sub.add_parser("simulate", help="one simulation run")
    sm.add_argument("config", help="config JSON path or 'paper_desk'")
    sm.add_argument("out_dir", type=Path)

    sw = sub.add_parser("sweep", help="runs over alpha x t x seed")
    sw.add_argument("config", help="config JSON path or 'paper_desk'")
    sw.add_argument("sweep_spec", help="sweep JSON path or inline JSON")
    sw.add_argument("out_dir", type=Path)
    sw.add_argument("--jobs", type=int, default=1)

    rp = sub.add_parser("report", help="re-emit outputs and draw figures")
    rp.add_argument("out_dir", type=Path)
    rp.add_argument("--format", choices=["csv", "json", "gnuplot-data"], default="csv")
    return p


# ------------------------------------------------------------------ config

def load_config(spec: str) -> SimConfig:
    if spec == "paper_desk":
        text = resources.files("lightchain").joinpath("data/paper_desk.json").read_text()
    else:
        try:
            text = Path(spec).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {spec}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from exc
    try:
        cfg = SimConfig.from_json(obj)
    except ConfigInvalid as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            cfg.seed = int(env, 0)
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV} must be an integer") from exc
    return cfg


def load_sweep(spec: str) -> dict:
    text = spec
    if not spec.lstrip().startswith("{"):
        try:
            text = Path(spec).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read sweep spec {spec}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"sweep spec is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError("sweep spec must be a JSON object")
    extra = set(obj) - {"alpha", "t", "seed", "overrides"}
    if extra:
        raise UsageError(f"unknown sweep keys {sorted(extra)}")
    return obj


def sweep_cells(cfg: SimConfig, spec: dict) -> list[dict]:
    alphas = spec.get("alpha", [cfg.pov.alpha])
    ts = spec.get("t", [cfg.pov.t])
    seeds = spec.get("seed", [cfg.seed])
    for name, vals in (("alpha", alphas), ("seed", seeds)):
        if not isinstance(vals, list) or not vals or not all(isinstance(v, int) for v in vals):
            raise UsageError(f"sweep '{name}' must be a nonempty list of integers")
    if ts != "all" and (not isinstance(ts, list) or not ts or not all(isinstance(v, int) for v in ts)):
        raise UsageError("sweep 't' must be a nonempty list of integers or \"all\"")
    cells = []
    for a in alphas:
        for t in ([None] if ts == "all" else ts):
            if t is not None and not 1 <= t <= a:
                continue
            for s in seeds:
                cells.append({"alpha": a, "t": t, "seed": s})
    if not cells:
        raise UsageError("sweep spec has no admissible (alpha, t) cell")
    return cells


def cell_config(cfg: SimConfig, spec: dict, cell: dict) -> SimConfig:
    over = dict(spec.get("overrides", {}))
    t = cell["t"] if cell["t"] is not None else min(cfg.pov.t, cell["alpha"])
    try:
        c = with_overrides(cfg, seed=cell["seed"], pov_alpha=cell["alpha"], pov_t=t, **over)
        return c.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid sweep cell {cell}: {exc}") from exc


def cell_name(cell: dict) -> str:
    t = "all" if cell["t"] is None else cell["t"]
    return f"a{cell['alpha']}_t{t}_s{cell['seed']}"


def _run_cell(args):
    cfg, out_dir = args
    rep = run(cfg)
    report.write_run(rep, out_dir)
    return rep


# ---------------------------------------------------------------- commands

def cmd_plan(ns) -> int:
    params = analysis.AnalysisParams(ns.n, ns.f, ns.q, ns.lam, ns.alpha, ns.adversary_churns)
    try:
        params.validate()
        out = analysis.plan(params)
        rows = []
        for a in ns.alphas or [ns.alpha]:
            p = analysis.AnalysisParams(ns.n, ns.f, ns.q, ns.lam, a, ns.adversary_churns)
            rows += analysis.plan(p.validate())["table"]
    except analysis.DomainError as exc:
        raise UsageError(str(exc)) from exc
    text = json.dumps(out, sort_keys=True, indent=1) + "\n"
    if ns.out:
        report.atomic_write(ns.out, text)
    if ns.csv:
        cols = ["alpha", "t", "exact_success", "normal_success"]
        for r in rows:
            r.setdefault("exact_success", "")
        report.atomic_write(ns.csv, report.csv_text(cols, rows))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_simulate(ns) -> int:
    cfg = load_config(ns.config)
    rep = run(cfg, progress=lambda r: log.info("slot %d: online=%d committed=%d", r["slot"],
                                                r["online"], r["committed_blocks"]))
    for p in report.write_run(rep, ns.out_dir):
        log.info("wrote %s", p)
    return EXIT_OK


def cmd_sweep(ns) -> int:
    cfg = load_config(ns.config)
    spec = load_sweep(ns.sweep_spec)
    if ns.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    cells = sweep_cells(cfg, spec)
    jobs = [(cell_config(cfg, spec, c), ns.out_dir / "runs" / cell_name(c)) for c in cells]
    if ns.jobs == 1:
        reports = [_run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=ns.jobs) as ex:
            reports = list(ex.map(_run_cell, jobs))
    agg = report.aggregate(list(zip(cells, reports)))
    meta = {"config": cfg.to_json(), "sweep": spec, "cells": [cell_name(c) for c in cells],
            "seeds": sorted({c["seed"] for c in cells})}
    report.write_sweep(agg, ns.out_dir, meta)
    return EXIT_OK


def cmd_report(ns) -> int:
    try:
        written = report.render(ns.out_dir, ns.format)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    for p in written:
        print(p)
    return EXIT_OK


COMMANDS = {"plan": cmd_plan, "simulate": cmd_simulate, "sweep": cmd_sweep, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[ns.command](ns)
    except UsageError as exc:
        print(f"lightchain: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures map to one exit code
        print(f"lightchain: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
