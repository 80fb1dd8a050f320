"""Command-line entry point.

Exit codes: 0 success, 2 invalid input (config, flags, boundary sets, budgets),
3 numerical failure (solver breakdown, violated modelling assumption, failed
oracle check).
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from ..asymptotics import AssumptionFailure
from ..mc import StepBudgetExceeded
from ..model import StateBudgetExceeded
from ..potential import SolverError
from . import pipeline
from .cache import CACHE_ENV, NpzCache, default_cache_dir
from .config import ConfigError, dump_toml, load_config
from .presets import PRESETS, preset

log = logging.getLogger("metastable_hopfield")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

COMMANDS = {
    "rate-surface": "CSV grid of the rate function I over the feasible hull",
    "critical-points": "critical points of I with Hessian classification",
    "gate": "gate value, optimal saddles and target minima",
    "capacity": "exact capacity between the metastable fibre and the deeper minima",
    "asymptotics": "variational bound, asymptotic capacity and exit-time prediction",
    "hit-time": "exact mean exit time and an optional Monte Carlo estimate",
    "sweep": "all of the above over the n list, with the convergence table",
    "verify": "oracle suite: lumping, detailed balance, birth-death closed forms",
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isfinite(x):
            return x
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return obj


def dumps_report(report: dict) -> str:
    return json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n"


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in r])
    return buf.getvalue()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metastable-hopfield",
                                 description="Metastable exit times of lumped Hopfield-type Glauber dynamics.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--config", metavar="PATH", help="TOML experiment configuration")
    src.add_argument("--preset", choices=sorted(PRESETS), help="built-in configuration")
    common.add_argument("--n", metavar="N[,N...]", help="system size(s); overrides [model] n")
    common.add_argument("--seed", type=int, help="seed for pattern sampling and Monte Carlo")
    common.add_argument("--mode", choices=("paper", "exact"), help="Hessian source for the asymptotics")
    common.add_argument("--gate-dir", choices=("w", "v1"), help="direction used in the saddle rate sum")
    common.add_argument("--el-norm", choices=("step", "unit"), help="normalisation of the lattice steps")
    common.add_argument("--no-prune", action="store_true", help="disable pruning of negligible states")
    common.add_argument("--solver", choices=("direct", "lu", "cg"), help="harmonic solver")
    common.add_argument("--out", metavar="DIR", help="write reports here instead of standard output")
    common.add_argument("--cache", metavar="DIR", help=f"solver cache directory (default: ${CACHE_ENV})")
    common.add_argument("--no-cache", action="store_true", help="do not read or write the solver cache")
    common.add_argument("--mc-trajectories", type=int, metavar="K", help="Monte Carlo trajectories (0 disables)")
    common.add_argument("--grid-step", type=float, help="grid step (rate-surface output or gate search)")
    common.add_argument("--workers", type=int, help="worker processes for sweep")
    common.add_argument("-v", "--verbose", action="count", default=0)
    for name, text in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return ap


def _resolve_config(args):
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        raise ConfigError("give --config PATH or --preset NAME")
    over = {}
    if args.n:
        try:
            ns = [int(v) for v in args.n.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"--n expects integers, got {args.n!r}") from None
        over["model__n"] = ns if len(ns) > 1 else ns[0]
    if args.seed is not None:
        over["disorder__seed"] = args.seed
        over["mc__seed"] = args.seed
    over["asymptotics__mode"] = args.mode
    over["asymptotics__gate_dir"] = args.gate_dir
    over["asymptotics__el_norm"] = args.el_norm
    if args.no_prune:
        over["solver__prune"] = False
    over["solver__method"] = args.solver
    over["mc__trajectories"] = args.mc_trajectories
    if args.grid_step is not None and args.command != "rate-surface":
        over["asymptotics__grid_step"] = args.grid_step
    over["output__workers"] = args.workers
    over["output__dir"] = args.out
    over["output__cache"] = args.cache
    return cfg.with_overrides(**over)


def _cache(cfg, args):
    if args.no_cache:
        return None, None
    root = cfg.raw["output"]["cache"] or default_cache_dir()
    return (NpzCache(root), root) if root else (None, None)


class _Writer:
    def __init__(self, out_dir):
        self.dir = Path(out_dir) if out_dir else None
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)

    def emit(self, name: str, text: str, primary: bool = True):
        if self.dir:
            (self.dir / name).write_text(text)
            log.info("wrote %s", self.dir / name)
        elif primary:
            sys.stdout.write(text)


def _wrap(cfg, command, results) -> dict:
    return {"command": command, "config": cfg.to_dict(), "config_toml": dump_toml(cfg.to_dict()),
            "environment": pipeline.environment_stamp(cfg),
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "results": results}


def run(args) -> int:
    cfg = _resolve_config(args)
    cache, cache_dir = _cache(cfg, args)
    out = _Writer(cfg.raw["output"]["dir"])
    cmd = args.command
    ns = cfg.n_values
    stem = cmd.replace("-", "_")
    if cmd == "rate-surface":
        step = args.grid_step or 0.02
        for n in ns:
            header, rows = pipeline.rate_surface(cfg, n, step)
            out.emit(f"rate_surface_n{n}.csv" if len(ns) > 1 else "rate_surface.csv", csv_text(header, rows))
        return EXIT_OK
    if cmd == "sweep":
        rep, rows = pipeline.sweep(cfg, cache, cache_dir, int(cfg.raw["output"]["workers"]))
        out.emit("sweep.csv", csv_text(pipeline.SWEEP_COLUMNS, rows))
        out.emit("sweep.json", dumps_report(_wrap(cfg, cmd, rep)), primary=False)
        s = rep["summary"]
        log.info("convergent configurations: %s", ", ".join(s["convergent_configurations"]) or "none")
        return EXIT_OK
    results = []
    status = EXIT_OK
    for n in ns:
        if cmd == "critical-points":
            results.append(pipeline.critical_points_report(cfg, n))
        elif cmd == "gate":
            results.append(pipeline.gate_report(cfg, n))
        elif cmd == "capacity":
            inst = pipeline.Instance(cfg, n, cache)
            results.append(pipeline.capacity_report(cfg, n, inst=inst))
            if out.dir:
                lat = inst.chain.lattice
                header = ["state"] + [f"k{a}" for a in range(lat.counts.shape[1])] + ["log_phi", "log_weight"]
                rows = [[i, *map(int, lat.counts[i]), float(inst.solution.log_phi[i]),
                         float(inst.chain.measure.log_weights[i])] for i in range(lat.size)]
                out.emit(f"phi_n{n}.csv", csv_text(header, rows))
        elif cmd == "asymptotics":
            results.append(pipeline.asymptotics_report(cfg, n, cache))
        elif cmd == "hit-time":
            r = pipeline.hit_time_report(cfg, n, cache)
            samples = r.pop("_samples", None)
            if samples is not None and out.dir:
                out.emit(f"hit_time_samples_n{n}.csv",
                         csv_text(["trajectory", "tau"], [[i, int(t)] for i, t in enumerate(samples)]))
            results.append(r)
        elif cmd == "verify":
            r = pipeline.verify(cfg, n)
            for c in r["checks"]:
                log.log(logging.INFO if c["pass"] else logging.ERROR, "%s %s: %.3e (threshold %.0e)",
                        "PASS" if c["pass"] else "FAIL", c["name"], c["value"], c["threshold"])
            if not r["all_pass"]:
                status = EXIT_NUMERICAL
            results.append(r)
    out.emit(f"{stem}.json", dumps_report(_wrap(cfg, cmd, results)))
    if cache is not None:
        log.info("cache: %d hits, %d misses", cache.hits, cache.misses)
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, StateBudgetExceeded, StepBudgetExceeded) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except (SolverError, AssumptionFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
