"""Command-line entry point ``intraday-hjb``.

Exit codes: 0 success, 2 usage or parameter error, 3 data or snapshot error,
4 solver error.  Errors are reported on stderr as one JSON record.  Outputs
depend only on (config, data, seed): no clocks, hostnames or paths are
written into result files.
"""
import argparse
import csv
import io
import json
import os
import sys
import tempfile
import warnings

import numpy as np

from .config import default_config, dump_config, load_config
from .errors import IntradayError, ParameterError, SnapshotError
from .hjb_stage3 import SolverOptions, regularization_sweep
from .kbe_stages import solve_terminal_stages
from .pipeline import (DaySpec, day_paths, evaluate_strategies, list_days, load_day,
                       prepare_day, run_parallel, solve_day)
from .policy_eval import gain_stats
from .simulate import simulate_batch
from .snapshot import SnapshotStorage, StaleSnapshotWarning, read_snapshot, read_stack

__all__ = ["main", "build_parser", "COMMANDS", "PNL_COLUMNS"]

COMMANDS = ("bounds", "solve", "evaluate", "benchmark", "sweep-jumps", "sweep-delivery",
            "sweep-horizon", "sweep-regularization", "simulate")
PNL_COLUMNS = ("day", "strategy", "path", "running_cost", "terminal_penalty",
               "delivered_energy", "terminal_inventory", "pnl")
SWEEP_DEFAULTS = {"sweep-jumps": ("lam", "0,0.4167,2.083"),
                  "sweep-delivery": ("L", "0.25,0.5,1"),
                  "sweep-horizon": ("T", "12,18,24"),
                  "sweep-regularization": ("eps", "1e-2,1e-3,1e-4,1e-5")}
_IN_MEMORY_LIMIT = 512 * 2 ** 20


class UsageError(ParameterError):
    """Bad command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, usage=self.format_usage().strip())


def build_parser():
    parser = _Parser(prog="intraday-hjb",
                     description="Solve, evaluate and benchmark intraday trading strategies.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    helps = {"bounds": "print the computational domain of each day",
             "solve": "run the three-stage backward solve and write value snapshots",
             "evaluate": "evaluate the feedback strategy of stored snapshots",
             "benchmark": "compare OT, TWAP and perfect foresight over a day list",
             "sweep-jumps": "OT P&L across jump intensities",
             "sweep-delivery": "OT P&L across delivery window lengths",
             "sweep-horizon": "OT P&L across problem horizons",
             "sweep-regularization": "distance between plain and regularized solves",
             "simulate": "simulate market paths and write batch summaries"}
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--data", help="directory with prices.csv and production_<date>.csv")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="run seed")
        p.add_argument("--days", help="day count or comma-separated list")
        p.add_argument("--paths", type=int, help="Monte Carlo paths per day")
        p.add_argument("--workers", type=int, help="parallel day workers")
        p.add_argument("--progress", action="store_true",
                       help="stream per-step solver diagnostics to stderr as JSON lines")
        if name.startswith("sweep-"):
            p.add_argument("--values", default=SWEEP_DEFAULTS[name][1],
                           help="comma-separated sweep values")
        if name == "evaluate":
            p.add_argument("--snapshot", help="value snapshot to evaluate (else out/snapshots)")
            p.add_argument("--strategies", default="OT", help="comma list from OT,TWAP,PF")
        if name == "simulate":
            p.add_argument("--kind", choices=("wind", "price", "both"), default="both")
            p.add_argument("--dump", action="store_true", help="also write every path")
            p.add_argument("--no-compensator", action="store_true",
                           help="drop the jump compensator (diagnostic builds)")
    return parser


# ---------------------------------------------------------------- helpers

def _num(v):
    return repr(float(v))


def _atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _json_text(obj):
    def plain(o):
        if isinstance(o, dict):
            return {k: plain(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [plain(v) for v in o]
        if isinstance(o, (np.floating, float)):
            return None if not np.isfinite(o) else float(o)
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.bool_):
            return bool(o)
        return o
    return json.dumps(plain(obj), indent=2, sort_keys=True) + "\n"


def _stderr_record(obj):
    sys.stderr.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stderr.flush()


def _effective_config(args):
    cfg = load_config(args.config) if args.config else default_config()
    run = cfg.run
    for key, attr in (("seed", "seed"), ("paths", "paths"), ("workers", "workers")):
        v = getattr(args, attr)
        if v is not None:
            run[key] = v
    if args.days is not None:
        run["days"] = args.days
    if args.out is not None:
        run["out_dir"] = args.out
    if int(run["paths"]) < 1:
        raise UsageError("--paths must be at least 1")
    if int(run["workers"]) < 1:
        raise UsageError("--workers must be at least 1")
    return cfg


def _days(cfg, args):
    return list_days(cfg.run["days"], cfg.run["seed"], args.data)


def _out(cfg, *parts):
    return os.path.join(str(cfg.run["out_dir"]), *parts)


def _progress(args, tag):
    if not args.progress:
        return None
    return lambda d: _stderr_record(dict(d, day=tag))


class _Storage:
    """Stack storage: a committed snapshot, a scratch memory map, or RAM."""

    def __init__(self, cfg, problem, keep):
        shape_bytes = 8 * (problem.grid.idx_Tgc + 1) * int(np.prod(problem.grid.shape))
        self.keep = keep
        meta = {"day": problem.spec.tag, "index": problem.spec.index,
                "source": "synthetic" if problem.spec.source == "synthetic" else "data",
                "offset": _num(problem.offset)}
        if keep:
            path = _out(cfg, "snapshots", f"{problem.spec.tag}.snap")
            os.makedirs(os.path.dirname(path), exist_ok=True)
            self.store = SnapshotStorage(path, problem.params, problem.grid, extra=meta)
        elif shape_bytes > _IN_MEMORY_LIMIT:
            self._dir = tempfile.mkdtemp(prefix="stack-", dir=str(cfg.run["out_dir"]))
            self.store = SnapshotStorage(os.path.join(self._dir, "stack.snap"),
                                         problem.params, problem.grid, extra=meta)
        else:
            self.store = None

    def factory(self):
        return self.store

    def finish(self, ok=True):
        if self.store is None:
            return
        if self.keep and ok:
            self.store.commit()
        else:
            self.store.abort()
            if hasattr(self, "_dir"):
                os.rmdir(self._dir)


def _solve(cfg, problem, args, keep):
    os.makedirs(str(cfg.run["out_dir"]), exist_ok=True)
    storage = _Storage(cfg, problem, keep)
    try:
        stack = solve_day(problem, cfg, storage.factory(), _progress(args, problem.spec.tag))
    except BaseException:
        storage.finish(ok=False)
        raise
    return stack, storage


def _pnl_rows(tag, name, batch, extra=()):
    rows = []
    for i in range(len(batch)):
        rows.append(tuple(extra) + (tag, name, i, float(batch.running_cost[i]),
                                     float(batch.terminal_penalty[i]),
                                     float(batch.delivered_energy[i]),
                                     float(batch.terminal_inventory[i]), float(batch.pnl[i])))
    return rows


def _write_config_echo(cfg):
    _atomic_write(_out(cfg, "config.ini"), dump_config(cfg))


# ---------------------------------------------------------------- commands

def _bounds_block(problem):
    lines = [f"[{problem.spec.tag}]", f"beta = {_num(problem.params.beta)}"]
    for k, v in problem.bounds.as_dict().items():
        lines.append(f"{k} = {_num(v)}")
    g = problem.grid
    lines += [f"N_t = {g.N_t}", f"dt = {_num(g.dt)}", f"dy = {_num(g.dy)}",
              f"dq = {_num(g.dq)}", f"idx_Tgc = {g.idx_Tgc}", f"idx_TmL = {g.idx_TmL}"]
    return "\n".join(lines) + "\n"


def cmd_bounds(cfg, args):
    blocks, records = [], {}
    for spec in _days(cfg, args):
        problem = prepare_day(spec, cfg)
        blocks.append(_bounds_block(problem))
        records[spec.tag] = dict(problem.bounds.as_dict(), beta=problem.params.beta,
                                 N_t=problem.grid.N_t)
    text = "\n".join(blocks)
    sys.stdout.write(text)
    if args.out is not None:
        _atomic_write(_out(cfg, "bounds.txt"), text)
        _atomic_write(_out(cfg, "bounds.json"), _json_text(records))
    return 0


def _value_slices(stack):
    g = stack.grid
    V0 = np.asarray(stack.values[-1])
    i, j, k = g.N_x // 2, g.N_y // 2, g.N_q // 2
    rows = [("x", float(c), float(v)) for c, v in zip(g.x, V0[:, j, k])]
    rows += [("y", float(c), float(v)) for c, v in zip(g.y, V0[i, :, k])]
    rows += [("q", float(c), float(v)) for c, v in zip(g.q, V0[i, j, :])]
    return _csv_text(("axis", "coordinate", "value"), rows)


def _solve_task(payload):
    cfg, spec, args = payload
    problem = prepare_day(spec, cfg)
    keep = bool(cfg.run["snapshot"])
    stack, storage = _solve(cfg, problem, args, keep)
    diag = "".join(json.dumps(d, sort_keys=True) + "\n" for d in stack.diagnostics)
    slices = _value_slices(stack)
    storage.finish()
    _atomic_write(_out(cfg, "diagnostics", f"{spec.tag}.jsonl"), diag)
    _atomic_write(_out(cfg, "slices", f"{spec.tag}_t0.csv"), slices)
    return spec.tag


def cmd_solve(cfg, args):
    _write_config_echo(cfg)
    specs = _days(cfg, args)
    run_parallel(_solve_task, [(cfg, s, args) for s in specs], int(cfg.run["workers"]))
    return 0


def _snapshot_spec(snap_path, cfg, args):
    meta = read_snapshot(snap_path).meta
    if "day" not in meta:
        raise SnapshotError("snapshot lacks its day tag", path=str(snap_path))
    source = meta.get("source", "synthetic")
    if source != "synthetic":
        if args.data is None:
            raise UsageError("snapshot of a data day: pass --data")
        source = args.data
    return DaySpec(meta["day"], int(meta.get("index", 0)), source, int(cfg.run["seed"]))


def cmd_evaluate(cfg, args):
    _write_config_echo(cfg)
    strategies = tuple(s.strip() for s in args.strategies.split(",") if s.strip())
    if args.snapshot:
        jobs = [(_snapshot_spec(args.snapshot, cfg, args), args.snapshot)]
    else:
        jobs = [(s, _out(cfg, "snapshots", f"{s.tag}.snap")) for s in _days(cfg, args)]
    rows = []
    for spec, path in jobs:
        problem = prepare_day(spec, cfg)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", StaleSnapshotWarning)
            stack = read_stack(path, problem.params)
        for w in caught:
            _stderr_record({"warning": "StaleSnapshot", "message": str(w.message),
                            "day": spec.tag})
        problem.grid = stack.grid
        paths = day_paths(problem, cfg.run["paths"])
        res = evaluate_strategies(problem, stack, paths, cfg, strategies)
        for name in strategies:
            rows += _pnl_rows(spec.tag, name, res[name])
    _atomic_write(_out(cfg, "pnl.csv"), _csv_text(PNL_COLUMNS, rows))
    return 0


def _benchmark_task(payload):
    cfg, spec, args = payload
    problem = prepare_day(spec, cfg)
    strategies = ["OT"] + [s for s, on in (("TWAP", cfg.benchmark["twap"]),
                                           ("PF", cfg.benchmark["pf"])) if on]
    stack, storage = _solve(cfg, problem, args, bool(cfg.run["snapshot"]))
    try:
        paths = day_paths(problem, cfg.run["paths"])
        res = evaluate_strategies(problem, stack, paths, cfg, strategies)
    finally:
        del stack
        storage.finish()
    t = problem.grid.t[:problem.grid.idx_Tgc + 1]
    traj = []
    for name in strategies:
        b = res[name]
        inv = b.inventory.mean(axis=0)
        rate = np.append(b.rates.mean(axis=0), np.nan)
        traj += [(spec.tag, name, float(t[n]), float(inv[n]), float(rate[n]))
                 for n in range(t.size)]
    return spec.tag, strategies, {k: res[k] for k in strategies}, traj


def _daily_rows(tag, name, b):
    return (tag, name, len(b), float(np.mean(b.pnl)), float(np.median(b.pnl)),
            float(np.std(b.pnl, ddof=1)) if len(b) > 1 else 0.0)


def cmd_benchmark(cfg, args):
    _write_config_echo(cfg)
    specs = _days(cfg, args)
    results = run_parallel(_benchmark_task, [(cfg, s, args) for s in specs],
                           int(cfg.run["workers"]))
    pnl_rows, daily, traj = [], [], []
    per_day = {}
    violations = 0
    for tag, strategies, res, tr in results:
        for name in strategies:
            pnl_rows += _pnl_rows(tag, name, res[name])
            daily.append(_daily_rows(tag, name, res[name]))
        traj += tr
        per_day[tag] = {k: float(np.mean(v.pnl)) for k, v in res.items()}
        if "PF" in res:
            pf, ot = res["PF"].pnl, res["OT"].pnl
            violations += int(np.count_nonzero(pf < ot - 0.01 * np.abs(pf)))
    summary = {"days": [tag for tag, *_ in results], "daily_mean_pnl": per_day,
               "pf_bound_violations": violations}
    tags = summary["days"]
    for a, b in (("OT", "TWAP"), ("PF", "OT"), ("PF", "TWAP")):
        if all(a in per_day[t] and b in per_day[t] for t in tags):
            summary[f"{a}_vs_{b}"] = gain_stats([per_day[t][a] for t in tags],
                                                [per_day[t][b] for t in tags]).as_dict()
    _atomic_write(_out(cfg, "pnl.csv"), _csv_text(PNL_COLUMNS, pnl_rows))
    _atomic_write(_out(cfg, "daily.csv"),
                  _csv_text(("day", "strategy", "n_paths", "mean_pnl", "median_pnl", "std_pnl"),
                            daily))
    _atomic_write(_out(cfg, "trajectories.csv"),
                  _csv_text(("day", "strategy", "t", "mean_inventory", "mean_rate"), traj))
    _atomic_write(_out(cfg, "gains.json"), _json_text(summary))
    return 0


def _parse_values(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse sweep values {text!r}") from exc
    if not vals:
        raise UsageError("empty sweep value list")
    return vals


def _sweep_overrides(command, value, cfg):
    h, L = float(cfg.model["h_lead"]), float(cfg.model["L"])
    if command == "sweep-jumps":
        return {"lam": value}
    if command == "sweep-delivery":
        T = float(cfg.model["T_gc"]) + h + L
        return {"L": value, "T_gc": T - h - value}
    if command == "sweep-horizon":
        return {"T_gc": value - h - L}
    raise UsageError(f"no overrides for {command}")


def _sweep_task(payload):
    cfg, spec, args, command, value = payload
    problem = prepare_day(spec, cfg, **_sweep_overrides(command, value, cfg))
    stack, storage = _solve(cfg, problem, args, False)
    try:
        paths = day_paths(problem, cfg.run["paths"])
        res = evaluate_strategies(problem, stack, paths, cfg, ("OT",))["OT"]
    finally:
        del stack
        storage.finish()
    return value, spec.tag, res


def _quantiles(v):
    return [float(x) for x in np.quantile(v, [0.25, 0.5, 0.75])]


def cmd_sweep(cfg, args):
    command = args.command
    _write_config_echo(cfg)
    values = _parse_values(args.values)
    specs = _days(cfg, args)
    if command == "sweep-regularization":
        rows = []
        for spec in specs:
            problem = prepare_day(spec, cfg)
            curves, grid = problem.curves, problem.grid
            diffs = regularization_sweep(
                problem.params, curves, grid,
                lambda p: solve_terminal_stages(p, curves, grid).values, values,
                SolverOptions(picard=cfg.picard_options()))
            rows += [(spec.tag, float(e), float(d)) for e, d in zip(values, diffs)]
        _atomic_write(_out(cfg, "regularization.csv"), _csv_text(("day", "eps", "sup_diff"), rows))
        return 0
    name = SWEEP_DEFAULTS[command][0]
    jobs = [(cfg, s, args, command, v) for v in values for s in specs]
    results = run_parallel(_sweep_task, jobs, int(cfg.run["workers"]))
    rows, pooled = [], {v: [] for v in values}
    for value, tag, batch in results:
        rows += _pnl_rows(tag, "OT", batch, extra=(float(value),))
        pooled[value].append(batch.pnl)
    summary = []
    for v in values:
        allp = np.concatenate(pooled[v])
        q1, med, q3 = _quantiles(allp)
        summary.append((float(v), int(allp.size), float(np.mean(allp)), med, q1, q3))
    stem = command.replace("-", "_")
    _atomic_write(_out(cfg, f"{stem}.csv"), _csv_text((name,) + PNL_COLUMNS, rows))
    _atomic_write(_out(cfg, f"{stem}_summary.csv"),
                  _csv_text((name, "n", "mean_pnl", "median_pnl", "q25_pnl", "q75_pnl"), summary))
    return 0


def cmd_simulate(cfg, args):
    _write_config_echo(cfg)
    spec = _days(cfg, args)[0]
    problem = prepare_day(spec, cfg, day=load_day(spec, cfg))
    seed = int(cfg.run["seed"])
    paths, summary = simulate_batch(args.kind, int(cfg.run["paths"]), seed, problem.params,
                                    problem.curves, problem.grid, not args.no_compensator)
    t = paths.times
    cols, data = ["t"], [t]
    for key in sorted(summary):
        cols += [f"mean_{key}", f"var_{key}"]
        data += [summary[key].mean, summary[key].var]
    rows = [tuple(float(c[n]) for c in data) for n in range(t.size)]
    _atomic_write(_out(cfg, f"simulate_{args.kind}_summary.csv"), _csv_text(cols, rows))
    if args.dump:
        dump = [(p, float(t[n]), float(paths.X[p, n]), float(paths.Y[p, n]))
                for p in range(len(paths)) for n in range(t.size)]
        _atomic_write(_out(cfg, f"simulate_{args.kind}_paths.csv"),
                      _csv_text(("path", "t", "X", "Y"), dump))
    _atomic_write(_out(cfg, "simulate_diagnostics.json"), _json_text(
        {"day": spec.tag, "clamp_excursions": paths.diagnostics.get("clamp_excursions"),
         "n_paths": len(paths), "seed": seed}))
    return 0


_DISPATCH = {"bounds": cmd_bounds, "solve": cmd_solve, "evaluate": cmd_evaluate,
             "benchmark": cmd_benchmark, "sweep-jumps": cmd_sweep, "sweep-delivery": cmd_sweep,
             "sweep-horizon": cmd_sweep, "sweep-regularization": cmd_sweep,
             "simulate": cmd_simulate}


def main(argv=None):
    """Run one command; returns the process exit status."""
    try:
        args = build_parser().parse_args(argv)
        cfg = _effective_config(args)
        return _DISPATCH[args.command](cfg, args)
    except IntradayError as exc:
        _stderr_record(exc.record())
        return exc.exit_code
    except OSError as exc:
        _stderr_record({"error": type(exc).__name__, "message": str(exc), "context": {}})
        return 3
    except ArithmeticError as exc:
        _stderr_record({"error": type(exc).__name__, "message": str(exc), "context": {}})
        return 4


if __name__ == "__main__":
    sys.exit(main())
