"""Day-level orchestration: prepare a trading day, solve it, evaluate strategies.

A *day source* is either a synthetic generator (days identified by an index)
or a data directory holding ``prices.csv`` and ``production_<date>.csv``
files.  Every function here is a deterministic function of its inputs; random
paths come from seeds derived from ``(run seed, day index)``.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
import os

import numpy as np

from .data import load_trading_day, shift_curves, synthetic_day
from .domain_bounds import build_grid, compute_bounds
from .errors import DataError, ParameterError
from .hjb_stage3 import SolverOptions, solve_stage3
from .kbe_stages import solve_terminal_stages
from .policy_eval import (Policy, day_specific_beta, forward_evaluate_batch, path_on_grid,
                          pf_solve_batch, twap_rate)
from .simulate import MarketPaths, simulate_paths

__all__ = ["DayProblem", "DaySpec", "list_days", "load_day", "prepare_day", "solve_day",
           "day_path_seed", "day_paths", "evaluate_strategies", "run_parallel", "STRATEGIES",
           "DAY_LENGTH"]

STRATEGIES = ("OT", "TWAP", "PF")
DAY_LENGTH = 24.0


@dataclass(frozen=True)
class DaySpec:
    """Where a day comes from: ``source`` is ``"synthetic"`` or a data directory."""

    tag: str
    index: int
    source: str = "synthetic"
    seed: int = 0


@dataclass
class DayProblem:
    """A trading day made concrete: parameters, curves, bounds and grid."""

    spec: DaySpec
    params: object
    curves: object
    bounds: object
    grid: object
    offset: float = 0.0
    realized: tuple = None
    price_proxy: tuple = None


def _production_files(data_dir):
    names = sorted(n for n in os.listdir(data_dir)
                   if n.startswith("production_") and n.endswith(".csv"))
    return [(n[len("production_"):-len(".csv")], os.path.join(data_dir, n)) for n in names]


def list_days(days, seed, data_dir=None):
    """Resolve ``--days`` (a count or a comma list) into day specs.

    Counts select the first days (synthetic indices ``0..n-1`` or the sorted
    data files); lists give synthetic indices or data dates.
    """
    text = str(days).strip()
    if data_dir is None:
        try:
            idx = (list(range(int(text))) if "," not in text and text.isdigit()
                   else [int(v) for v in text.split(",") if v.strip()])
        except ValueError as exc:
            raise ParameterError(f"cannot parse day list {days!r}") from exc
        if text.isdigit() and int(text) < 1:
            raise ParameterError("day count must be at least 1")
        return [DaySpec(f"synthetic-{i}", i, "synthetic", int(seed)) for i in idx]
    if not os.path.isdir(data_dir):
        raise DataError("data directory not found", path=str(data_dir))
    files = _production_files(data_dir)
    if not files:
        raise DataError("no production_<date>.csv files in the data directory",
                        path=str(data_dir))
    dates = [d for d, _ in files]
    if text.isdigit():
        chosen = dates[:int(text)]
    else:
        chosen = [v.strip() for v in text.split(",") if v.strip()]
        missing = [d for d in chosen if d not in dates]
        if missing:
            raise DataError("requested days not in the data directory", days=",".join(missing))
    return [DaySpec(d, dates.index(d), str(data_dir), int(seed)) for d in chosen]


def load_day(spec, cfg):
    """Market data of one day (synthetic or ingested)."""
    p = cfg.model
    if spec.source == "synthetic":
        return synthetic_day(spec.index, DAY_LENGTH, eps_tr=float(p["eps_tr"]))
    return load_trading_day(os.path.join(spec.source, f"production_{spec.tag}.csv"),
                            os.path.join(spec.source, "prices.csv"), eps_tr=float(p["eps_tr"]),
                            horizon=DAY_LENGTH)


def _shift_samples(samples, offset, horizon):
    if samples is None:
        return None
    t, v = samples
    keep = (t >= offset - 1e-9) & (t <= offset + horizon + 1e-9)
    return t[keep] - offset, v[keep]


def prepare_day(spec, cfg, day=None, **overrides):
    """Parameters (with day-specific imbalance price), bounds and grid for one day.

    The delivery hour sits at the end of the calendar day; a horizon ``T``
    shorter than a day starts trading at ``24 - T``.
    """
    day = day if day is not None else load_day(spec, cfg)
    base = cfg.params(**overrides)
    if base.T > DAY_LENGTH + 1e-9:
        raise ParameterError("horizon exceeds one day", T=base.T)
    offset = DAY_LENGTH - base.T
    curves = day.curves if offset < 1e-12 else shift_curves(day.curves, offset, base.T)
    params = base
    if cfg.benchmark["day_beta"] and "beta" not in overrides:
        params = base.replace(beta=day_specific_beta(curves, base))
    b = cfg.bounds
    bounds = compute_bounds(params, curves, float(b["eps_tail"]), cfg.alphas(),
                            float(b["eps_pad"]), int(b["mU_paths"]), int(b["mU_steps"]),
                            int(b["mU_seed"]))
    grid = build_grid(params, bounds, cfg.resolutions())
    return DayProblem(spec, params, curves, bounds, grid, offset,
                      _shift_samples(day.realized, offset, base.T),
                      _shift_samples(day.price_proxy, offset, base.T))


def solve_day(problem, cfg, storage=None, progress=None):
    """Stages I and II, then the Stage III march; returns the value stack."""
    terminal = solve_terminal_stages(problem.params, problem.curves, problem.grid)
    options = SolverOptions(picard=cfg.picard_options())
    return solve_stage3(problem.params, problem.curves, problem.grid, terminal.values, options,
                        storage=storage, progress=progress)


def day_path_seed(seed, index):
    """Master path seed of day ``index`` under run seed ``seed``."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def day_paths(problem, n_paths):
    """Evaluation paths: simulated for synthetic days, the realized day otherwise."""
    grid, params = problem.grid, problem.params
    if problem.spec.source == "synthetic" or problem.realized is None:
        return simulate_paths(params, problem.curves, grid, int(n_paths),
                              day_path_seed(problem.spec.seed, problem.spec.index))
    t, X = problem.realized
    ty, Y = problem.price_proxy
    path = path_on_grid(t, X, np.interp(t, ty, Y), grid, params.T_gc)
    return MarketPaths(path.times, path.X[None, :], path.Y[None, :], ["realized"])


def evaluate_strategies(problem, stack, paths, cfg, strategies=STRATEGIES):
    """P&L batches of each requested strategy on the same paths."""
    params, grid = problem.params, problem.grid
    q0 = float(cfg.benchmark["q0"])
    out = {}
    for name in strategies:
        if name == "OT":
            if stack is None:
                raise ParameterError("OT evaluation needs a value stack")
            source = Policy(stack, params)
        elif name == "TWAP":
            source, _ = twap_rate(problem.curves.production, params, grid, q0)
        elif name == "PF":
            res = pf_solve_batch(paths, params, grid, int(cfg.benchmark["pf_n_q"]), q0,
                                 cfg.picard_options())
            source = res.schedule
        else:
            raise ParameterError(f"unknown strategy {name!r}")
        out[name] = forward_evaluate_batch(source, paths, params, grid, q0)
    return out


def run_parallel(func, items, workers=1):
    """``[func(i) for i in items]``, fanned out to processes when ``workers > 1``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(i) for i in items]
    with ProcessPoolExecutor(max_workers=int(workers)) as pool:
        return list(pool.map(func, items))
