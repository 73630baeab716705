"""Feedback control from a value stack, forward P&L evaluation and benchmarks.

The trading rate is ``clip((y - dV/dq) / gamma)`` with ``dV/dq`` taken from
nodal q-differences (centred inside, one-sided at the edges) and interpolated
multilinearly in ``(t, x, y, q)``.  Any control source (policy, constant rate
or explicit schedule) is evaluated by the same explicit Euler loop on the
solver time nodes.  The TWAP benchmark trades the forecast delivery at a
constant rate; the perfect-foresight benchmark solves the one-dimensional
inventory HJB along the realized path.
"""
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConformanceError, ParameterError
from .hjb_stage3 import PicardOptions, rosenbrock_picard
from .market_model import terminal_penalty
from .simulate import MarketPath, MarketPaths

__all__ = ["Policy", "feedback_psi", "PnLRecord", "PnLBatch", "forward_evaluate",
           "forward_evaluate_batch", "delivery_nodes", "delivery_energy", "twap_rate",
           "PFResult", "pf_solve", "pf_solve_batch", "pf_inventory_window", "GainStats",
           "gain_stats", "day_specific_beta", "path_on_grid"]

_SNAP = 1e-9
_QUARTER_HOUR = 0.25


def _fractional_index(v, origin, step, n):
    """Cell index and weight of ``v`` on ``origin + step * arange(n + 1)``, clamped."""
    s = np.clip((np.asarray(v, dtype=float) - origin) / step, 0.0, float(n))
    r = np.round(s)
    s = np.where(np.abs(s - r) < _SNAP, r, s)
    i0 = np.minimum(np.floor(s).astype(np.intp), n - 1)
    return i0, s - i0


class Policy:
    """Feedback trading rate interpolated from a value stack.

    Parameters
    ----------
    stack : ValueStack
        ``stack.values[n]`` holds ``t = T_gc - n * dt`` on ``(x, y, q)``.
    params : ModelParams, optional
        Defaults to ``stack.params``; supplies ``gamma``.
    """

    def __init__(self, stack, params=None):
        self.stack = stack
        self.grid = stack.grid
        self.params = params if params is not None else stack.params
        if self.params is None:
            raise ParameterError("a Policy needs model parameters")
        self._cache = {}

    def _gradient_level(self, n):
        g = self._cache.get(n)
        if g is None:
            if len(self._cache) >= 2:
                self._cache.pop(next(iter(self._cache)))
            g = np.gradient(np.asarray(self.stack.values[n]), self.grid.dq, axis=2, edge_order=1)
            self._cache[n] = g
        return g

    def _spatial(self, field_, x, y, q):
        g, b = self.grid, self.grid.bounds
        i, wx = _fractional_index(x, 0.0, g.dx, g.N_x)
        j, wy = _fractional_index(y, b.y_min, g.dy, g.N_y)
        k, wq = _fractional_index(q, b.q_min, g.dq, g.N_q)
        out = 0.0
        for di, ax in ((0, 1.0 - wx), (1, wx)):
            for dj, ay in ((0, 1.0 - wy), (1, wy)):
                for dk, aq in ((0, 1.0 - wq), (1, wq)):
                    out = out + ax * ay * aq * field_[i + di, j + dj, k + dk]
        return out

    def grad_q(self, t, x, y, q):
        """Interpolated q-derivative of the value at ``(t, x, y, q)`` (clamped queries)."""
        g = self.grid
        t_gc = g.idx_Tgc * g.dt
        s = float(np.clip((t_gc - float(t)) / g.dt, 0.0, self.stack.n_levels - 1))
        r = round(s)
        if abs(s - r) < _SNAP:
            return self._spatial(self._gradient_level(int(r)), x, y, q)
        lo = min(int(np.floor(s)), self.stack.n_levels - 2)
        w = s - lo
        return ((1.0 - w) * self._spatial(self._gradient_level(lo), x, y, q)
                + w * self._spatial(self._gradient_level(lo + 1), x, y, q))

    def __call__(self, t, x, y, q):
        b = self.grid.bounds
        rate = (np.asarray(y, dtype=float) - self.grad_q(t, x, y, q)) / self.params.gamma
        return np.clip(rate, b.psi_min, b.psi_max)


def feedback_psi(policy, t, x, y, q):
    """Trading rate of ``policy`` at ``(t, x, y, q)`` in MWh/h."""
    return policy(t, x, y, q)


@dataclass
class PnLRecord:
    running_cost: float
    terminal_penalty: float
    delivered_energy: float
    terminal_inventory: float
    total_cost: float
    pnl: float

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class PnLBatch:
    """Per-path P&L arrays plus inventory and rate trajectories on trading nodes."""

    running_cost: np.ndarray
    terminal_penalty: np.ndarray
    delivered_energy: np.ndarray
    terminal_inventory: np.ndarray
    total_cost: np.ndarray
    pnl: np.ndarray
    trading_revenue: np.ndarray
    friction_cost: np.ndarray
    inventory: np.ndarray
    rates: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return self.pnl.shape[0]

    def record(self, i):
        return PnLRecord(*(float(getattr(self, f.name)[i]) for f in fields(PnLRecord)))

    def records(self):
        return [self.record(i) for i in range(len(self))]


def path_on_grid(times, X, Y, grid, T_gc):
    """Resample a recorded path (e.g. 15-minute data) onto the solver nodes.

    Price is frozen at its gate-closure value afterwards.
    """
    t = grid.t
    Xg = np.interp(t, times, X)
    Yg = np.interp(np.minimum(t, T_gc), times, Y)
    return MarketPath(t, Xg, Yg, None)


def _as_arrays(paths, grid):
    if isinstance(paths, MarketPaths):
        times, X, Y = paths.times, paths.X, paths.Y
    elif isinstance(paths, MarketPath):
        times, X, Y = paths.times, paths.X[None, :], paths.Y[None, :]
    else:
        raise ConformanceError("expected MarketPath or MarketPaths")
    times = np.asarray(times, dtype=float)
    if times.shape != (grid.N_t + 1,) or not np.allclose(times, grid.t, rtol=0.0,
                                                         atol=1e-9 * grid.T):
        raise ConformanceError("path times do not match the solver grid",
                               n_path_times=int(times.size), N_t=grid.N_t)
    return np.atleast_2d(X), np.atleast_2d(Y)


def _rate_source(source, grid, n_paths):
    if isinstance(source, Policy):
        return lambda n, x, y, q: source.__call__(n * grid.dt, x, y, q), True
    if np.isscalar(source):
        c = float(source)
        return lambda n, x, y, q: np.full(n_paths, c), False
    if callable(source):
        return lambda n, x, y, q: np.broadcast_to(source(n * grid.dt, x, y, q), (n_paths,)), False
    sched = np.asarray(source, dtype=float)
    if sched.shape[-1] != grid.idx_Tgc:
        raise ConformanceError("schedule length must equal the number of trading steps",
                               length=int(sched.shape[-1]), trading_steps=grid.idx_Tgc)
    sched = np.broadcast_to(sched, (n_paths, grid.idx_Tgc))
    return lambda n, x, y, q: sched[:, n], False


def forward_evaluate_batch(control_source, paths, params, grid, q0=0.0, penalty=None):
    """Explicit Euler evaluation of a control source along each path.

    Parameters
    ----------
    control_source : Policy, float, ndarray or callable
        Feedback policy, constant rate, schedule over trading steps (shape
        ``(idx_Tgc,)`` or ``(n_paths, idx_Tgc)``), or ``f(t, x, y, q)``.
    paths : MarketPath or MarketPaths
        Must sit on the solver time nodes.
    penalty : callable, optional
        Imbalance penalty ``g(xi)``; defaults to ``beta * |xi|``.

    Returns
    -------
    PnLBatch
    """
    X, Y = _as_arrays(paths, grid)
    n_paths = X.shape[0]
    rate_at, is_policy = _rate_source(control_source, grid, n_paths)
    dt, gamma = grid.dt, params.gamma
    n_trade = grid.idx_Tgc
    Q = np.full(n_paths, float(q0))
    inventory = np.empty((n_paths, n_trade + 1))
    rates = np.empty((n_paths, n_trade))
    inventory[:, 0] = Q
    revenue = np.zeros(n_paths)
    friction = np.zeros(n_paths)
    for n in range(n_trade):
        psi = np.asarray(rate_at(n, X[:, n], Y[:, n], Q), dtype=float)
        rates[:, n] = psi
        revenue += -psi * Y[:, n] * dt
        friction += 0.5 * gamma * psi * psi * dt
        Q = Q + psi * dt
        inventory[:, n + 1] = Q
    metered = np.trapezoid(X[:, grid.idx_TmL:], dx=dt, axis=1)
    delivered = params.P_max * metered
    g = penalty or (lambda xi: terminal_penalty(xi, params.beta))
    pen = np.asarray(g(Q - delivered), dtype=float)
    running = revenue + friction
    total = running + pen
    b = grid.bounds
    # summing psi_max * dt over the window can exceed q_max by rounding only
    slack = 1e-9 * (b.q_max - b.q_min)
    diag = {"inventory_min": float(inventory.min()), "inventory_max": float(inventory.max()),
            "inventory_in_bounds": bool(inventory.min() >= b.q_min - slack
                                        and inventory.max() <= b.q_max + slack)}
    if is_policy and q0 == 0.0 and not diag["inventory_in_bounds"]:
        raise ConformanceError("clipped policy left the inventory window", **diag)
    return PnLBatch(running, pen, delivered, Q.copy(), total, -total, revenue, friction,
                    inventory, rates, diag)


def forward_evaluate(control_source, path, params, grid, q0=0.0, penalty=None):
    """Single-path evaluation returning a :class:`PnLRecord`."""
    return forward_evaluate_batch(control_source, path, params, grid, q0, penalty).record(0)


def delivery_nodes(params):
    """Quarter-hour quadrature nodes covering the delivery window ``[T - L, T]``."""
    n_panels = int(round(params.L / _QUARTER_HOUR))
    if n_panels < 1 or abs(n_panels * _QUARTER_HOUR - params.L) > 1e-9:
        raise ParameterError("delivery window must be a whole number of quarter hours",
                             L=params.L)
    return params.T - params.L + _QUARTER_HOUR * np.arange(n_panels + 1)


def delivery_energy(values, params):
    """``P_max`` times the trapezoid rule of ``values`` on the quarter-hour delivery nodes.

    ``values`` is a callable of time or an array of samples on :func:`delivery_nodes`.
    """
    nodes = delivery_nodes(params)
    v = np.asarray(values(nodes) if callable(values) else values, dtype=float)
    return params.P_max * np.trapezoid(v, dx=_QUARTER_HOUR, axis=-1)


def twap_rate(forecast, params, grid=None, q0=0.0):
    """Constant TWAP rate and its target energy.

    Returns
    -------
    (rate, target_energy)
        ``target_energy`` is the forecast delivery; ``rate`` reaches it from
        ``q0`` by gate closure.
    """
    energy = float(delivery_energy(forecast, params))
    return (energy - q0) / params.T_gc, energy


@dataclass
class PFResult:
    """Perfect-foresight schedules for a batch of paths.

    ``schedule`` has shape ``(n_paths, idx_Tgc)``; ``q_grids`` holds each
    path's inventory nodes; ``value_q0`` is the solved value at ``(0, q0)``.
    """

    schedule: np.ndarray
    q_grids: np.ndarray
    energy: np.ndarray
    value_q0: np.ndarray
    values: np.ndarray = None


def _costate_trajectory(Y, lam, q0, gamma, psi_min, psi_max, dt):
    rates = np.clip((Y - lam[:, None]) / gamma, psi_min, psi_max)
    return q0 + np.concatenate([np.zeros((Y.shape[0], 1)), np.cumsum(rates * dt, axis=1)], axis=1)


def pf_inventory_window(Y_trade, energy, params, bounds, dt, q0=0.0, pad=0.05):
    """Per-path inventory window for the perfect-foresight solve.

    Along a deterministic price path the optimal rate is ``clip((Y - c) / gamma)``
    with a constant costate ``c`` in ``[-beta, beta]``; ``c`` is found by
    bisection on the terminal inventory.  The window spans that trajectory,
    ``q0`` and the delivered energy, widened on each side by the distance an
    edge disturbance can travel before ``t = 0`` (the zero-slope closure at
    an edge reads as free inventory and spreads inward at up to
    ``(|Y| + beta) / gamma``), plus ``pad`` of the width.

    Returns
    -------
    (q_lo, q_hi) arrays of shape (n_paths,)
    """
    Y_trade = np.atleast_2d(Y_trade)
    n = Y_trade.shape[0]
    beta = params.beta
    lo = np.full(n, -beta - 1e-9)
    hi = np.full(n, beta + 1e-9)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        end = _costate_trajectory(Y_trade, mid, q0, params.gamma, bounds.psi_min, bounds.psi_max,
                                  dt)[:, -1]
        too_long = end > energy
        lo = np.where(too_long, mid, lo)
        hi = np.where(too_long, hi, mid)
    traj = _costate_trajectory(Y_trade, 0.5 * (lo + hi), q0, params.gamma, bounds.psi_min,
                               bounds.psi_max, dt)
    q_lo = np.minimum(traj.min(axis=1), np.minimum(energy, q0))
    q_hi = np.maximum(traj.max(axis=1), np.maximum(energy, q0))
    speed_cap = max(abs(bounds.psi_min), abs(bounds.psi_max))
    reach = np.sum(np.minimum((np.abs(Y_trade) + beta) / params.gamma, speed_cap) * dt, axis=1)
    width = q_hi - q_lo + 2.0 * reach + 1.0
    return q_lo - reach - pad * width, q_hi + reach + pad * width


def pf_solve_batch(paths, params, grid, n_q=1000, q0=0.0, picard=PicardOptions(), q_window=None,
                   penalty=None, keep_values=False, chunk=64):
    """Perfect-foresight control along each path by the 1D inventory HJB.

    The backward march reuses the Rosenbrock-Picard inventory substep with the
    realized price at each trading node; the forward pass reads the rate
    ``clip((Y - dv/dq) / gamma)`` off the solved value at the current inventory.

    Parameters
    ----------
    n_q : int
        Number of inventory cells per path.
    q_window : (q_lo, q_hi), optional
        Inventory window (scalars or per-path arrays); defaults to
        :func:`pf_inventory_window`.  All paths share the cell count, so the
        lines are solved together even though their windows differ.
    """
    X, Y = _as_arrays(paths, grid)
    n_paths = X.shape[0]
    dt, n_trade = grid.dt, grid.idx_Tgc
    b = grid.bounds
    nodes = delivery_nodes(params)
    energy = np.array([delivery_energy(np.interp(nodes, grid.t, X[p]), params)
                       for p in range(n_paths)])
    Y_trade = Y[:, :n_trade]
    if q_window is None:
        q_lo, q_hi = pf_inventory_window(Y_trade, energy, params, b, dt, q0)
    else:
        q_lo = np.broadcast_to(np.asarray(q_window[0], dtype=float), (n_paths,))
        q_hi = np.broadcast_to(np.asarray(q_window[1], dtype=float), (n_paths,))
    # One shared cell width keeps every line on the same tridiagonal stencil.
    dq = float(np.max(q_hi - q_lo)) / n_q
    # Shift each window so the delivered energy (the penalty kink) is a node.
    origin = energy - np.round((energy - 0.5 * (q_lo + q_hi)) / dq + 0.5 * n_q) * dq
    q_grids = origin[:, None] + dq * np.arange(n_q + 1)[None, :]
    g = penalty or (lambda xi: terminal_penalty(xi, params.beta))
    schedule = np.empty((n_paths, n_trade))
    value_q0 = np.empty(n_paths)
    kept = np.empty((n_trade + 1, n_paths, n_q + 1)) if keep_values else None
    for start in range(0, n_paths, chunk):
        sl = slice(start, min(start + chunk, n_paths))
        qg = q_grids[sl]
        levels = np.empty((n_trade + 1,) + qg.shape)
        V = g(qg - energy[sl, None])
        levels[0] = V
        for n in range(n_trade):
            y = Y[sl, n_trade - n - 1]
            V = rosenbrock_picard(V, y, dq, dt, params.gamma, b.psi_min, b.psi_max, picard).U
            levels[n + 1] = V
        if keep_values:
            kept[:, sl] = levels
        rows = np.arange(qg.shape[0])
        k0, w0 = _fractional_index(q0 - qg[:, 0], 0.0, dq, n_q)
        value_q0[sl] = (1 - w0) * levels[n_trade, rows, k0] + w0 * levels[n_trade, rows, k0 + 1]
        Q = np.full(qg.shape[0], float(q0))
        for n in range(n_trade):
            grad = np.gradient(levels[n_trade - n], dq, axis=1, edge_order=1)
            k, w = _fractional_index(Q - qg[:, 0], 0.0, dq, n_q)
            slope = (1 - w) * grad[rows, k] + w * grad[rows, k + 1]
            psi = np.clip((Y[sl, n] - slope) / params.gamma, b.psi_min, b.psi_max)
            schedule[sl, n] = psi
            Q = Q + psi * dt
    return PFResult(schedule, q_grids, energy, value_q0, kept)


def pf_solve(path, params, grid, n_q=1000, q0=0.0, picard=PicardOptions(), q_window=None,
             penalty=None, keep_values=False):
    """Perfect-foresight schedule over the trading nodes for one path."""
    res = pf_solve_batch(path, params, grid, n_q, q0, picard, q_window, penalty, keep_values)
    return PFResult(res.schedule[0], res.q_grids[0], res.energy[0], res.value_q0[0],
                    None if res.values is None else res.values[:, 0])


@dataclass
class GainStats:
    """Daywise gains of strategy A over strategy B."""

    abs_mean: float
    abs_median: float
    abs_max: float
    abs_min: float
    rel_mean: float
    rel_median: float
    rel_max: float
    rel_min: float
    win_rate: float
    n_days: int
    n_rel_undefined: int
    absolute: np.ndarray
    relative: np.ndarray

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)
                if f.name not in ("absolute", "relative")}


def _pnl_values(records):
    out = []
    for r in records:
        out.append(float(r.pnl) if hasattr(r, "pnl") else float(r))
    return np.array(out)


def gain_stats(records_A, records_B):
    """Absolute and relative daywise gains, their summary statistics and win rate.

    Days with ``pnl_B == 0`` have an undefined relative gain (NaN); they are
    excluded from the relative statistics and counted.
    """
    a, b = _pnl_values(records_A), _pnl_values(records_B)
    if a.shape != b.shape or a.size == 0:
        raise ParameterError("gain_stats needs two equally long, non-empty day lists",
                             n_A=int(a.size), n_B=int(b.size))
    ga = a - b
    denom = np.abs(b)
    defined = denom > 0
    gr = np.full_like(ga, np.nan)
    gr[defined] = 100.0 * ga[defined] / denom[defined]
    rel = gr[defined]

    def stats(v):
        if v.size == 0:
            return (float("nan"),) * 4
        return float(np.mean(v)), float(np.median(v)), float(np.max(v)), float(np.min(v))

    return GainStats(*stats(ga), *stats(rel), float(np.count_nonzero(ga > 0)) / ga.size,
                     int(ga.size), int(np.count_nonzero(~defined)), ga, gr)


def day_specific_beta(curves, params):
    """Imbalance price set to the largest absolute forecast price over the trading window."""
    price = curves.price
    inside = (price.times > 0.0) & (price.times < params.T_gc)
    samples = np.concatenate([price(np.array([0.0, params.T_gc])), price.values[inside]])
    return float(np.max(np.abs(samples)))
