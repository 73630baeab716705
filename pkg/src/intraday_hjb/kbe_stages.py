"""Backward Kolmogorov solves for the delivery window and the lead time.

Stage I runs over the delivery window ``[T - L, T]`` on the (production,
metered energy) plane, one right-hand side per inventory node, starting from
the imbalance penalty.  Stage II continues over the lead time
``[T_gc, T - L]`` in production only, starting from the zero-metered-energy
slice.  Both steps are fully implicit with upwind transport, so every step is
an M-matrix solve: ordering and the discrete maximum principle are preserved.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError
from .fd_kernels import StencilSystem, TridiagonalSystem, apply_closure, thomas_solve
from .market_model import terminal_penalty, wind_diffusion, wind_drift

__all__ = ["StageIField", "StageIIField", "terminal_penalty", "stage1_terminal",
           "stage1_solve", "stage2_solve", "solve_terminal_stages"]


@dataclass
class StageIField:
    """Stage I values on ``(x, m, q)`` at one time."""

    values: np.ndarray
    q_values: np.ndarray
    time: float

    def m0_slice(self):
        return self.values[:, 0, :]


@dataclass
class StageIIField:
    """Stage II values on ``(x, q)`` at one time."""

    values: np.ndarray
    q_values: np.ndarray
    time: float


def stage1_terminal(params, grid, q_values, penalty=None, n_extra=0):
    """Terminal data ``g(q - P_max m)`` broadcast over ``(x, m, q)``."""
    penalty = penalty or (lambda xi: terminal_penalty(xi, params.beta))
    m = grid.dm * np.arange(grid.N_m + 1 + n_extra)
    imbalance = q_values[None, :] - params.P_max * m[:, None]
    v = penalty(imbalance)
    return np.broadcast_to(v[None, :, :], (grid.N_x + 1,) + v.shape).copy()


def _x_coefficients(t, params, curves, grid, dtau):
    x = grid.x[1:-1]
    mu = wind_drift(t, x, params, curves)
    diff = wind_diffusion(x, params) ** 2 / (2.0 * grid.dx**2)
    west = -dtau * (np.maximum(-mu, 0.0) / grid.dx + diff)
    east = -dtau * (np.maximum(mu, 0.0) / grid.dx + diff)
    centre = 1.0 + dtau * (np.abs(mu) / grid.dx + 2.0 * diff)
    return west, centre, east


def _check_finite(V, stage, n):
    if not np.all(np.isfinite(V)):
        raise DivergenceError("non-finite values in backward march", stage=stage, time_index=n)


def stage1_solve(params, curves, grid, q_values=None, terminal=None, penalty=None,
                 m_buffer=2.0):
    """March the delivery-window equation from ``T`` back to ``T - L``.

    Parameters
    ----------
    q_values : array_like, optional
        Inventory levels; defaults to the grid's q-nodes.
    terminal : ndarray, optional
        Replacement terminal data on ``(x, m, q)`` (tests); defaults to the
        imbalance penalty.
    penalty : callable, optional
        Imbalance penalty ``g(xi)``; defaults to ``beta * |xi|``.
    m_buffer : float
        Extra metering range, in units of ``L``, appended beyond ``m = L``.
        Characteristics started in ``[0, L]`` travel at most ``L`` further,
        so with a buffer of ``2 L`` the closure at the far edge cannot reach
        the returned nodes (up to exponentially small numerical diffusion).

    Notes
    -----
    Transport in ``m`` has speed ``x >= 0``, so the backward-in-time upwind
    difference looks towards larger ``m``: the ``m = 0`` row is solved with
    the equation itself and only the far ``m`` edge uses the closure.
    The returned field is restricted to ``m`` in ``[0, L]``.
    """
    q_values = grid.q if q_values is None else np.atleast_1d(np.asarray(q_values, dtype=float))
    n_extra = int(np.ceil(m_buffer * grid.N_m - 1e-9))
    V = (stage1_terminal(params, grid, q_values, penalty, n_extra) if terminal is None
         else np.array(terminal, dtype=float))
    dtau, dm = grid.dt, grid.dm
    x_int = grid.x[1:-1]
    for n in range(grid.N_t - 1, grid.idx_TmL - 1, -1):
        t = n * grid.dt
        west, centre, east = _x_coefficients(t, params, curves, grid, dtau)
        up_m = -dtau * x_int / dm
        shape = (grid.N_x - 1, grid.N_m + n_extra)
        system = StencilSystem(
            np.broadcast_to((centre - up_m)[:, None], shape),
            {(-1, 0): np.broadcast_to(west[:, None], shape),
             (1, 0): np.broadcast_to(east[:, None], shape),
             (0, 1): np.broadcast_to(up_m[:, None], shape)})
        sol = system.factorize().solve(V[1:-1, :-1, :])
        V[1:-1, :-1, :] = sol
        apply_closure(V, axes=(0,))
        V[:, -1, :] = V[:, -2, :]
        _check_finite(V, "stage1", n)
    return StageIField(V[:, :grid.N_m + 1, :], q_values, grid.idx_TmL * grid.dt)


def stage2_solve(params, curves, grid, stage1_m0_slice, q_values=None):
    """March the lead-time equation in ``x`` from ``T - L`` back to ``T_gc``."""
    V = np.array(stage1_m0_slice, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    q_values = grid.q if q_values is None else np.atleast_1d(np.asarray(q_values, dtype=float))
    dtau = grid.dt
    for n in range(grid.idx_TmL - 1, grid.idx_Tgc - 1, -1):
        t = n * grid.dt
        west, centre, east = _x_coefficients(t, params, curves, grid, dtau)
        diag = centre.copy()
        diag[0] += west[0]
        diag[-1] += east[-1]
        lower = west.copy()
        upper = east.copy()
        lower[0] = 0.0
        upper[-1] = 0.0
        rhs = V[1:-1, :].T
        V[1:-1, :] = thomas_solve(TridiagonalSystem(lower, diag, upper, rhs)).T
        apply_closure(V, axes=(0,))
        _check_finite(V, "stage2", n)
    out = V if np.ndim(stage1_m0_slice) > 1 else V[:, 0]
    return StageIIField(out, q_values, grid.idx_Tgc * grid.dt)


def solve_terminal_stages(params, curves, grid, penalty=None):
    """Stage I then Stage II; returns the Stage III terminal on ``(x, q)``."""
    s1 = stage1_solve(params, curves, grid, penalty=penalty)
    return stage2_solve(params, curves, grid, s1.m0_slice(), s1.q_values)
