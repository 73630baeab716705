"""Monte Carlo paths of production and price on the solver time grid.

Production uses Euler-Maruyama with clamping to ``[0, 1]``; price uses
Euler-Maruyama with a Gaussian shock correlated to the production shock and a
per-step compound Poisson jump sum.  Every path draws its randomness from its
own generator seeded with ``(master_seed, path_index)``, so a path does not
change when the batch size or chunking changes.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .market_model import JumpLaw, price_drift, wind_diffusion, wind_drift

__all__ = ["MarketPath", "MarketPaths", "path_rng", "simulate_paths", "simulate_wind_path",
           "simulate_price_path", "simulate_batch", "BatchSummary"]

_CHUNK = 4096


@dataclass
class MarketPath:
    """One trajectory on uniform times; ``Y`` is frozen after gate closure."""

    times: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    seed: object = None


@dataclass
class MarketPaths:
    """A batch of trajectories, arrays of shape ``(n_paths, N_t + 1)``."""

    times: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    seeds: list
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return self.X.shape[0]

    def path(self, i):
        return MarketPath(self.times, self.X[i], self.Y[i], self.seeds[i])


def path_rng(master_seed, index):
    """Generator of path ``index`` under ``master_seed``."""
    return np.random.default_rng([int(master_seed), int(index)])


def _draw_chunk(master_seed, first, count, n_steps, lam_dt, law):
    normals = np.empty((2, count, n_steps))
    jumps = np.zeros((count, n_steps))
    for c in range(count):
        rng = path_rng(master_seed, first + c)
        normals[:, c, :] = rng.standard_normal((2, n_steps))
        if lam_dt > 0:
            counts = rng.poisson(lam_dt, n_steps)
            total = int(counts.sum())
            if total:
                u = rng.random((2, total))
                sizes = law.sample(u[0], u[1])
                jumps[c] = np.bincount(np.repeat(np.arange(n_steps), counts), weights=sizes,
                                       minlength=n_steps)
    return normals, jumps


def simulate_paths(params, curves, grid, n_paths, master_seed, compensate=True, X0=None, Y0=None,
                   first_index=0):
    """Joint production/price paths on the grid's time nodes over ``[0, T]``.

    Parameters
    ----------
    compensate : bool
        Keep the jump compensator ``-lam E[Z]`` in the price drift.  Setting it
        to ``False`` gives the uncompensated test build.
    first_index : int
        Index of the first path (paths ``first_index ...`` are generated).

    Returns
    -------
    MarketPaths
        ``diagnostics["clamp_excursions"]`` counts pre-clamp production
        values outside ``[0, 1]``.
    """
    if n_paths < 1:
        raise ParameterError("n_paths must be at least 1", n_paths=n_paths)
    n_steps = grid.N_t
    dt = grid.dt
    times = grid.t
    law = JumpLaw.from_params(params)
    lam_dt = params.lam * dt
    sqdt = np.sqrt(dt)
    rho = params.rho
    rho_c = np.sqrt(max(0.0, 1.0 - rho * rho))
    X = np.empty((n_paths, n_steps + 1))
    Y = np.empty((n_paths, n_steps + 1))
    X[:, 0] = curves.production(0.0) if X0 is None else X0
    Y[:, 0] = curves.price(0.0) if Y0 is None else Y0
    excursions = 0
    n_gc = grid.idx_Tgc
    # Forecast terms evaluated once per node, shared by all paths.
    p_x = curves.production(times)
    p_y = curves.price(np.minimum(times, params.T_gc))
    for start in range(0, n_paths, _CHUNK):
        m = min(_CHUNK, n_paths - start)
        normals, jumps = _draw_chunk(master_seed, first_index + start, m, n_steps, lam_dt, law)
        x = X[start:start + m, 0].copy()
        y = Y[start:start + m, 0].copy()
        for n in range(n_steps):
            t = times[n]
            xi_x = normals[0, :, n]
            x_new = x + wind_drift(t, x, params, curves) * dt + wind_diffusion(x, params) * sqdt * xi_x
            excursions += int(np.count_nonzero((x_new < 0.0) | (x_new > 1.0)))
            if n < n_gc:
                xi_y = rho * xi_x + rho_c * normals[1, :, n]
                y = (y + price_drift(t, y, params, curves, compensate) * dt
                     + params.sigma * sqdt * xi_y + jumps[:, n])
            x = np.clip(x_new, 0.0, 1.0)
            X[start:start + m, n + 1] = x
            Y[start:start + m, n + 1] = y
    seeds = [(int(master_seed), first_index + i) for i in range(n_paths)]
    diag = {"clamp_excursions": excursions, "steps": n_paths * n_steps,
            "forecast_X": p_x, "forecast_Y": p_y}
    return MarketPaths(times, X, Y, seeds, diag)


def simulate_wind_path(params, curves, grid, seed, n_paths=1):
    """Production samples (``n_paths`` rows) under ``seed``."""
    paths = simulate_paths(params.replace(lam=0.0), curves, grid, n_paths, seed)
    return paths.X[0] if n_paths == 1 else paths.X


def simulate_price_path(params, curves, grid, seed, n_paths=1, compensate=True):
    """Price samples (``n_paths`` rows) under ``seed``."""
    paths = simulate_paths(params, curves, grid, n_paths, seed, compensate)
    return paths.Y[0] if n_paths == 1 else paths.Y


@dataclass
class BatchSummary:
    times: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    n_paths: int

    def standard_error(self):
        return np.sqrt(self.var / max(self.n_paths, 1))


def _summary(times, A):
    n = A.shape[0]
    mean = A.mean(axis=0)
    var = A.var(axis=0, ddof=1) if n > 1 else np.zeros_like(mean)
    return BatchSummary(times, mean, var, n)


def simulate_batch(kind, n_paths, master_seed, params, curves, grid, compensate=True):
    """Paths plus mean/variance trajectories.

    Parameters
    ----------
    kind : {"wind", "price", "both"}

    Returns
    -------
    (MarketPaths, dict of BatchSummary)
    """
    if kind not in ("wind", "price", "both"):
        raise ParameterError(f"unknown batch kind {kind!r}")
    run = params.replace(lam=0.0) if kind == "wind" else params
    paths = simulate_paths(run, curves, grid, n_paths, master_seed, compensate)
    summary = {}
    if kind in ("wind", "both"):
        summary["X"] = _summary(paths.times, paths.X)
    if kind in ("price", "both"):
        summary["Y"] = _summary(paths.times, paths.Y)
    return paths, summary
