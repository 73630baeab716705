"""Truncated computational domain and the uniform space-time grid.

The price window is the forecast band widened by a high-probability bound on
the price deviation (a Gaussian part from the supremum of the OU integral and
a jump part from Chernoff bounds on the compensated compound Poisson sum).
Inventory and trading-rate windows follow from the linear envelope of the
optimal rate over the trading window.
"""
from dataclasses import dataclass, asdict
from fractions import Fraction
import math

import numpy as np

from .errors import AlignmentError, CFLError, DivergentMGFError, ParameterError
from .market_model import JumpLaw

__all__ = ["DomainBounds", "Grid", "estimate_mU", "deviation_bound", "inventory_bounds",
           "compute_bounds", "build_grid", "align_time_steps", "fixed_bounds"]

_PATHS_PER_CHUNK = 4096


@dataclass(frozen=True)
class DomainBounds:
    y_min: float
    y_max: float
    q_min: float
    q_max: float
    psi_min: float
    psi_max: float
    K_total: float
    K_U: float
    K_J: float
    eps_tail: float
    m_U: float
    sigma_sup: float
    eps_pad: float

    def __post_init__(self):
        if not self.y_min < self.y_max:
            raise ParameterError("y_min must be below y_max", y_min=self.y_min, y_max=self.y_max)
        if not self.q_min < self.q_max:
            raise ParameterError("q_min must be below q_max", q_min=self.q_min, q_max=self.q_max)
        if not self.psi_min <= self.psi_max:
            raise ParameterError("psi_min must not exceed psi_max")

    def as_dict(self):
        return asdict(self)

    def replace(self, **changes):
        d = self.as_dict()
        d.update(changes)
        return DomainBounds(**d)


def estimate_mU(params, n_paths=10_000, n_steps=550, seed=0, return_se=False):
    """Monte Carlo estimate of ``E[sup_t U_t]`` for the OU integral on ``[0, T_gc]``.

    ``U`` starts at zero and is advanced with its exact Gaussian transition.
    Paths are generated in fixed-size chunks whose seeds are spawned from
    ``seed``, so the result does not depend on how chunks are scheduled.
    """
    if n_paths < 1000:
        raise ParameterError("estimate_mU needs at least 1000 paths", n_paths=n_paths)
    dt = params.T_gc / n_steps
    decay = math.exp(-params.kappa * dt)
    step_sd = params.sigma * math.sqrt((1.0 - decay**2) / (2.0 * params.kappa))
    n_chunks = -(-n_paths // _PATHS_PER_CHUNK)
    seeds = np.random.SeedSequence(seed).spawn(n_chunks)
    total = 0.0
    total_sq = 0.0
    for c, ss in enumerate(seeds):
        m = min(_PATHS_PER_CHUNK, n_paths - c * _PATHS_PER_CHUNK)
        rng = np.random.default_rng(ss)
        u = np.zeros(m)
        run_max = np.zeros(m)
        for _ in range(n_steps):
            u = decay * u + step_sd * rng.standard_normal(m)
            np.maximum(run_max, u, out=run_max)
        total += float(run_max.sum())
        total_sq += float(np.dot(run_max, run_max))
    mean = total / n_paths
    if not return_se:
        return mean
    var = max(total_sq / n_paths - mean**2, 0.0) * n_paths / (n_paths - 1)
    return mean, math.sqrt(var / n_paths)


def deviation_bound(params, eps_tail, alphas=None, m_U=0.0):
    """High-probability bound on ``sup |Y_t - p_Y(t)|`` over the trading window.

    Returns
    -------
    (K_total, K_U, K_J, sigma_sup)
    """
    if not 0.0 < eps_tail < 1.0:
        raise ParameterError("eps_tail must lie in (0, 1)", eps_tail=eps_tail)
    law = JumpLaw.from_params(params)
    a_up, a_down = alphas if alphas is not None else (params.eta_plus / 2, params.eta_minus / 2)
    if not (0.0 < a_up < params.eta_plus and 0.0 < a_down < params.eta_minus):
        raise DivergentMGFError("Chernoff exponents must lie in (0, eta_plus) and (0, eta_minus)",
                                alpha_up=a_up, alpha_down=a_down)
    T = params.T_gc
    sigma_sup = params.sigma * math.sqrt((1.0 - math.exp(-2.0 * params.kappa * T))
                                         / (2.0 * params.kappa))
    K_U = m_U + sigma_sup * math.sqrt(2.0 * math.log(4.0 / eps_tail))
    log_tail = math.log(eps_tail / 4.0)
    up = (float(law.cumulant_c(a_up)) * T - log_tail) / a_up
    down = (float(law.cumulant_c(-a_down)) * T - log_tail) / a_down
    K_J = 2.0 * max(up, down)
    return K_U + K_J, K_U, K_J, sigma_sup


def inventory_bounds(y_min, y_max, beta, gamma, T_gc, eps_pad):
    """Inventory and rate windows from the linear envelope of the optimal rate.

    Returns
    -------
    (q_min, q_max, psi_min, psi_max)
    """
    if not y_min < y_max:
        raise ParameterError("y_min must be below y_max", y_min=y_min, y_max=y_max)
    if not eps_pad > 0:
        raise ParameterError("eps_pad must be positive", eps_pad=eps_pad)
    q_min = T_gc * min((y_min - beta) / gamma, 0.0) - eps_pad
    q_max = T_gc * max((y_max + beta) / gamma, 0.0) + eps_pad
    return q_min, q_max, q_min / T_gc, q_max / T_gc


def compute_bounds(params, curves, eps_tail=0.01, alphas=None, eps_pad=1.0,
                   n_paths=10_000, n_steps=550, seed=0, m_U=None):
    """Full :class:`DomainBounds` for one trading day."""
    if m_U is None:
        m_U = estimate_mU(params, n_paths=n_paths, n_steps=n_steps, seed=seed)
    K, K_U, K_J, sigma_sup = deviation_bound(params, eps_tail, alphas, m_U)
    price = curves.price
    inside = (price.times > 0.0) & (price.times < params.T_gc)
    samples = np.concatenate([price(np.array([0.0, params.T_gc])), price.values[inside]])
    y_min = float(samples.min()) - K
    y_max = float(samples.max()) + K
    q_min, q_max, psi_min, psi_max = inventory_bounds(y_min, y_max, params.beta, params.gamma,
                                                      params.T_gc, eps_pad)
    return DomainBounds(y_min, y_max, q_min, q_max, psi_min, psi_max, K, K_U, K_J,
                        eps_tail, m_U, sigma_sup, eps_pad)


def _is_aligned(n, ratio, tol=1e-9):
    v = ratio * n
    return abs(v - round(v)) <= tol * max(1.0, abs(v))


def align_time_steps(params, n_requested, max_factor=50):
    """Smallest ``N_t >= n_requested`` putting ``T_gc`` and ``T - L`` on nodes with ``dt <= 1/lam``."""
    T = params.T
    ratios = (params.T_gc / T, (T - params.L) / T)
    n_min = int(n_requested)
    if params.lam > 0:
        n_min = max(n_min, math.ceil(T * params.lam))
    for n in range(n_min, max(n_min * max_factor, 100_000) + 1):
        if all(_is_aligned(n, r) for r in ratios):
            return n
    suggest = [Fraction(r).limit_denominator(10_000) for r in ratios]
    denom = math.lcm(*(f.denominator for f in suggest))
    raise AlignmentError("no uniform time grid places T_gc and T - L on nodes; "
                         "give the hour values as exact fractions (e.g. T_gc = 275/12)",
                         suggested_N_t=denom * max(1, -(-n_min // denom)),
                         T_gc=params.T_gc, T=T)


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid over ``(t, x, y, q)`` plus the metering axis ``m``."""

    N_x: int
    N_y: int
    N_q: int
    N_m: int
    N_t: int
    bounds: DomainBounds
    T: float
    L: float
    idx_Tgc: int
    idx_TmL: int

    @property
    def dt(self):
        return self.T / self.N_t

    @property
    def dx(self):
        return 1.0 / self.N_x

    @property
    def dy(self):
        return (self.bounds.y_max - self.bounds.y_min) / self.N_y

    @property
    def dq(self):
        return (self.bounds.q_max - self.bounds.q_min) / self.N_q

    @property
    def dm(self):
        return self.L / self.N_m

    @property
    def idx_lead(self):
        """Time index of the end of the lead time (start of the delivery window)."""
        return self.idx_TmL

    @property
    def t(self):
        return self.dt * np.arange(self.N_t + 1)

    @property
    def x(self):
        return self.dx * np.arange(self.N_x + 1)

    @property
    def y(self):
        return self.bounds.y_min + self.dy * np.arange(self.N_y + 1)

    @property
    def q(self):
        return self.bounds.q_min + self.dq * np.arange(self.N_q + 1)

    @property
    def m(self):
        return self.dm * np.arange(self.N_m + 1)

    @property
    def shape(self):
        return (self.N_x + 1, self.N_y + 1, self.N_q + 1)

    def resolutions(self):
        return (self.N_x, self.N_y, self.N_q, self.N_m, self.N_t)


def build_grid(params, bounds, resolutions):
    """Uniform grid with ``N_t`` raised minimally to align the stage boundaries.

    Parameters
    ----------
    resolutions : tuple
        ``(N_x, N_y, N_q, N_m, N_t)``; ``N_t`` is a request.
    """
    N_x, N_y, N_q, N_m, N_t = (int(r) for r in resolutions)
    if min(N_x, N_y, N_q, N_m, N_t) < 2:
        raise ParameterError("every resolution must be at least 2",
                             resolutions=str(tuple(resolutions)))
    N_t = align_time_steps(params, N_t)
    T = params.T
    dt = T / N_t
    if params.lam > 0 and dt * params.lam > 1.0 + 1e-12:
        raise CFLError("time step exceeds 1/lam", dt=dt, lam=params.lam)
    return Grid(N_x, N_y, N_q, N_m, N_t, bounds, T, params.L,
                int(round(params.T_gc / dt)), int(round((T - params.L) / dt)))


def fixed_bounds(y_min, y_max, q_min, q_max, psi_min=None, psi_max=None, T_gc=None):
    """Bounds given directly (tests, sweeps with a frozen domain).

    Rate bounds default to the inventory window divided by ``T_gc``.
    """
    if psi_min is None or psi_max is None:
        if T_gc is None:
            raise ParameterError("give psi bounds or T_gc")
        psi_min, psi_max = q_min / T_gc, q_max / T_gc
    return DomainBounds(float(y_min), float(y_max), float(q_min), float(q_max), float(psi_min),
                        float(psi_max), 0.0, 0.0, 0.0, float("nan"), 0.0, 0.0, 0.0)
