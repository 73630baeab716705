"""Model coefficients, forecast curves and the double-exponential jump law.

Every other module evaluates the dynamics through the functions defined here:

* wind (normalized production) ``X`` follows a Jacobi-type diffusion with a
  time-dependent mean-reversion rate that keeps it inside ``[0, 1]``;
* price ``Y`` mean-reverts around a forecast trajectory and carries compensated
  compound Poisson jumps with asymmetric exponential sizes.
"""
from dataclasses import dataclass, field, fields, replace, asdict
from fractions import Fraction

import numpy as np

from .errors import DivergentMGFError, DomainError, MalformedCurveError, ParameterError

__all__ = [
    "ModelParams", "ForecastCurve", "MarketCurves", "JumpLaw", "JumpStats",
    "truncate_forecast", "theta_of_t", "coefficients", "wind_drift",
    "wind_diffusion", "price_drift", "regularized_sigma", "jump_law_stats",
    "sample_jump", "terminal_penalty",
]

# Knot times are compared with this slack so that grid nodes computed in
# floating point never trip the no-extrapolation rule.
_TIME_TOL = 1e-9


@dataclass(frozen=True)
class ModelParams:
    """Model and market parameters (hours, EUR, MWh).

    Defaults reproduce the reference calibration; ``beta`` is normally reset
    per trading day to the maximum absolute forecast price.
    """

    alpha: float = 0.012
    theta0: float = 0.0933
    sigma: float = 4.70
    kappa: float = 0.2083
    rho: float = -0.3
    lam: float = 0.4167
    p_plus: float = 0.65
    eta_plus: float = 1.0 / 15.0
    eta_minus: float = 1.0 / 30.0
    gamma: float = 0.02
    beta: float = 100.0
    P_max: float = 100.0
    T_gc: float = 275.0 / 12.0
    h_lead: float = 1.0 / 12.0
    L: float = 1.0
    eps_tr: float = 0.01
    eps_reg: float | None = None

    def __post_init__(self):
        for name in ("alpha", "theta0", "sigma", "kappa", "gamma", "P_max",
                     "eta_plus", "eta_minus", "T_gc", "h_lead", "L"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ParameterError(f"{name} must be positive and finite, got {v!r}", field=name)
        if not (self.beta >= 0 and np.isfinite(self.beta)):
            raise ParameterError(f"beta must be nonnegative, got {self.beta!r}", field="beta")
        if not (self.lam >= 0 and np.isfinite(self.lam)):
            raise ParameterError(f"lam must be nonnegative, got {self.lam!r}", field="lam")
        if not -1.0 <= self.rho <= 1.0:
            raise ParameterError(f"rho must lie in [-1, 1], got {self.rho!r}", field="rho")
        if not 0.0 <= self.p_plus <= 1.0:
            raise ParameterError(f"p_plus must lie in [0, 1], got {self.p_plus!r}", field="p_plus")
        if not 0.0 < self.eps_tr < 0.5:
            raise ParameterError(f"eps_tr must lie in (0, 1/2), got {self.eps_tr!r}", field="eps_tr")
        if self.eps_reg is not None and not 0.0 < self.eps_reg < 0.5:
            raise ParameterError(f"eps_reg must lie in (0, 1/2), got {self.eps_reg!r}", field="eps_reg")

    @property
    def T(self):
        """End of the delivery window, ``T_gc + h_lead + L``."""
        return self.T_gc + self.h_lead + self.L

    @property
    def p_minus(self):
        return 1.0 - self.p_plus

    def replace(self, **changes):
        return replace(self, **changes)

    def as_dict(self):
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def time_fraction(value, max_denominator=10_000):
    """Rational approximation of an hour value, used for grid alignment."""
    return Fraction(value).limit_denominator(max_denominator)


class ForecastCurve:
    """Piecewise-linear forecast through knots ``(times, values)``.

    The derivative is the slope of the linear interpolant on each knot
    interval, i.e. the difference quotient centred on the interval midpoint,
    taken right-continuous at interior knots.  Integrating this derivative
    with any step that divides the knot spacing reproduces the curve exactly,
    which is what keeps simulated prices centred on the forecast.

    Parameters
    ----------
    times : array_like
        Strictly increasing knot times in hours.
    values : array_like
        Forecast values at the knots.
    kind : {"production", "price"}
    """

    def __init__(self, times, values, kind="price"):
        t = np.asarray(times, dtype=float).copy()
        v = np.asarray(values, dtype=float).copy()
        if kind not in ("production", "price"):
            raise ParameterError(f"unknown curve kind {kind!r}")
        if t.ndim != 1 or v.shape != t.shape or t.size < 2:
            raise MalformedCurveError("knot arrays must be 1-D, of equal length >= 2",
                                      n_times=t.size, n_values=v.size)
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise MalformedCurveError("knots must be finite")
        bad = np.flatnonzero(np.diff(t) <= 0)
        if bad.size:
            raise MalformedCurveError("knot times must be strictly increasing",
                                      first_offending_knot=int(bad[0]) + 1)
        t.flags.writeable = False
        v.flags.writeable = False
        self.times = t
        self.values = v
        self.kind = kind
        self._slopes = np.diff(v) / np.diff(t)

    def __repr__(self):
        return (f"ForecastCurve(kind={self.kind!r}, n_knots={self.times.size}, "
                f"span=[{self.times[0]:g}, {self.times[-1]:g}])")

    @property
    def t_start(self):
        return float(self.times[0])

    @property
    def t_end(self):
        return float(self.times[-1])

    def covers(self, t0, t1):
        return self.t_start <= t0 + _TIME_TOL and self.t_end >= t1 - _TIME_TOL

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < self.t_start - _TIME_TOL) or np.any(t > self.t_end + _TIME_TOL):
            raise DomainError("forecast evaluated outside its knot span (no extrapolation)",
                              t_min=float(np.min(t)), t_max=float(np.max(t)),
                              span=(self.t_start, self.t_end))
        return np.clip(t, self.t_start, self.t_end)

    def __call__(self, t):
        t = self._check(t)
        out = np.interp(t, self.times, self.values)
        return out if out.ndim else float(out)

    def slope(self, t):
        """Time derivative of the forecast (piecewise constant)."""
        t = self._check(t)
        k = np.clip(np.searchsorted(self.times, t + _TIME_TOL, side="right") - 1,
                    0, self.times.size - 2)
        out = self._slopes[k]
        return out if np.ndim(out) else float(out)

    def with_values(self, values):
        return ForecastCurve(self.times, values, self.kind)


@dataclass(frozen=True)
class MarketCurves:
    """Production forecast (normalized, truncated) and price forecast."""

    production: ForecastCurve
    price: ForecastCurve

    def __post_init__(self):
        if self.production.kind != "production" or self.price.kind != "price":
            raise ParameterError("MarketCurves expects (production, price) curves")

    def check_horizon(self, params):
        if not self.production.covers(0.0, params.T):
            raise DomainError("production forecast must cover [0, T]",
                              span=(self.production.t_start, self.production.t_end), T=params.T)
        if not self.price.covers(0.0, params.T_gc):
            raise DomainError("price forecast must cover [0, T_gc]",
                              span=(self.price.t_start, self.price.t_end), T_gc=params.T_gc)


def truncate_forecast(curve, eps_tr):
    """Clamp production knots to ``[eps_tr, 1 - eps_tr]``.

    The derivative is recomputed from the clamped knots, so the mean-reversion
    rate stays finite everywhere.
    """
    if curve.kind != "production":
        raise ParameterError("only production curves are truncated", kind=curve.kind)
    if not 0.0 < eps_tr < 0.5:
        raise ParameterError(f"eps_tr must lie in (0, 1/2), got {eps_tr!r}")
    return curve.with_values(np.clip(curve.values, eps_tr, 1.0 - eps_tr))


def theta_of_t(t, curve, theta0):
    """Mean-reversion rate ``max(theta0, |p'(t)| / min(p(t), 1 - p(t)))``."""
    p = curve(t)
    dp = curve.slope(t)
    return np.maximum(theta0, np.abs(dp) / np.minimum(p, 1.0 - p))


def _check_unit_interval(x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0) or np.any(x > 1.0) or not np.all(np.isfinite(x)):
        raise DomainError("normalized production must lie in [0, 1]",
                          x_min=float(np.min(x)), x_max=float(np.max(x)))
    return x


def _jacobi_sigma(x, params):
    return np.sqrt(2.0 * params.alpha * params.theta0 * x * (1.0 - x))


def regularized_sigma(x, eps_reg, params):
    """Jacobi diffusion made linear on the two boundary bands of width ``eps_reg``."""
    if not 0.0 < eps_reg < 0.5:
        raise ParameterError(f"eps_reg must lie in (0, 1/2), got {eps_reg!r}")
    x = _check_unit_interval(x)
    seam = float(_jacobi_sigma(eps_reg, params))  # symmetric: same value at 1 - eps
    out = np.where(x < eps_reg, seam * x / eps_reg,
                   np.where(x > 1.0 - eps_reg, seam * (1.0 - x) / eps_reg,
                            _jacobi_sigma(x, params)))
    return out if out.ndim else float(out)


def wind_diffusion(x, params):
    """Diffusion coefficient of the wind SDE (regularized when ``eps_reg`` is set)."""
    if params.eps_reg is not None:
        return regularized_sigma(x, params.eps_reg, params)
    x = _check_unit_interval(x)
    out = _jacobi_sigma(x, params)
    return out if out.ndim else float(out)


def wind_drift(t, x, params, curves):
    p = curves.production(t)
    dp = curves.production.slope(t)
    theta = np.maximum(params.theta0, np.abs(dp) / np.minimum(p, 1.0 - p))
    return dp - theta * (np.asarray(x, dtype=float) - p)


def price_drift(t, y, params, curves, compensate=True):
    """Price drift; ``compensate`` subtracts the mean jump intensity ``lam * E[Z]``."""
    out = curves.price.slope(t) - params.kappa * (np.asarray(y, dtype=float) - curves.price(t))
    if compensate and params.lam > 0:
        out = out - params.lam * JumpLaw.from_params(params).mean
    return out


def coefficients(t, x, y, params, curves, compensate=True):
    """Return ``(mu_X, sigma_X, mu_Y)`` at time ``t`` and state ``(x, y)``."""
    x = _check_unit_interval(x)
    return (wind_drift(t, x, params, curves), wind_diffusion(x, params),
            price_drift(t, y, params, curves, compensate))


def terminal_penalty(xi, beta):
    """Two-sided linear imbalance penalty ``beta * |xi|``."""
    return beta * np.abs(xi)


@dataclass(frozen=True)
class JumpStats:
    mean: float
    second_moment: float
    mgf: object = field(repr=False)
    cumulant_c: object = field(repr=False)


@dataclass(frozen=True)
class JumpLaw:
    """Compound Poisson law with asymmetric double-exponential jump sizes."""

    lam: float
    p_plus: float
    eta_plus: float
    eta_minus: float

    def __post_init__(self):
        if self.lam < 0 or not 0 <= self.p_plus <= 1 or self.eta_plus <= 0 or self.eta_minus <= 0:
            raise ParameterError("invalid jump law", lam=self.lam, p_plus=self.p_plus,
                                 eta_plus=self.eta_plus, eta_minus=self.eta_minus)

    @classmethod
    def from_params(cls, params):
        return cls(params.lam, params.p_plus, params.eta_plus, params.eta_minus)

    @property
    def p_minus(self):
        return 1.0 - self.p_plus

    @property
    def mean(self):
        return self.p_plus / self.eta_plus - self.p_minus / self.eta_minus

    @property
    def second_moment(self):
        return 2.0 * self.p_plus / self.eta_plus**2 + 2.0 * self.p_minus / self.eta_minus**2

    def density(self, z):
        z = np.asarray(z, dtype=float)
        up = self.p_plus * self.eta_plus * np.exp(-self.eta_plus * np.where(z >= 0, z, 0.0))
        down = self.p_minus * self.eta_minus * np.exp(self.eta_minus * np.where(z < 0, z, 0.0))
        return np.where(z >= 0, up, down)

    def _check_strip(self, a):
        a = np.asarray(a, dtype=float)
        if np.any(a >= self.eta_plus) or np.any(a <= -self.eta_minus):
            raise DivergentMGFError("exponential moment diverges outside (-eta_minus, eta_plus)",
                                    alpha=float(np.max(np.abs(a))), eta_plus=self.eta_plus,
                                    eta_minus=self.eta_minus)
        return a

    def mgf(self, a):
        a = self._check_strip(a)
        return (self.p_plus * self.eta_plus / (self.eta_plus - a)
                + self.p_minus * self.eta_minus / (self.eta_minus + a))

    def cumulant_c(self, a):
        """Compensated cumulant ``lam * (E[exp(aZ)] - 1 - a E[Z])``."""
        a = self._check_strip(a)
        return self.lam * (self.mgf(a) - 1.0 - a * self.mean)

    def sample(self, u1, u2):
        """Inverse-transform draw; ``u1`` picks the sign, ``u2`` the size."""
        size = -np.log(np.asarray(u2, dtype=float))
        out = np.where(np.asarray(u1) < self.p_plus, size / self.eta_plus, -size / self.eta_minus)
        return out if out.ndim else float(out)


def jump_law_stats(law):
    """Moments and exponential moments of the jump law."""
    return JumpStats(law.mean, law.second_moment, law.mgf, law.cumulant_c)


def sample_jump(law, u1, u2):
    return law.sample(u1, u2)
