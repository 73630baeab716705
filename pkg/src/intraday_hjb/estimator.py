"""Estimator-style wrapper: ``fit`` solves a trading day, ``predict`` returns trading rates."""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .domain_bounds import build_grid, compute_bounds
from .errors import ParameterError
from .hjb_stage3 import PicardOptions, SolverOptions, solve_stage3
from .kbe_stages import solve_terminal_stages
from .market_model import ForecastCurve, MarketCurves, ModelParams, truncate_forecast
from .policy_eval import Policy, day_specific_beta

__all__ = ["TradingRateEstimator", "check_forecast_table", "check_states", "curves_from_table"]


def check_forecast_table(table):
    """Validate a forecast table: rows ``(t, production, price)``, strictly increasing ``t``.

    Returns
    -------
    ndarray, shape (n_knots, 3)
    """
    a = check_array(table, dtype=np.float64, ensure_min_samples=2)
    if a.shape[1] != 3:
        raise ParameterError("forecast table needs columns (t, production, price)",
                             n_columns=a.shape[1])
    if np.any(np.diff(a[:, 0]) <= 0):
        raise ParameterError("forecast times must be strictly increasing")
    if np.any((a[:, 1] < 0) | (a[:, 1] > 1)):
        raise ParameterError("production forecast must be normalised into [0, 1]")
    return a


def curves_from_table(table, eps_tr):
    a = check_forecast_table(table)
    prod = truncate_forecast(ForecastCurve(a[:, 0], a[:, 1], "production"), eps_tr)
    return MarketCurves(prod, ForecastCurve(a[:, 0], a[:, 2], "price"))


def check_states(states):
    """Validate query states: rows ``(t, x, y, q)``."""
    a = check_array(states, dtype=np.float64)
    if a.shape[1] != 4:
        raise ParameterError("states need columns (t, x, y, q)", n_columns=a.shape[1])
    return a


class TradingRateEstimator(BaseEstimator):
    """Optimal intraday trading rate for one delivery product.

    ``fit`` takes the day's forecasts (a :class:`MarketCurves` or a table of
    ``(t, production, price)`` rows), builds the domain and grid and runs the
    three backward stages.  ``predict`` maps states ``(t, x, y, q)`` to the
    feedback rate in MWh/h.

    Parameters
    ----------
    params : ModelParams, optional
        Model parameters; defaults to the reference calibration.
    resolutions : tuple
        ``(N_x, N_y, N_q, N_m, N_t)``; ``N_t`` is raised to align stage boundaries.
    day_beta : bool
        Reset the imbalance price to the day's largest absolute price forecast.
    bounds : DomainBounds, optional
        Fixed domain; computed from the forecasts when omitted.
    """

    def __init__(self, params=None, resolutions=(50, 50, 200, 16, 300), day_beta=True,
                 eps_tail=0.01, eps_pad=1.0, mU_paths=10_000, mU_seed=0, picard=None,
                 bounds=None):
        self.params = params
        self.resolutions = resolutions
        self.day_beta = day_beta
        self.eps_tail = eps_tail
        self.eps_pad = eps_pad
        self.mU_paths = mU_paths
        self.mU_seed = mU_seed
        self.picard = picard
        self.bounds = bounds

    def fit(self, X, y=None):
        """Solve the day described by ``X`` (curves or forecast table); ``y`` is ignored."""
        params = self.params if self.params is not None else ModelParams()
        curves = X if isinstance(X, MarketCurves) else curves_from_table(X, params.eps_tr)
        curves.check_horizon(params)
        if self.day_beta:
            params = params.replace(beta=day_specific_beta(curves, params))
        bounds = self.bounds
        if bounds is None:
            bounds = compute_bounds(params, curves, self.eps_tail, None, self.eps_pad,
                                    int(self.mU_paths), seed=int(self.mU_seed))
        grid = build_grid(params, bounds, self.resolutions)
        terminal = solve_terminal_stages(params, curves, grid)
        options = SolverOptions(picard=self.picard or PicardOptions())
        self.params_ = params
        self.curves_ = curves
        self.bounds_ = bounds
        self.grid_ = grid
        self.stack_ = solve_stage3(params, curves, grid, terminal.values, options)
        self.policy_ = Policy(self.stack_, params)
        self.n_features_in_ = 4
        return self

    def predict(self, states):
        """Feedback rate for each row ``(t, x, y, q)``; ``t`` must lie in ``[0, T_gc]``."""
        check_is_fitted(self, "policy_")
        a = check_states(states)
        t = a[:, 0]
        t_gc = self.grid_.idx_Tgc * self.grid_.dt
        if np.any((t < -1e-9) | (t > t_gc + 1e-9)):
            raise ParameterError("query times must lie in the trading window", T_gc=t_gc)
        out = np.empty(a.shape[0])
        for tv in np.unique(t):
            sel = t == tv
            out[sel] = self.policy_(tv, a[sel, 1], a[sel, 2], a[sel, 3])
        return out

    def value(self, states):
        """Interpolated value ``V(t, x, y, q)`` at nodes of time (nearest level)."""
        check_is_fitted(self, "stack_")
        a = check_states(states)
        out = np.empty(a.shape[0])
        for tv in np.unique(a[:, 0]):
            sel = a[:, 0] == tv
            n = min(max(self.stack_.level_at_time(tv), 0), self.stack_.n_levels - 1)
            out[sel] = self.policy_._spatial(np.asarray(self.stack_.values[n]), a[sel, 1],
                                             a[sel, 2], a[sel, 3])
        return out
