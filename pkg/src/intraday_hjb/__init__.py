"""Optimal intraday trading of renewable production under forecast, price and jump risk.

The value function is computed by three backward stages on a finite-difference
grid: two linear backward equations over the delivery window and lead time,
then the nonlinear trading-window equation with a jump term.  The feedback
trading rate is read off the value function and evaluated by Monte Carlo
against constant-rate and perfect-foresight benchmarks.
"""
from .config import RunConfig, default_config, dump_config, load_config, parse_config
from .data import build_price_forecast, ingest_production_csv, synthetic_day
from .domain_bounds import DomainBounds, Grid, build_grid, compute_bounds, fixed_bounds
from .errors import (AlignmentError, CFLError, ConformanceError, DataError, DivergenceError,
                     DivergentMGFError, DomainError, IntradayError, MalformedCurveError,
                     ParameterError, SingularSystemError, SnapshotError)
from .estimator import TradingRateEstimator, check_forecast_table, check_states
from .hjb_stage3 import PicardOptions, SolverOptions, ValueStack, hamiltonian, solve_stage3
from .kbe_stages import solve_terminal_stages
from .market_model import ForecastCurve, MarketCurves, ModelParams, truncate_forecast
from .policy_eval import (Policy, forward_evaluate, forward_evaluate_batch, gain_stats,
                          pf_solve, twap_rate)
from .simulate import simulate_batch, simulate_paths
from .snapshot import read_snapshot, read_stack, write_snapshot, write_stack

__version__ = "0.1.0"

__all__ = [
    "AlignmentError", "CFLError", "ConformanceError", "DataError", "DivergenceError",
    "DivergentMGFError", "DomainBounds", "DomainError", "ForecastCurve", "Grid",
    "IntradayError", "MalformedCurveError", "MarketCurves", "ModelParams", "ParameterError",
    "PicardOptions", "Policy", "RunConfig", "SingularSystemError", "SnapshotError",
    "SolverOptions", "TradingRateEstimator", "ValueStack", "build_grid",
    "build_price_forecast", "check_forecast_table", "check_states", "compute_bounds",
    "default_config", "dump_config", "fixed_bounds", "forward_evaluate",
    "forward_evaluate_batch", "gain_stats", "hamiltonian", "ingest_production_csv",
    "load_config", "parse_config", "pf_solve", "read_snapshot", "read_stack",
    "simulate_batch", "simulate_paths", "solve_stage3", "solve_terminal_stages",
    "synthetic_day", "truncate_forecast", "twap_rate", "write_snapshot", "write_stack",
]
