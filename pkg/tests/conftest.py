import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from intraday_hjb.domain_bounds import build_grid, fixed_bounds
from intraday_hjb.market_model import ForecastCurve, MarketCurves, ModelParams

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def flat_curves(px=0.5, py=100.0, horizon=24.0):
    t = np.array([0.0, horizon])
    return MarketCurves(ForecastCurve(t, np.full(2, px), "production"),
                        ForecastCurve(t, np.full(2, py), "price"))


@pytest.fixture
def params():
    return ModelParams()


@pytest.fixture
def curves():
    return flat_curves()


@pytest.fixture
def small_grid(params):
    b = fixed_bounds(-100.0, 300.0, -200.0, 300.0, -50.0, 50.0)
    return build_grid(params, b, (8, 8, 10, 4, 50))
