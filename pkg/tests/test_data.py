import csv
from datetime import datetime, timedelta

import numpy as np
import pytest

from intraday_hjb.data import (build_price_forecast, ingest_production_csv, load_trading_day,
                               read_price_csv, shift_curves, synthetic_day)
from intraday_hjb.errors import DataError


def write_day(path, rows=96, start="2023-04-14T00:00:00", forecast=None, actual=None,
              capacity=200.0, columns=("timestamp", "forecast_MW", "actual_MW", "capacity_MW"),
              blank=None, skip=None):
    t0 = datetime.fromisoformat(start)
    fc = forecast if forecast is not None else np.linspace(20, 120, rows)
    ac = actual if actual is not None else np.linspace(30, 110, rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in range(rows):
            if skip is not None and r == skip:
                continue
            rec = [(t0 + timedelta(minutes=15 * r)).isoformat(), f"{fc[r]}", f"{ac[r]}",
                   f"{capacity}"]
            if blank is not None and r == blank:
                rec[2] = ""
            order = {"timestamp": 0, "forecast_MW": 1, "actual_MW": 2, "capacity_MW": 3}
            w.writerow([rec[order.get(c, k)] for k, c in enumerate(columns)])
    return path


def test_well_formed_day_has_96_knots(tmp_path):
    day = ingest_production_csv(write_day(tmp_path / "d.csv"))
    assert day.forecast.times.size == 96
    assert day.realized.size == 96
    assert day.capacity == 200.0
    assert day.date == "2023-04-14"


def test_normalised_by_capacity(tmp_path):
    day = ingest_production_csv(write_day(tmp_path / "d.csv"), eps_tr=0.01)
    np.testing.assert_allclose(day.forecast.values, np.clip(np.linspace(20, 120, 96) / 200,
                                                            0.01, 0.99))
    np.testing.assert_allclose(day.realized, np.linspace(30, 110, 96) / 200)


def test_full_capacity_truncated(tmp_path):
    fc = np.full(96, 200.0)
    day = ingest_production_csv(write_day(tmp_path / "d.csv", forecast=fc), eps_tr=0.01)
    assert np.all(day.forecast.values == 0.99)


def test_column_order_is_free(tmp_path):
    a = ingest_production_csv(write_day(tmp_path / "a.csv"))
    b = ingest_production_csv(write_day(tmp_path / "b.csv", columns=(
        "capacity_MW", "actual_MW", "timestamp", "forecast_MW")))
    np.testing.assert_array_equal(a.forecast.values, b.forecast.values)
    np.testing.assert_array_equal(a.realized, b.realized)


def test_missing_column_is_schema_error(tmp_path):
    with pytest.raises(DataError, match="schema"):
        ingest_production_csv(write_day(tmp_path / "d.csv",
                                        columns=("timestamp", "forecast_MW", "actual_MW")))


def test_misnamed_column_is_schema_error(tmp_path):
    with pytest.raises(DataError, match="schema"):
        ingest_production_csv(write_day(tmp_path / "d.csv", columns=(
            "timestamp", "forecast_mw", "actual_MW", "capacity_MW")))


def test_blank_value_rejected_with_row(tmp_path):
    with pytest.raises(DataError) as err:
        ingest_production_csv(write_day(tmp_path / "d.csv", blank=17))
    assert err.value.context["row"] == 17
    assert err.value.context["column"] == "actual_MW"


def test_gap_is_cadence_error_at_first_offending_row(tmp_path):
    with pytest.raises(DataError, match="cadence") as err:
        ingest_production_csv(write_day(tmp_path / "d.csv", skip=40))
    assert err.value.context["row"] == 40


@pytest.mark.parametrize("rows", [92, 100])
def test_daylight_saving_days_rejected(tmp_path, rows):
    with pytest.raises(DataError, match="incomplete"):
        ingest_production_csv(write_day(tmp_path / "d.csv", rows=rows,
                                        forecast=np.full(rows, 50.0),
                                        actual=np.full(rows, 50.0)))


def test_constant_price_gives_constant_forecast():
    hours = np.arange(-3.0, 26.0)
    curve = build_price_forecast(hours, np.full(hours.size, 73.5))
    np.testing.assert_array_equal(curve.values, 73.5)
    assert curve.times.size == 97


def test_window_of_one_is_one_step_lag():
    hours = np.arange(-3.0, 26.0)
    prices = np.where(hours >= 10, 100.0, 20.0)
    curve = build_price_forecast(hours, prices, n_w=1)
    lagged = np.interp(curve.times - 0.25, hours, prices)
    np.testing.assert_array_equal(curve.values, lagged)


def test_ramp_lag_is_37_5_minutes():
    hours = np.arange(-3.0, 26.0)
    slope = 4.0
    curve = build_price_forecast(hours, 10.0 + slope * hours, n_w=4)
    # Direct convolution: mean of the four previous quarter-hour samples.
    ref = np.array([np.mean([10.0 + slope * (t - 0.25 * k) for k in range(1, 5)])
                    for t in curve.times])
    np.testing.assert_allclose(curve.values, ref, rtol=0, atol=1e-12)
    lag_hours = (10.0 + slope * curve.times - curve.values) / slope
    np.testing.assert_allclose(lag_hours, 0.625, atol=1e-12)


def test_insufficient_lookback():
    hours = np.arange(0.0, 26.0)
    with pytest.raises(DataError, match="insufficient") as err:
        build_price_forecast(hours, np.ones(hours.size), n_w=4)
    assert err.value.context["required_history_hours"] == 1.0


def test_price_file_round_trip(tmp_path):
    p = tmp_path / "prices.csv"
    t0 = datetime(2023, 4, 13, 20)
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["price_EUR_MWh", "timestamp"])
        for h in range(32):
            w.writerow([50.0 + h, (t0 + timedelta(hours=h)).isoformat()])
    stamps, prices = read_price_csv(p)
    assert len(stamps) == 32 and prices[0] == 50.0
    write_day(tmp_path / "production_2023-04-14.csv")
    day = load_trading_day(tmp_path / "production_2023-04-14.csv", p)
    assert day.curves.price.covers(0.0, 24.0)
    assert day.curves.production.covers(0.0, 24.0)
    assert day.realized[0].size == 97


def test_synthetic_day_is_reproducible():
    a, b = synthetic_day(3), synthetic_day(3)
    np.testing.assert_array_equal(a.curves.price.values, b.curves.price.values)
    np.testing.assert_array_equal(a.curves.production.values, b.curves.production.values)
    c = synthetic_day(4)
    assert not np.array_equal(a.curves.price.values, c.curves.price.values)
    assert np.all((a.curves.production.values >= 0.01) & (a.curves.production.values <= 0.99))


def test_shift_curves_rebases_time():
    day = synthetic_day(0)
    shifted = shift_curves(day.curves, 6.0, 18.0)
    t = np.linspace(0, 18, 37)
    np.testing.assert_allclose(shifted.price(t), day.curves.price(t + 6.0), atol=1e-12)
    assert shifted.production.times[-1] == 18.0
