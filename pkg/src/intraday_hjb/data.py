"""Trading-day data: production CSV ingestion, price forecast, synthetic days.

Production files hold one delivery day at quarter-hour cadence with columns
``timestamp, forecast_MW, actual_MW, capacity_MW`` (any order, exact names).
Timestamps are naive local market time; days that are not exactly 96
contiguous quarter hours (gaps, daylight-saving days) are rejected.
Day-ahead price files hold ``timestamp, price_EUR_MWh`` at hourly cadence.
"""
import csv
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

from .errors import DataError
from .market_model import ForecastCurve, MarketCurves, truncate_forecast

__all__ = ["ProductionDay", "ingest_production_csv", "read_price_csv", "hourly_window",
           "build_price_forecast", "TradingDay", "load_trading_day", "synthetic_day",
           "shift_curves", "PRODUCTION_COLUMNS", "PRICE_COLUMNS"]

PRODUCTION_COLUMNS = ("timestamp", "forecast_MW", "actual_MW", "capacity_MW")
PRICE_COLUMNS = ("timestamp", "price_EUR_MWh")
QUARTER_HOUR = 0.25
ROWS_PER_DAY = 96


def _read_table(path, required):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}", path=str(path)) from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError("empty file", path=str(path))
        header = [h.strip() for h in header]
        missing = [c for c in required if c not in header]
        unknown = [c for c in header if c not in required]
        if missing or unknown:
            raise DataError("schema mismatch", path=str(path), missing=",".join(missing),
                            unknown=",".join(unknown))
        index = {c: header.index(c) for c in required}
        rows = []
        for r, raw in enumerate(reader):
            if not raw or all(not c.strip() for c in raw):
                continue
            rows.append((r, {c: (raw[i].strip() if i < len(raw) else "") for c, i in index.items()}))
    return rows


def _timestamp(text, path, row):
    try:
        return datetime.fromisoformat(text)
    except ValueError as exc:
        raise DataError("unparseable timestamp", path=str(path), row=row, value=text) from exc


def _number(text, column, path, row):
    if text == "":
        raise DataError("missing observation", path=str(path), row=row, column=column)
    try:
        v = float(text)
    except ValueError as exc:
        raise DataError("non-numeric value", path=str(path), row=row, column=column,
                        value=text) from exc
    if not np.isfinite(v):
        raise DataError("non-finite value", path=str(path), row=row, column=column)
    return v


@dataclass
class ProductionDay:
    """One day of normalised production data.

    ``forecast`` is the truncated forecast curve on the 96 quarter-hour knots;
    ``realized`` holds normalised actual production at the same knots.
    """

    date: str
    times: np.ndarray
    forecast: ForecastCurve
    realized: np.ndarray
    capacity: float

    def production_curve(self, horizon=24.0):
        """Forecast curve extended to ``horizon`` by holding the last quarter-hour value."""
        return _extend(self.forecast, horizon)

    def realized_samples(self, horizon=24.0):
        t, v = self.times, self.realized
        if t[-1] < horizon:
            t, v = np.append(t, horizon), np.append(v, v[-1])
        return t, v


def _extend(curve, horizon):
    if curve.times[-1] >= horizon:
        return curve
    return ForecastCurve(np.append(curve.times, horizon), np.append(curve.values, curve.values[-1]),
                         curve.kind)


def ingest_production_csv(path, eps_tr=0.01):
    """Read one production day, normalise by capacity and truncate the forecast.

    Raises
    ------
    DataError
        Schema mismatch, missing or non-numeric values (with the row index),
        cadence violations (with the first offending row), or a day that is
        not exactly 96 quarter hours.
    """
    rows = _read_table(path, PRODUCTION_COLUMNS)
    if not rows:
        raise DataError("no data rows", path=str(path))
    stamps, fc, act, cap = [], [], [], []
    for r, rec in rows:
        stamps.append(_timestamp(rec["timestamp"], path, r))
        fc.append(_number(rec["forecast_MW"], "forecast_MW", path, r))
        act.append(_number(rec["actual_MW"], "actual_MW", path, r))
        c = _number(rec["capacity_MW"], "capacity_MW", path, r)
        if c <= 0:
            raise DataError("capacity must be positive", path=str(path), row=r)
        cap.append(c)
    if len(stamps) in (92, 100):
        raise DataError("incomplete day (daylight-saving transition, expected 96 quarter hours)",
                        path=str(path), rows=len(stamps))
    step = timedelta(minutes=15)
    for k in range(1, len(stamps)):
        if stamps[k] - stamps[k - 1] != step:
            raise DataError("cadence violation: expected 15-minute steps", path=str(path),
                            row=rows[k][0])
    day = stamps[0].date()
    if stamps[0].hour or stamps[0].minute or stamps[-1].date() != day:
        raise DataError("file must cover exactly one day from midnight", path=str(path))
    if len(stamps) != ROWS_PER_DAY:
        raise DataError("incomplete day (expected 96 quarter hours)", path=str(path),
                        rows=len(stamps))
    cap = np.array(cap)
    forecast = np.clip(np.array(fc) / cap, 0.0, 1.0)
    realized = np.clip(np.array(act) / cap, 0.0, 1.0)
    times = QUARTER_HOUR * np.arange(ROWS_PER_DAY)
    curve = truncate_forecast(ForecastCurve(times, forecast, "production"), eps_tr)
    return ProductionDay(day.isoformat(), times, curve, realized, float(cap.max()))


def read_price_csv(path):
    """Hourly day-ahead prices as ``(timestamps, prices)`` sorted by time."""
    rows = _read_table(path, PRICE_COLUMNS)
    stamps = [_timestamp(rec["timestamp"], path, r) for r, rec in rows]
    prices = [_number(rec["price_EUR_MWh"], "price_EUR_MWh", path, r) for r, rec in rows]
    order = np.argsort(np.array(stamps, dtype="datetime64[s]"), kind="stable")
    stamps = [stamps[i] for i in order]
    prices = np.array(prices)[order]
    for k in range(1, len(stamps)):
        if stamps[k] - stamps[k - 1] != timedelta(hours=1):
            raise DataError("cadence violation: expected hourly steps", path=str(path),
                            row=int(order[k]))
    return stamps, prices


def hourly_window(stamps, prices, date):
    """Hours relative to midnight of ``date`` (ISO string) with their prices."""
    midnight = datetime.fromisoformat(str(date))
    hours = np.array([(s - midnight).total_seconds() / 3600.0 for s in stamps])
    return hours, np.asarray(prices, dtype=float)


def build_price_forecast(hourly_times, hourly_prices, n_w=4, horizon=24.0):
    """Quarter-hour price forecast as a backward moving average.

    The hourly series is interpolated linearly to quarter hours; the forecast
    at ``t`` is the mean of the interpolated values at ``t - k * 0.25`` for
    ``k = 1..n_w``.

    Raises
    ------
    DataError
        When the hourly series does not reach ``n_w`` quarter hours before
        midnight or the last forecast knot.
    """
    t_h = np.asarray(hourly_times, dtype=float)
    y_h = np.asarray(hourly_prices, dtype=float)
    if n_w < 1:
        raise DataError("window length must be at least 1", n_w=n_w)
    need_start = -n_w * QUARTER_HOUR
    need_end = horizon - QUARTER_HOUR
    if t_h.size < 2 or t_h[0] > need_start + 1e-9 or t_h[-1] < need_end - 1e-9:
        raise DataError("insufficient price history for the moving average",
                        required_history_hours=n_w * QUARTER_HOUR,
                        required_from=need_start, required_to=need_end,
                        available_from=float(t_h[0]) if t_h.size else None,
                        available_to=float(t_h[-1]) if t_h.size else None)
    n_knots = int(round(horizon / QUARTER_HOUR)) + 1
    knots = QUARTER_HOUR * np.arange(n_knots)
    lags = QUARTER_HOUR * np.arange(1, n_w + 1)
    samples = np.interp(knots[:, None] - lags[None, :], t_h, y_h)
    return ForecastCurve(knots, samples.mean(axis=1), "price")


@dataclass
class TradingDay:
    """Everything needed to solve and evaluate one day."""

    tag: str
    curves: MarketCurves
    capacity: float
    realized: tuple = None
    price_proxy: tuple = None


def load_trading_day(production_path, price_path, n_w=4, eps_tr=0.01, horizon=24.0):
    """Production day plus its price forecast from the hourly day-ahead file.

    ``realized`` holds the quarter-hour realized production; ``price_proxy``
    the linearly interpolated day-ahead series used as the realized price.
    """
    prod = ingest_production_csv(production_path, eps_tr)
    stamps, prices = read_price_csv(price_path)
    hours, values = hourly_window(stamps, prices, prod.date)
    inside = (hours >= -24.0) & (hours <= horizon + 24.0)
    price = build_price_forecast(hours[inside], values[inside], n_w, horizon)
    curves = MarketCurves(prod.production_curve(horizon), price)
    q = QUARTER_HOUR * np.arange(int(round(horizon / QUARTER_HOUR)) + 1)
    return TradingDay(prod.date, curves, prod.capacity, prod.realized_samples(horizon),
                      (q, np.interp(q, hours[inside], values[inside])))


def synthetic_day(seed, horizon=24.0, n_w=4, eps_tr=0.01):
    """A reproducible synthetic day: smooth production forecast and hourly prices.

    Production is a clipped sum of two random-phase daily harmonics; prices
    combine a random level, morning and evening peaks, a midday solar dip and
    hourly noise, then go through :func:`build_price_forecast`.
    """
    rng = np.random.default_rng([int(seed), 20240])
    knots = QUARTER_HOUR * np.arange(int(round(horizon / QUARTER_HOUR)) + 1)
    level = rng.uniform(0.25, 0.65)
    a1, a2 = rng.uniform(0.05, 0.2), rng.uniform(0.0, 0.1)
    ph1, ph2 = rng.uniform(0, 2 * np.pi, 2)
    px = level + a1 * np.sin(2 * np.pi * knots / 24 + ph1) + a2 * np.sin(2 * np.pi * knots / 8 + ph2)
    prod = truncate_forecast(ForecastCurve(knots, np.clip(px, 0.0, 1.0), "production"), eps_tr)
    hours = np.arange(-2.0, horizon + 1.0)
    base = rng.uniform(60.0, 120.0)
    shape = (25.0 * np.exp(-0.5 * ((hours % 24 - 8.0) / 1.5) ** 2)
             + 35.0 * np.exp(-0.5 * ((hours % 24 - 19.0) / 2.0) ** 2)
             - 20.0 * np.exp(-0.5 * ((hours % 24 - 13.0) / 2.5) ** 2))
    prices = base + shape + rng.normal(0.0, 6.0, hours.size)
    price = build_price_forecast(hours, prices, n_w, horizon)
    return TradingDay(f"synthetic-{int(seed)}", MarketCurves(prod, price), 100.0)


def shift_curves(curves, offset, horizon):
    """Curves re-based so that clock time ``offset`` becomes ``t = 0``, over ``[0, horizon]``."""

    def cut(c):
        t = np.concatenate([[offset], c.times[(c.times > offset) & (c.times < offset + horizon)],
                            [offset + horizon]])
        return ForecastCurve(t - offset, c(t), c.kind)

    return MarketCurves(cut(curves.production), cut(curves.price))
