"""Volatility stage: attach per-row sigmas and standardized returns to a panel.

Intraday rows are scaled by the stock's realized volatility on the same day,
overnight rows by its GJR-GARCH filtered volatility. The market proxy is
standardized the same way; its overnight and daily series are built at the
cross-sectional median first and last snapshot times of each day.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd

from .calendar import TradingCalendar, default_calendar
from .config import Config
from .panel import DAY_NS, match_prices
from .ticks import TickStore
from .volatility import (
    ConvergenceError,
    GjrParams,
    InsufficientDataError,
    fit_gjr_garch,
    gjr_sigma_series,
    realized_vol_days,
    standardize,
)

logger = logging.getLogger(__name__)

ESTIMATE_COLUMNS = ["ticker", "day", "kind", "sigma", "model_kind", "converged"]


@dataclasses.dataclass
class VolatilityResult:
    panel: pd.DataFrame
    estimates: pd.DataFrame
    params: dict[str, GjrParams]
    excluded: dict[str, str]
    n_dropped_inestimable: int


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _dates(values) -> list[dt.date]:
    return [pd.Timestamp(v).date() for v in values]


def _stock_sigmas(rows: pd.DataFrame, times, prices, config, calendar):
    """Sigma per panel row of one stock, the GJR fit, and an estimates table."""
    is_on = rows["is_overnight"].to_numpy(bool)
    sigma = np.full(len(rows), np.nan)
    days = rows["day"].to_numpy()

    id_days = np.unique(days[~is_on])
    rv = realized_vol_days(times, prices, _dates(id_days), calendar)
    sigma[~is_on] = rv[np.searchsorted(id_days, days[~is_on])]

    on_returns = rows["raw_return"].to_numpy()[is_on] / 2.0
    params = fit_gjr_garch(on_returns, "overnight", min_obs=config.min_returns)
    sigma[is_on] = gjr_sigma_series(params, on_returns, "overnight")

    est = pd.DataFrame(
        {
            "day": np.r_[id_days, days[is_on]],
            "kind": ["intraday"] * len(id_days) + ["overnight"] * int(is_on.sum()),
            "sigma": np.r_[rv, sigma[is_on]],
            "model_kind": ["rv"] * len(id_days) + [params.model_kind] * int(is_on.sum()),
            "converged": True,
        }
    )
    return sigma, params, est


def canonical_times(clean: pd.DataFrame) -> pd.DataFrame:
    """Per-day median first and last snapshot clock times across stocks."""
    frame = clean[["ticker", "observed_at"]].copy()
    t_ns = frame["observed_at"].to_numpy(dtype="datetime64[ns]").view(np.int64)
    frame["day_ns"] = (t_ns // DAY_NS) * DAY_NS
    frame["tod"] = t_ns - frame["day_ns"]
    g = frame.groupby(["day_ns", "ticker"], sort=True)["tod"]
    per_stock = pd.DataFrame({"first": g.min(), "last": g.max()}).reset_index()
    med = per_stock.groupby("day_ns", sort=True)[["first", "last"]].median()
    out = pd.DataFrame(
        {
            "day": med.index.to_numpy().view("datetime64[ns]"),
            "first": (med.index.to_numpy() + np.round(med["first"].to_numpy()).astype(np.int64)).view(
                "datetime64[ns]"
            ),
            "last": (med.index.to_numpy() + np.round(med["last"].to_numpy()).astype(np.int64)).view(
                "datetime64[ns]"
            ),
        }
    )
    return out


def market_overnight_sigma(clean, market_times, market_prices, config) -> tuple[pd.Series, GjrParams]:
    """GJR volatility of the market's canonical close-to-open returns, by day."""
    canon = canonical_times(clean)
    p_first = match_prices(market_times, market_prices, canon["first"].to_numpy())
    p_last = match_prices(market_times, market_prices, canon["last"].to_numpy())
    ret = np.log(p_first[1:] / p_last[:-1])
    days = canon["day"].to_numpy()[1:]
    ok = np.isfinite(ret)
    params = fit_gjr_garch(ret[ok], "overnight", min_obs=config.min_returns)
    sigma = gjr_sigma_series(params, ret[ok], "overnight")
    return pd.Series(sigma, index=pd.DatetimeIndex(days[ok])), params


def market_daily_sigma(clean, market_times, market_prices, config) -> tuple[pd.Series, GjrParams]:
    """GJR volatility of the market's canonical close-to-close returns, by day."""
    canon = canonical_times(clean)
    p_last = match_prices(market_times, market_prices, canon["last"].to_numpy())
    ret = np.log(p_last[1:] / p_last[:-1])
    days = canon["day"].to_numpy()[1:]
    ok = np.isfinite(ret)
    params = fit_gjr_garch(ret[ok], "daily", min_obs=config.min_returns)
    sigma = gjr_sigma_series(params, ret[ok], "daily")
    return pd.Series(sigma, index=pd.DatetimeIndex(days[ok])), params


def standardize_panel(
    panel: pd.DataFrame,
    ticks: TickStore,
    market_times,
    market_prices,
    clean: pd.DataFrame,
    config: Config | None = None,
    calendar: TradingCalendar | None = None,
) -> VolatilityResult:
    """Add ``sigma``, ``std_return``, ``mkt_sigma`` and ``mkt_std_return``.

    Stocks whose overnight GJR and fallback fits both fail are excluded.
    Rows with a non-positive or missing sigma are dropped.
    """
    config = config or Config()
    calendar = calendar or default_calendar()
    panel = panel.sort_values(["ticker", "k"], kind="stable").reset_index(drop=True)
    groups = {t: idx for t, idx in panel.groupby("ticker", sort=True).indices.items()}
    tickers = sorted(groups)

    def one(ticker):
        rows = panel.iloc[groups[ticker]]
        times, prices = ticks[ticker]
        try:
            return _stock_sigmas(rows, times, prices, config, calendar)
        except (ConvergenceError, InsufficientDataError) as exc:
            return exc

    results = _map(one, tickers, config.workers)
    sigma = np.full(len(panel), np.nan)
    params, excluded, estimates = {}, {}, []
    for ticker, res in zip(tickers, results):
        if isinstance(res, Exception):
            excluded[ticker] = f"{type(res).__name__}: {res}"
            continue
        s, p, est = res
        sigma[groups[ticker]] = s
        params[ticker] = p
        estimates.append(est.assign(ticker=ticker))

    # market
    is_on = panel["is_overnight"].to_numpy(bool)
    days = panel["day"].to_numpy()
    m_sigma = np.full(len(panel), np.nan)
    id_days = np.unique(days[~is_on])
    m_rv = realized_vol_days(market_times, market_prices, _dates(id_days), calendar)
    m_sigma[~is_on] = m_rv[np.searchsorted(id_days, days[~is_on])]
    m_on, m_params = market_overnight_sigma(clean, market_times, market_prices, config)
    m_sigma[is_on] = m_on.reindex(pd.DatetimeIndex(days[is_on])).to_numpy()
    params[config.market_ticker] = m_params
    estimates.append(
        pd.DataFrame(
            {
                "ticker": config.market_ticker,
                "day": np.r_[id_days, m_on.index.to_numpy()],
                "kind": ["intraday"] * len(id_days) + ["overnight"] * len(m_on),
                "sigma": np.r_[m_rv, m_on.to_numpy()],
                "model_kind": ["rv"] * len(id_days) + [m_params.model_kind] * len(m_on),
                "converged": True,
            }
        )
    )

    out = panel.assign(
        sigma=sigma,
        std_return=standardize(panel["raw_return"].to_numpy(), sigma),
        mkt_sigma=m_sigma,
        mkt_std_return=standardize(panel["mkt_raw_return"].to_numpy(), m_sigma),
    )
    keep = ~out["ticker"].isin(list(excluded)).to_numpy()
    finite = np.isfinite(out["std_return"].to_numpy()) & np.isfinite(out["mkt_std_return"].to_numpy())
    n_dropped = int((keep & ~finite).sum())
    out = out.loc[keep & finite].reset_index(drop=True)
    est = pd.concat(estimates, ignore_index=True)[ESTIMATE_COLUMNS]
    est = est.sort_values(["ticker", "day", "kind"], kind="stable").reset_index(drop=True)
    return VolatilityResult(out, est, params, excluded, n_dropped)


def standardize_daily(
    daily: pd.DataFrame,
    market_times,
    market_prices,
    clean: pd.DataFrame,
    config: Config | None = None,
) -> VolatilityResult:
    """Daily variant: GJR on close-to-close returns for stocks and market."""
    config = config or Config()
    daily = daily.sort_values(["ticker", "k"], kind="stable").reset_index(drop=True)
    groups = daily.groupby("ticker", sort=True).indices
    tickers = sorted(groups)

    def one(ticker):
        r = daily["raw_return"].to_numpy()[groups[ticker]]
        try:
            p = fit_gjr_garch(r, "daily", min_obs=config.min_returns)
        except (ConvergenceError, InsufficientDataError) as exc:
            return exc
        return p, gjr_sigma_series(p, r, "daily")

    results = _map(one, tickers, config.workers)
    sigma = np.full(len(daily), np.nan)
    params, excluded, estimates = {}, {}, []
    for ticker, res in zip(tickers, results):
        if isinstance(res, Exception):
            excluded[ticker] = f"{type(res).__name__}: {res}"
            continue
        p, s = res
        sigma[groups[ticker]] = s
        params[ticker] = p
        estimates.append(
            pd.DataFrame(
                {
                    "ticker": ticker,
                    "day": daily["day"].to_numpy()[groups[ticker]],
                    "kind": "daily",
                    "sigma": s,
                    "model_kind": p.model_kind,
                    "converged": True,
                }
            )
        )
    m_sig, m_params = market_daily_sigma(clean, market_times, market_prices, config)
    params[config.market_ticker] = m_params
    m_sigma = m_sig.reindex(pd.DatetimeIndex(daily["day"].to_numpy())).to_numpy()
    out = daily.assign(
        sigma=sigma,
        std_return=standardize(daily["raw_return"].to_numpy(), sigma),
        mkt_sigma=m_sigma,
        mkt_std_return=standardize(daily["mkt_raw_return"].to_numpy(), m_sigma),
    )
    keep = ~out["ticker"].isin(list(excluded)).to_numpy()
    finite = np.isfinite(out["std_return"].to_numpy()) & np.isfinite(out["mkt_std_return"].to_numpy())
    n_dropped = int((keep & ~finite).sum())
    out = out.loc[keep & finite].reset_index(drop=True)
    est = pd.concat(estimates, ignore_index=True)[ESTIMATE_COLUMNS] if estimates else pd.DataFrame(columns=ESTIMATE_COLUMNS)
    return VolatilityResult(out, est, params, excluded, n_dropped)
