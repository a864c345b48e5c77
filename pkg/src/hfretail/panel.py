"""Panel assembly: position openings, scaled returns, winsorization, variants."""

from __future__ import annotations

import datetime as dt
import logging
import math

import numpy as np
import pandas as pd

from .calendar import SESSION_OPEN
from .config import Config

logger = logging.getLogger(__name__)

SESSION_HOURS = 6.5
DAY_NS = 86_400_000_000_000
SCHEMA_VERSION = 1

INTRADAY = "intraday"
OVERNIGHT = "overnight"


class UnmatchableError(LookupError):
    """No trade strictly before the requested timestamp."""


# --------------------------------------------------------------------------
# Row-level arithmetic
# --------------------------------------------------------------------------


def scaling_factor(kind: str, mnt: float | None = None) -> float:
    """Multiplier converting an interval change to full-day units.

    Intraday: (60 / mnt) * 6.5 * 2. Overnight: 2.
    """
    if kind == OVERNIGHT:
        return 2.0
    if kind != INTRADAY:
        raise ValueError(f"unknown kind {kind!r}")
    if mnt is None or not mnt > 0:
        raise ValueError(f"intraday interval must be positive, got {mnt!r} minutes")
    return 60.0 / mnt * SESSION_HOURS * 2.0


def scaling_factors(is_overnight, mnt) -> np.ndarray:
    """Vectorized :func:`scaling_factor`."""
    is_overnight = np.asarray(is_overnight, dtype=bool)
    mnt = np.asarray(mnt, dtype=np.float64)
    intraday = ~is_overnight
    if (intraday & ~(mnt > 0)).any():
        raise ValueError("intraday intervals must be positive")
    with np.errstate(divide="ignore", invalid="ignore"):
        sf = np.where(is_overnight, 2.0, 60.0 / mnt * SESSION_HOURS * 2.0)
    return sf


def position_openings(n_prev, n_curr, kind: str, mnt: float | None = None) -> float:
    """Scaled log change in holders, with one added to both counts."""
    if n_prev < 0 or n_curr < 0:
        raise ValueError("holder counts must be non-negative")
    return math.log((n_curr + 1) / (n_prev + 1)) * scaling_factor(kind, mnt)


def raw_return(p_prev, p_curr, kind: str, mnt: float | None = None) -> float:
    """Scaled log price return."""
    if not (p_prev > 0 and p_curr > 0):
        raise ValueError("prices must be strictly positive")
    return math.log(p_curr / p_prev) * scaling_factor(kind, mnt)


def match_last_trade(times, prices, t) -> float:
    """Price of the latest trade strictly before ``t``."""
    times = np.asarray(times, dtype="datetime64[ns]")
    idx = int(np.searchsorted(times, np.datetime64(t, "ns"), side="left")) - 1
    if idx < 0:
        raise UnmatchableError(f"no trade before {t}")
    return float(np.asarray(prices)[idx])


def match_prices(times, prices, query, *, same_session: bool = True) -> np.ndarray:
    """Vectorized strictly-before matching; NaN where unmatchable.

    With ``same_session`` the matched trade must not predate 9:30 on the
    query's own date, so an opening snapshot never picks up yesterday's close.
    """
    t_ns = np.asarray(times, dtype="datetime64[ns]").view(np.int64)
    q_ns = np.asarray(query, dtype="datetime64[ns]").view(np.int64)
    prices = np.asarray(prices, dtype=np.float64)
    idx = np.searchsorted(t_ns, q_ns, side="left") - 1
    ok = idx >= 0
    if same_session and len(q_ns):
        open_ns = (q_ns // DAY_NS) * DAY_NS + (SESSION_OPEN.hour * 60 + SESSION_OPEN.minute) * 60_000_000_000
        ok &= t_ns[np.clip(idx, 0, None)] >= open_ns if len(t_ns) else False
    out = np.full(len(q_ns), np.nan)
    out[ok] = prices[idx[ok]]
    return out


# --------------------------------------------------------------------------
# Distribution helpers
# --------------------------------------------------------------------------


def quantile(values, pct) -> np.ndarray | float:
    """Percentiles by linear interpolation between order statistics."""
    return np.percentile(np.asarray(values, dtype=np.float64), pct, method="linear")


def winsorize(series, lower_pct: float = 0.5, upper_pct: float = 99.5) -> np.ndarray:
    """Clamp values to the pooled ``lower_pct`` / ``upper_pct`` percentiles."""
    values = np.asarray(series, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot winsorize an empty series")
    lo, hi = quantile(values, [lower_pct, upper_pct])
    return np.clip(values, lo, hi)


def compensated_mean(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return math.fsum(values) / len(values) if len(values) else float("nan")


# --------------------------------------------------------------------------
# Detrending
# --------------------------------------------------------------------------


def detrend_residuals(t, y) -> np.ndarray:
    """Residuals of a least-squares line of ``y`` on ``t``."""
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(t) < 2:
        raise ValueError("need at least two points to fit a trend")
    tc = t - t.mean()
    sxx = float(np.dot(tc, tc))
    if sxx == 0.0:
        raise ValueError("time values are constant; trend is undefined")
    slope = float(np.dot(tc, y - y.mean())) / sxx
    return (y - y.mean()) - slope * tc


def detrend_holders(t, log_levels, is_overnight, mnt) -> np.ndarray:
    """Detrended position openings for one stock.

    ``t`` are observation times in days, ``log_levels`` are ``log(n + 1)``.
    ``is_overnight``/``mnt`` describe the n-1 consecutive intervals.
    """
    resid = detrend_residuals(t, log_levels)
    return np.diff(resid) * scaling_factors(is_overnight, mnt)


def _grouped_detrend(stock_codes, t_days, y):
    """Per-stock trend residuals, vectorized over a stock-sorted frame."""
    frame = pd.DataFrame({"s": stock_codes, "t": t_days, "y": y})
    grp = frame.groupby("s", sort=False)
    tc = frame["t"] - grp["t"].transform("mean")
    yc = frame["y"] - grp["y"].transform("mean")
    sxx = (tc * tc).groupby(frame["s"], sort=False).transform("sum")
    sxy = (tc * yc).groupby(frame["s"], sort=False).transform("sum")
    if (sxx <= 0).any():
        bad = frame.loc[sxx <= 0, "s"].unique()[:5]
        raise ValueError(f"degenerate time axis for stocks {list(bad)}")
    return (yc - (sxy / sxx) * tc).to_numpy()


# --------------------------------------------------------------------------
# Panel assembly
# --------------------------------------------------------------------------


def build_panel(clean: pd.DataFrame, market_times, market_prices, config: Config | None = None):
    """Pair consecutive observations into intraday and overnight rows.

    ``clean`` holds one row per retained snapshot with ``ticker``,
    ``observed_at`` (New York wall clock), ``holders`` and the matched
    ``price``. Market returns are computed on the same timestamp pairs from
    the market proxy's trades.

    Returns the panel frame and a dict of drop counts.
    """
    config = config or Config()
    frame = clean.sort_values(["ticker", "observed_at"], kind="stable").reset_index(drop=True)
    tickers = frame["ticker"].to_numpy()
    t = frame["observed_at"].to_numpy(dtype="datetime64[ns]")
    n = frame["holders"].to_numpy(dtype=np.int64)
    p = frame["price"].to_numpy(dtype=np.float64)
    t_ns = t.view(np.int64)
    day_ns = (t_ns // DAY_NS) * DAY_NS

    first = np.r_[True, tickers[1:] != tickers[:-1]]
    k = np.arange(len(frame)) - np.maximum.accumulate(np.where(first, np.arange(len(frame)), 0))
    cur = np.flatnonzero(~first)
    prev = cur - 1

    is_overnight = day_ns[cur] != day_ns[prev]
    mnt = np.where(is_overnight, np.nan, (t_ns[cur] - t_ns[prev]) / 60e9)
    keep = is_overnight | ((mnt > 0) & (mnt <= config.mnt_max_minutes))
    drops = {"intraday_interval_out_of_range": int((~keep).sum())}
    cur, prev, is_overnight, mnt = cur[keep], prev[keep], is_overnight[keep], mnt[keep]

    sf = scaling_factors(is_overnight, mnt)
    log_h = np.log(n + 1.0)
    delta_raw = (log_h[cur] - log_h[prev]) * sf
    ret = np.log(p[cur] / p[prev]) * sf

    m_prev = match_prices(market_times, market_prices, t[prev])
    m_curr = match_prices(market_times, market_prices, t[cur])
    mkt_ret = np.log(m_curr / m_prev) * sf

    stock_codes = pd.factorize(tickers, sort=True)[0]
    t_days = (t_ns - t_ns.min()) / DAY_NS if len(t_ns) else t_ns.astype(float)
    resid = _grouped_detrend(stock_codes, t_days, log_h) if len(frame) else np.zeros(0)
    delta_detr_raw = (resid[cur] - resid[prev]) * sf

    panel = pd.DataFrame(
        {
            "ticker": tickers[cur],
            "k": k[cur].astype(np.int64),
            "day": day_ns[cur].view("datetime64[ns]"),
            "t_prev": t[prev],
            "t_curr": t[cur],
            "is_overnight": is_overnight,
            "mnt": mnt,
            "n_prev": n[prev],
            "n_curr": n[cur],
            "p_prev": p[prev],
            "p_curr": p[cur],
            "delta_n_raw": delta_raw,
            "delta_n_detrended_raw": delta_detr_raw,
            "raw_return": ret,
            "mkt_p_prev": m_prev,
            "mkt_p_curr": m_curr,
            "mkt_raw_return": mkt_ret,
        }
    )
    unmatched = ~np.isfinite(mkt_ret)
    drops["market_unmatchable"] = int(unmatched.sum())
    panel = panel.loc[~unmatched].reset_index(drop=True)
    if panel.empty:
        raise ValueError("empty panel: no consecutive observation pairs")
    panel["delta_n"] = winsorize(panel["delta_n_raw"], config.winsor_lower_pct, config.winsor_upper_pct)
    panel["delta_n_detrended"] = winsorize(
        panel["delta_n_detrended_raw"], config.winsor_lower_pct, config.winsor_upper_pct
    )
    return panel, drops


def kind_labels(is_overnight) -> np.ndarray:
    return np.where(np.asarray(is_overnight, dtype=bool), OVERNIGHT, INTRADAY)


def build_daily_panel(clean: pd.DataFrame, market_times, market_prices, config: Config | None = None):
    """Close-to-close rows built from each day's last observation before 4 pm.

    Holder changes use the same plus-one guard as the high-frequency panel.
    The first available day of each stock has no change and yields no row.
    """
    config = config or Config()
    frame = clean.sort_values(["ticker", "observed_at"], kind="stable")
    frame = frame.assign(day=frame["observed_at"].dt.normalize())
    closes = frame.groupby(["ticker", "day"], sort=True).tail(1).reset_index(drop=True)
    tickers = closes["ticker"].to_numpy()
    same = np.r_[False, tickers[1:] == tickers[:-1]]
    cur = np.flatnonzero(same)
    prev = cur - 1
    t = closes["observed_at"].to_numpy(dtype="datetime64[ns]")
    n = closes["holders"].to_numpy(dtype=np.float64)
    p = closes["price"].to_numpy(dtype=np.float64)
    first = ~same
    k = np.arange(len(closes)) - np.maximum.accumulate(np.where(first, np.arange(len(closes)), 0))

    m_prev = match_prices(market_times, market_prices, t[prev])
    m_curr = match_prices(market_times, market_prices, t[cur])
    daily = pd.DataFrame(
        {
            "ticker": tickers[cur],
            "k": k[cur].astype(np.int64),
            "day": closes["day"].to_numpy()[cur],
            "t_prev": t[prev],
            "t_curr": t[cur],
            "n_close": n[cur].astype(np.int64),
            "p_close": p[cur],
            "delta_n_raw": np.log((n[cur] + 1.0) / (n[prev] + 1.0)),
            "raw_return": np.log(p[cur] / p[prev]),
            "mkt_raw_return": np.log(m_curr / m_prev),
        }
    )
    unmatched = ~np.isfinite(daily["mkt_raw_return"].to_numpy())
    daily = daily.loc[~unmatched].reset_index(drop=True)
    if daily.empty:
        raise ValueError("empty daily panel")
    daily["delta_n"] = winsorize(daily["delta_n_raw"], config.winsor_lower_pct, config.winsor_upper_pct)
    return daily, {"market_unmatchable": int(unmatched.sum())}


# --------------------------------------------------------------------------
# Summary statistics
# --------------------------------------------------------------------------

SUMMARY_COLUMNS = ["kind", "mean", "std", "p5", "p25", "p50", "p75", "p95", "nobs", "T", "n_stocks"]


def _describe(label, values, days, tickers, scale):
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return dict.fromkeys(SUMMARY_COLUMNS, np.nan) | {"kind": label, "nobs": 0}
    mean = compensated_mean(values)
    dev = values - mean
    std = math.sqrt(math.fsum(dev * dev) / (len(values) - 1)) if len(values) > 1 else 0.0
    pcts = quantile(values, [5, 25, 50, 75, 95])
    return {
        "kind": label,
        "mean": mean * scale,
        "std": std * scale,
        **{f"p{q}": v * scale for q, v in zip((5, 25, 50, 75, 95), pcts)},
        "nobs": len(values),
        "T": int(pd.Series(days).nunique()),
        "n_stocks": int(pd.Series(tickers).nunique()),
    }


def summary_stats(panel: pd.DataFrame, column: str, scale: float = 1.0) -> pd.DataFrame:
    """Mean/std/percentiles of ``column`` for intraday, overnight and all rows."""
    rows = []
    if "is_overnight" in panel:
        for label, mask in (
            ("Intraday", ~panel["is_overnight"].to_numpy()),
            ("Overnight", panel["is_overnight"].to_numpy()),
        ):
            sub = panel.loc[mask]
            rows.append(_describe(label, sub[column], sub["day"], sub["ticker"], scale))
    rows.append(_describe("All", panel[column], panel["day"], panel["ticker"], scale))
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def save_frame(frame: pd.DataFrame, path, fmt: str = "parquet") -> None:
    """Write a panel-like frame as parquet (with schema version) or CSV."""
    if fmt == "parquet":
        frame.attrs["schema_version"] = SCHEMA_VERSION
        frame.to_parquet(path, index=False)
    elif fmt == "csv":
        frame.to_csv(path, index=False, float_format="%.17g", date_format="%Y-%m-%d %H:%M:%S.%f")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def load_frame(path) -> pd.DataFrame:
    path = str(path)
    if path.endswith(".parquet"):
        frame = pd.read_parquet(path)
        version = frame.attrs.get("schema_version", SCHEMA_VERSION)
        if int(version) != SCHEMA_VERSION:
            raise ValueError(f"{path}: schema version {version}, expected {SCHEMA_VERSION}")
        return frame
    frame = pd.read_csv(path)
    for col in ("t_prev", "t_curr", "observed_at", "day"):
        if col in frame:
            frame[col] = pd.to_datetime(frame[col])
    return frame


def day_of(ts) -> dt.date:
    return pd.Timestamp(ts).date()
