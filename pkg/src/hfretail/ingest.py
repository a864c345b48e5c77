"""Loading and cleaning of holdings snapshots, trade ticks and security metadata.

The cleaning pipeline mirrors the twelve filtering steps of the original
study and records the number of surviving observations and securities after
each step in a :class:`FilterLedger`.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from .calendar import SESSION_OPEN, TradingCalendar, default_calendar
from .config import ALLOWED_DELAYS, Config, ConfigError
from .panel import match_prices
from .ticks import TickStore
from .volatility import realized_vol_days

logger = logging.getLogger(__name__)

NEW_YORK = "America/New_York"
GICS_SECTORS = (
    "Energy",
    "Materials",
    "Industrials",
    "Consumer Discretionary",
    "Consumer Staples",
    "Health Care",
    "Financials",
    "Information Technology",
    "Communication Services",
    "Utilities",
    "Real Estate",
)
COMMON_SHARE_CODES = (10, 11)

STEP_NAMES = (
    "Original snapshot dataset",
    "Drop observations before the sample start",
    "Apply timestamp delay and keep regular trading hours",
    "Match tickers with trade and security data",
    "Keep common stocks (share codes 10 or 11)",
    "Remove dual-class stocks",
    "Adjust for multiple observations within or around an hour",
    "Ensure completeness of the series at the intraday level",
    "Ensure continuity of the series at the daily level",
    "Match observations with transaction prices and apply again filters 8 and 9",
    "Require estimable realized volatility and enough returns for GJR-GARCH",
    "Remove constant holder series and treat listed anomalies",
)


class EmptyPanelError(RuntimeError):
    """Filtering removed every observation."""

    def __init__(self, step: int, name: str):
        super().__init__(f"empty panel: step {step} ({name}) removed all remaining observations")
        self.step = step


# --------------------------------------------------------------------------
# Ledger
# --------------------------------------------------------------------------


@dataclasses.dataclass
class FilterLedger:
    steps: list[tuple[str, int, int]] = dataclasses.field(default_factory=list)
    rejected_records: int = 0

    def record(self, name: str, frame: pd.DataFrame) -> None:
        self.steps.append((name, len(frame), int(frame["ticker"].nunique())))

    def is_monotone(self) -> bool:
        obs = [s[1] for s in self.steps]
        sec = [s[2] for s in self.steps]
        return all(a >= b for a, b in zip(obs, obs[1:])) and all(a >= b for a, b in zip(sec, sec[1:]))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(i + 1, name, obs, sec) for i, (name, obs, sec) in enumerate(self.steps)],
            columns=["step", "filtering_step", "n_obs", "n_stocks"],
        )

    def write(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


# --------------------------------------------------------------------------
# Metadata
# --------------------------------------------------------------------------


@dataclasses.dataclass
class SecurityMeta:
    """Security descriptors: share codes, sectors, dual-class flags, splits, caps."""

    info: pd.DataFrame  # ticker, share_code, sector, dual_class
    splits: pd.DataFrame  # ticker, date, ratio
    market_caps: pd.DataFrame  # ticker, date, market_cap

    def __post_init__(self):
        self.info = self.info.copy()
        self.info["ticker"] = self.info["ticker"].astype(str)
        self.info["share_code"] = self.info["share_code"].astype(int)
        self.info["dual_class"] = self.info["dual_class"].map(_as_bool)
        sectors = self.info["sector"].fillna("unknown").astype(str)
        bad = ~sectors.isin(GICS_SECTORS + ("unknown",))
        if bad.any():
            raise ValueError(f"unknown sector labels: {sorted(sectors[bad].unique())[:5]}")
        self.info["sector"] = sectors
        if self.info["ticker"].duplicated().any():
            raise ValueError("duplicate tickers in security metadata")
        if len(self.splits) and not (self.splits["ratio"] > 0).all():
            raise ValueError("split ratios must be positive")

    @property
    def tickers(self) -> set[str]:
        return set(self.info["ticker"])

    def sector_of(self) -> dict[str, str]:
        return dict(zip(self.info["ticker"], self.info["sector"]))


def _as_bool(value) -> bool:
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    text = str(value).strip().lower()
    if text in {"1", "true", "t", "yes", "y"}:
        return True
    if text in {"0", "false", "f", "no", "n", ""}:
        return False
    raise ValueError(f"cannot interpret {value!r} as a boolean")


# --------------------------------------------------------------------------
# Readers
# --------------------------------------------------------------------------


def _parse_utc(raw: pd.Series) -> pd.Series:
    return pd.to_datetime(raw, utc=True, errors="coerce", format="ISO8601")


def read_snapshots(path) -> tuple[pd.DataFrame, int]:
    """Read ``ticker,timestamp,users_holding`` rows (UTC retrieval times).

    Returns the frame and the number of rejected records.
    """
    raw = pd.read_csv(path, dtype={"ticker": str, "timestamp": str})
    missing = {"ticker", "timestamp", "users_holding"} - set(raw.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    return normalize_snapshots(raw)


def normalize_snapshots(raw: pd.DataFrame) -> tuple[pd.DataFrame, int]:
    """Validate raw snapshot records; bad rows are dropped and counted."""
    ts = _parse_utc(raw["timestamp"]) if raw["timestamp"].dtype == object else raw["timestamp"]
    if getattr(ts.dt, "tz", None) is None:
        ts = ts.dt.tz_localize("UTC")
    holders = pd.to_numeric(raw["users_holding"], errors="coerce")
    ticker = raw["ticker"].astype("string").str.strip()
    ok = ts.notna() & holders.notna() & (holders >= 0) & ticker.notna() & (ticker != "")
    ok &= np.isclose(holders.fillna(-1), np.round(holders.fillna(-1)))
    frame = pd.DataFrame(
        {
            "ticker": ticker[ok].astype(str).to_numpy(),
            "observed_at": ts[ok].to_numpy(),
            "holders": holders[ok].round().astype(np.int64).to_numpy(),
        }
    )
    frame["observed_at"] = frame["observed_at"].dt.tz_localize("UTC") if frame["observed_at"].dt.tz is None else frame["observed_at"]
    rejected = int((~ok).sum())
    if rejected:
        logger.warning("rejected %d snapshot records with unparseable fields", rejected)
    return frame, rejected


def read_ticks(path, venues=None) -> pd.DataFrame:
    """Read ``ticker,timestamp,price,exchange`` trades.

    Naive timestamps are New York wall clock; zone-aware ones are converted.
    Non-positive prices and venues outside ``venues`` are dropped.
    """
    raw = pd.read_csv(path, dtype={"ticker": str, "timestamp": str, "exchange": str})
    return normalize_ticks(raw, venues)


def normalize_ticks(raw: pd.DataFrame, venues=None) -> pd.DataFrame:
    ts = raw["timestamp"]
    if ts.dtype == object:
        sample = ts.iloc[0] if len(ts) else ""
        if any(marker in sample for marker in ("Z", "+")) or sample.count("-") > 2:
            ts = pd.to_datetime(ts, utc=True, errors="coerce", format="ISO8601")
        else:
            ts = pd.to_datetime(ts, errors="coerce", format="ISO8601")
    if getattr(ts.dt, "tz", None) is not None:
        ts = ts.dt.tz_convert(NEW_YORK).dt.tz_localize(None)
    price = pd.to_numeric(raw["price"], errors="coerce")
    ok = ts.notna() & (price > 0)
    if venues is not None:
        ok &= raw["exchange"].astype(str).isin(set(venues))
    return pd.DataFrame(
        {
            "ticker": raw.loc[ok, "ticker"].astype(str).to_numpy(),
            "traded_at": ts[ok].to_numpy(dtype="datetime64[ns]"),
            "price": price[ok].to_numpy(dtype=np.float64),
            "exchange": raw.loc[ok, "exchange"].astype(str).to_numpy(),
        }
    )


def read_metadata(meta_path, splits_path=None, caps_path=None) -> SecurityMeta:
    info = pd.read_csv(meta_path, dtype={"ticker": str, "sector": str})
    splits = (
        pd.read_csv(splits_path, dtype={"ticker": str}, parse_dates=["date"])
        if splits_path and Path(splits_path).exists()
        else pd.DataFrame({"ticker": [], "date": pd.to_datetime([]), "ratio": []})
    )
    caps = (
        pd.read_csv(caps_path, dtype={"ticker": str}, parse_dates=["date"])
        if caps_path and Path(caps_path).exists()
        else pd.DataFrame({"ticker": [], "date": pd.to_datetime([]), "market_cap": []})
    )
    return SecurityMeta(info=info, splits=splits, market_caps=caps)


def read_exclusions(path) -> pd.DataFrame:
    """Manual anomaly treatments: ``ticker,action,start,end`` with action exclude|truncate."""
    table = pd.read_csv(path, dtype=str).fillna("")
    if not set(table["action"]).issubset({"exclude", "truncate"}):
        raise ConfigError(f"{path}: action must be 'exclude' or 'truncate'")
    return table


def read_aliases(path) -> dict[str, str]:
    table = pd.read_csv(path, dtype=str)
    return dict(zip(table["alias"], table["ticker"]))


# --------------------------------------------------------------------------
# Record-level transforms
# --------------------------------------------------------------------------


def adjust_timestamps(snapshots: pd.DataFrame, delay_minutes: int) -> pd.DataFrame:
    """Shift retrieval times back by the reporting delay and convert to New York time.

    The output ``observed_at`` column is naive New York wall-clock time.
    """
    if delay_minutes not in ALLOWED_DELAYS:
        raise ConfigError(f"delay_minutes must be one of {ALLOWED_DELAYS}, got {delay_minutes}")
    ts = snapshots["observed_at"]
    if ts.dt.tz is None:
        ts = ts.dt.tz_localize("UTC")
    shifted = (ts - pd.Timedelta(minutes=delay_minutes)).dt.tz_convert(NEW_YORK).dt.tz_localize(None)
    return snapshots.assign(observed_at=shifted.astype("datetime64[ns]"))


def dedupe_hourly(snapshots: pd.DataFrame, epsilon_minutes: float = 2.0) -> pd.DataFrame:
    """Keep the last observation per ticker and clock hour, then drop near-hour repeats.

    When two consecutive retained observations straddle an hour boundary
    within ``epsilon_minutes`` on both sides (say 11:59 and 12:01), the later
    one is removed.
    """
    frame = snapshots.sort_values(["ticker", "observed_at"], kind="stable")
    hour = frame["observed_at"].dt.floor("h")
    frame = frame.loc[~pd.DataFrame({"t": frame["ticker"], "h": hour}).duplicated(keep="last")]
    if epsilon_minutes <= 0 or frame.empty:
        return frame.reset_index(drop=True)
    eps_ns = int(epsilon_minutes * 60e9)
    tickers = frame["ticker"].to_numpy()
    t_ns = frame["observed_at"].to_numpy(dtype="datetime64[ns]").view(np.int64)
    keep = np.ones(len(frame), dtype=bool)
    hour_ns = 3_600_000_000_000
    while True:
        idx = np.flatnonzero(keep)
        if len(idx) < 2:
            break
        a, b = idx[:-1], idx[1:]
        boundary = (t_ns[b] // hour_ns) * hour_ns
        near = (
            (tickers[a] == tickers[b])
            & (t_ns[a] < boundary)
            & (boundary - t_ns[a] <= eps_ns)
            & (t_ns[b] - boundary <= eps_ns)
        )
        if not near.any():
            break
        # drop only the first flagged row of each run, then re-check against the new predecessor
        flagged = b[near]
        run_start = np.r_[True, ~near[:-1]][near]
        keep[flagged[run_start]] = False
    return frame.loc[keep].reset_index(drop=True)


def adjust_splits(ticks: pd.DataFrame, splits: pd.DataFrame) -> pd.DataFrame:
    """Express pre-split trade prices in post-split units.

    A split with ratio ``r`` on date ``d`` divides every earlier price by ``r``.
    """
    if splits is None or splits.empty or ticks.empty:
        return ticks
    ticks = ticks.copy()
    day = ticks["traded_at"].dt.normalize()
    factor = np.ones(len(ticks))
    for row in splits.itertuples(index=False):
        hit = (ticks["ticker"].to_numpy() == row.ticker) & (day < pd.Timestamp(row.date)).to_numpy()
        factor[hit] *= float(row.ratio)
    ticks["price"] = ticks["price"].to_numpy() / factor
    return ticks


# --------------------------------------------------------------------------
# Filter helpers (all operate on a frame with ticker / observed_at / day)
# --------------------------------------------------------------------------


def _required_points(days, calendar: TradingCalendar, min_points: int) -> np.ndarray:
    """Minimum snapshots per day, scaled down proportionally on half days."""
    # index arrays rather than dict lookups: hashing datetime64 scalars leaks memory in numpy 2.2
    unique, inverse = np.unique(days, return_inverse=True)
    need = np.array(
        [math.ceil(min_points * calendar.session_minutes(pd.Timestamp(d).date()) / 390 - 1e-9) for d in unique],
        dtype=np.int64,
    )
    return need[inverse]


def _completeness(frame, calendar, min_points):
    counts = frame.groupby(["ticker", "day"], sort=False)["observed_at"].transform("size").to_numpy()
    return frame.loc[counts >= _required_points(frame["day"].to_numpy(), calendar, min_points)]


def _continuity(frame, calendar, max_gap):
    days = frame[["ticker", "day"]].drop_duplicates()
    if days.empty:
        return frame
    idx = calendar.session_index(days["day"].dt.date)
    days = days.assign(idx=idx)
    gap = days.groupby("ticker", sort=False)["idx"].diff().fillna(1) - 1
    bad = set(days.loc[gap > max_gap, "ticker"])
    return frame.loc[~frame["ticker"].isin(bad)]


def _enough_returns(frame, min_returns):
    n_days = frame.groupby("ticker", sort=False)["day"].transform("nunique")
    return frame.loc[(n_days - 1) >= min_returns]


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _match_step(frame, ticks: TickStore, workers):
    def one(ticker):
        times, prices = ticks[ticker]
        return match_prices(times, prices, groups[ticker]["observed_at"].to_numpy())

    groups = {t: g for t, g in frame.groupby("ticker", sort=True)}
    order = sorted(groups)
    matched = _map(one, order, workers)
    parts = []
    for ticker, price in zip(order, matched):
        g = groups[ticker].assign(price=price)
        parts.append(g.loc[np.isfinite(price)])
    return pd.concat(parts) if parts else frame.assign(price=np.nan).iloc[0:0]


def _rv_step(frame, ticks: TickStore, calendar, workers):
    def one(item):
        ticker, days = item
        times, prices = ticks[ticker]
        return realized_vol_days(times, prices, days, calendar)

    days = frame[["ticker", "day"]].drop_duplicates().sort_values(["ticker", "day"])
    items = [(t, [pd.Timestamp(d).date() for d in g["day"]]) for t, g in days.groupby("ticker", sort=True)]
    sigmas = _map(one, items, workers)
    good = []
    for (ticker, dlist), sig in zip(items, sigmas):
        ok = np.isfinite(sig) & (sig > 0)
        good.extend((ticker, pd.Timestamp(d)) for d, keep in zip(dlist, ok) if keep)
    good_index = pd.MultiIndex.from_tuples(good, names=["ticker", "day"]) if good else None
    if good_index is None:
        return frame.iloc[0:0]
    key = pd.MultiIndex.from_arrays([frame["ticker"], frame["day"]])
    return frame.loc[key.isin(good_index)]


def _apply_exclusions(frame, exclusions):
    if exclusions is None or exclusions.empty:
        return frame
    for row in exclusions.itertuples(index=False):
        mine = frame["ticker"] == row.ticker
        if row.action == "exclude":
            frame = frame.loc[~mine]
        else:
            start = pd.Timestamp(row.start) if row.start else pd.Timestamp.min
            end = pd.Timestamp(row.end) if row.end else pd.Timestamp.max
            inside = (frame["day"] >= start) & (frame["day"] <= end)
            frame = frame.loc[~mine | inside]
    return frame


def apply_filters(
    snapshots: pd.DataFrame,
    ticks: TickStore,
    meta: SecurityMeta,
    config: Config | None = None,
    *,
    exclusions: pd.DataFrame | None = None,
    aliases: dict[str, str] | None = None,
    calendar: TradingCalendar | None = None,
    rejected_records: int = 0,
) -> tuple[pd.DataFrame, FilterLedger]:
    """Run the twelve cleaning steps on delay-adjusted snapshots.

    ``snapshots`` must already carry New York ``observed_at`` times (see
    :func:`adjust_timestamps`); ``ticks`` must be split-adjusted. Returns the
    clean series (``ticker, observed_at, day, holders, price``) and the ledger.

    Raises
    ------
    EmptyPanelError
        Naming the first step that left no observations.
    """
    config = config or Config()
    calendar = calendar or default_calendar()
    ledger = FilterLedger(rejected_records=rejected_records)
    frame = snapshots[["ticker", "observed_at", "holders"]].copy()
    frame["observed_at"] = frame["observed_at"].astype("datetime64[ns]")
    frame["day"] = frame["observed_at"].dt.normalize()

    def record(step, new):
        ledger.record(STEP_NAMES[step - 1], new)
        if new.empty:
            raise EmptyPanelError(step, STEP_NAMES[step - 1])
        return new

    frame = record(1, frame)

    # 2: sample window
    keep = frame["day"] >= pd.Timestamp(config.sample_start)
    if config.sample_end is not None:
        keep &= frame["day"] <= pd.Timestamp(config.sample_end)
    frame = record(2, frame.loc[keep])

    # 3: regular trading hours on trading days
    days = frame["day"].dt.date
    unique_days = pd.unique(days)
    session = {d: calendar.is_session(d) for d in unique_days}
    close_min = {d: calendar.session_close(d).hour * 60 + calendar.session_close(d).minute for d in unique_days}
    tod = frame["observed_at"] - frame["day"]
    open_td = pd.Timedelta(hours=SESSION_OPEN.hour, minutes=SESSION_OPEN.minute)
    close_td = pd.to_timedelta(days.map(close_min).astype(np.int64), unit="min")
    in_hours = days.map(session).astype(bool) & (tod >= open_td) & (tod <= close_td)
    frame = record(3, frame.loc[in_hours])

    # 4: ticker matching
    if aliases:
        frame = frame.assign(ticker=frame["ticker"].map(lambda t: aliases.get(t, t)))
    known = meta.tickers & set(ticks.keys())
    frame = record(4, frame.loc[frame["ticker"].isin(known)])

    info = meta.info.set_index("ticker")
    # 5: common stocks
    common = set(info.index[info["share_code"].isin(COMMON_SHARE_CODES)])
    frame = record(5, frame.loc[frame["ticker"].isin(common)])

    # 6: dual class
    dual = set(info.index[info["dual_class"]])
    frame = record(6, frame.loc[~frame["ticker"].isin(dual)])

    # 7: hourly dedupe
    deduped = dedupe_hourly(frame[["ticker", "observed_at", "holders"]], config.near_hour_epsilon_minutes)
    deduped["day"] = deduped["observed_at"].dt.normalize()
    frame = record(7, deduped)

    # 8, 9
    frame = record(8, _completeness(frame, calendar, config.min_points_per_day))
    frame = record(9, _continuity(frame, calendar, config.max_gap_trading_days))

    # 10: price matching, then completeness and continuity again
    frame = _match_step(frame, ticks, config.workers)
    frame = _completeness(frame, calendar, config.min_points_per_day)
    frame = record(10, _continuity(frame, calendar, config.max_gap_trading_days))

    # 11: volatility estimability
    frame = _rv_step(frame, ticks, calendar, config.workers)
    frame = _continuity(frame, calendar, config.max_gap_trading_days)
    frame = record(11, _enough_returns(frame, config.min_returns))

    # 12: anomalies and constant series
    frame = _apply_exclusions(frame, exclusions)
    varying = frame.groupby("ticker", sort=False)["holders"].transform("nunique") > 1
    frame = frame.loc[varying]
    frame = _continuity(frame, calendar, config.max_gap_trading_days)
    frame = record(12, _enough_returns(frame, config.min_returns))

    clean = frame.sort_values(["ticker", "observed_at"], kind="stable").reset_index(drop=True)
    return clean[["ticker", "observed_at", "day", "holders", "price"]], ledger


def clean_to_snapshots(clean: pd.DataFrame) -> pd.DataFrame:
    """Strip derived columns so a clean series can be fed back through the filters."""
    return clean[["ticker", "observed_at", "holders"]].copy()
