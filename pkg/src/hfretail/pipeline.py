"""In-memory chaining of the stages: ingest, panel, volatility, regression."""

from __future__ import annotations

import dataclasses

import numpy as np
import pandas as pd

from .config import Config
from .grouping import GroupCutoffs, compute_cutoffs
from .ingest import (
    FilterLedger,
    SecurityMeta,
    adjust_timestamps,
    apply_filters,
    normalize_snapshots,
)
from .panel import build_daily_panel, build_panel
from .regression import FitResult, build_lag_data, run_spec_suite
from .standardize import VolatilityResult, standardize_daily, standardize_panel
from .ticks import TickStore


def adjust_store_splits(store: TickStore, splits: pd.DataFrame) -> TickStore:
    """Divide pre-split prices by the split ratio, per ticker."""
    if splits is None or splits.empty:
        return store
    series = {}
    by_ticker = {t: g for t, g in splits.groupby("ticker")}
    for ticker in store:
        times, prices = store[ticker]
        if ticker in by_ticker:
            factor = np.ones(len(prices))
            for row in by_ticker[ticker].itertuples(index=False):
                cut = np.datetime64(pd.Timestamp(row.date).normalize(), "ns")
                factor[times < cut] *= float(row.ratio)
            prices = prices / factor
        series[ticker] = (times, prices)
    return TickStore(series)


def run_ingest(
    raw_snapshots: pd.DataFrame,
    ticks: TickStore,
    meta: SecurityMeta,
    config: Config,
    *,
    exclusions=None,
    aliases=None,
) -> tuple[pd.DataFrame, FilterLedger]:
    """Raw snapshot records (UTC) to the clean series; ``ticks`` must be split-adjusted."""
    snaps, rejected = normalize_snapshots(raw_snapshots)
    snaps = adjust_timestamps(snaps, config.delay_minutes)
    return apply_filters(
        snaps, ticks, meta, config, exclusions=exclusions, aliases=aliases, rejected_records=rejected
    )


def market_series(ticks: TickStore, config: Config):
    if config.market_ticker not in ticks:
        raise KeyError(f"no trades for the market proxy {config.market_ticker!r}")
    return ticks[config.market_ticker]


def attach_attributes(panel: pd.DataFrame, meta: SecurityMeta) -> pd.DataFrame:
    """Add ``sector`` and the latest known ``market_cap`` on or before each row's day."""
    out = panel.copy()
    out["sector"] = out["ticker"].map(meta.sector_of()).fillna("unknown")
    caps = meta.market_caps
    if caps is None or caps.empty:
        out["market_cap"] = np.nan
        return out
    caps = caps.assign(date=pd.to_datetime(caps["date"]).astype("datetime64[ns]")).sort_values("date")
    left = out[["ticker", "day"]].assign(_row=np.arange(len(out)), day=out["day"].astype("datetime64[ns]"))
    merged = pd.merge_asof(
        left.sort_values("day"), caps.rename(columns={"date": "day"}), on="day", by="ticker", direction="backward"
    )
    out["market_cap"] = merged.set_index("_row")["market_cap"].reindex(np.arange(len(out))).to_numpy()
    return out


@dataclasses.dataclass
class StageOutputs:
    clean: pd.DataFrame
    ledger: FilterLedger
    panel: pd.DataFrame
    panel_drops: dict
    vol: VolatilityResult
    cutoffs: GroupCutoffs


def run_through_vol(
    raw_snapshots: pd.DataFrame,
    raw_ticks: TickStore,
    meta: SecurityMeta,
    config: Config,
    *,
    exclusions=None,
    aliases=None,
) -> StageOutputs:
    ticks = adjust_store_splits(raw_ticks, meta.splits)
    clean, ledger = run_ingest(raw_snapshots, ticks, meta, config, exclusions=exclusions, aliases=aliases)
    m_times, m_prices = market_series(ticks, config)
    panel, drops = build_panel(clean, m_times, m_prices, config)
    vol = standardize_panel(panel, ticks, m_times, m_prices, clean, config)
    vol.panel = attach_attributes(vol.panel, meta)
    cutoffs = compute_cutoffs(vol.panel["std_return"])
    return StageOutputs(clean, ledger, panel, drops, vol, cutoffs)


def run_suite(
    std_panel: pd.DataFrame,
    cutoffs: GroupCutoffs,
    config: Config,
    *,
    subgroup: str = "none",
    dependent: str = "delta_n",
    frequency: str = "hf",
) -> list[FitResult]:
    data = build_lag_data(
        std_panel, cutoffs, subgroup=subgroup, dependent=dependent, frequency=frequency, config=config
    )
    return run_spec_suite(
        data, subgroup=subgroup, small_sample=config.small_sample_correction, workers=config.workers
    )


def run_daily_stage(clean: pd.DataFrame, ticks: TickStore, meta: SecurityMeta, config: Config):
    """Daily panel, GJR standardization and its own pooled cutoffs."""
    m_times, m_prices = market_series(ticks, config)
    daily, _ = build_daily_panel(clean, m_times, m_prices, config)
    vol = standardize_daily(daily, m_times, m_prices, clean, config)
    vol.panel = attach_attributes(vol.panel, meta)
    return vol, compute_cutoffs(vol.panel["std_return"])
