"""Synthetic holdings and trade data with known position-opening responses, plus oracles.

Prices follow a geometric diffusion within the session and GJR-GARCH driven
overnight gaps. Standardized returns and their groups are computed with the
production panel, volatility and grouping code, after which holder counts are
drawn so that scaled position openings equal

    mu + sum_L b[g(r_{k-L}), L] * m(level_{k-L}) + noise

in log(n + 1) space, rounded to integers.

Effects at other lags are only partly absorbed by the quadratic controls, so
the truth manifest records pseudo-true coefficients: the least-squares
projection of the noise-free signal onto each lag's realized design. Given the
regressors, the estimated group coefficients are unbiased for these values.
The raw effect table is recorded alongside.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
import math
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.optimize

from .calendar import SESSION_OPEN, TradingCalendar, default_calendar
from .config import Config
from .grouping import GROUP_LABELS, compute_cutoffs, assign_groups
from .ingest import GICS_SECTORS, NEW_YORK, SecurityMeta
from .panel import build_panel, scaling_factors
from .standardize import standardize_panel
from .ticks import TickStore

N_LAGS = 6
MINUTE_NS = 60_000_000_000

# lag x group effects in basis points of daily log holders
DEFAULT_EFFECTS_BPS = (
    (150.0, 40.0, 10.0, 0.0, 20.0, 80.0),
    (100.0, 35.0, 20.0, 18.0, 25.0, 40.0),
    (80.0, 30.0, 15.0, 12.0, 20.0, 35.0),
    (70.0, 25.0, 12.0, 10.0, 15.0, 30.0),
    (65.0, 22.0, 10.0, 8.0, 14.0, 28.0),
    (60.0, 20.0, 10.0, 8.0, 12.0, 25.0),
)


class DgpError(ValueError):
    """Inconsistent synthetic configuration."""


@dataclasses.dataclass(frozen=True)
class DgpConfig:
    n_stocks: int = 200
    n_days: int = 250
    seed: int = 0
    start: dt.date = dt.date(2019, 6, 3)
    tick_seconds: int = 120
    effects_bps: tuple[tuple[float, ...], ...] = DEFAULT_EFFECTS_BPS
    trend_bps: float = 30.0
    noise_sd: float = 0.05
    gjr: tuple[float, float, float, float] = (0.05, 0.05, 0.10, 0.85)
    overnight_df: float | None = None
    jump_prob: float = 0.03
    jump_scale: float = 4.0
    daily_vol_range: tuple[float, float] = (0.01, 0.03)
    market_daily_vol: float = 0.01
    holders_range: tuple[float, float] = (5_000.0, 200_000.0)
    cap_range: tuple[float, float] = (5e8, 5e10)
    overnight_multiplier: float = 1.0
    intraday_multiplier: float = 1.0
    post_covid_multiplier: float = 1.0
    n_split_stocks: int = 3
    extra_snapshots: bool = True
    decoys: bool = False
    delay_minutes: int = 45
    market_ticker: str = "SPY"

    def __post_init__(self):
        omega, alpha, gamma, beta = self.gjr
        if min(omega, alpha, gamma, beta) < 0 or alpha + gamma / 2 + beta >= 1:
            raise DgpError("GJR parameters must be non-negative and stationary")
        if self.n_stocks < 2 or self.n_days < 10:
            raise DgpError("need at least 2 stocks and 10 days")
        effects = np.asarray(self.effects_bps, dtype=float)
        if effects.shape != (N_LAGS, 6) or not np.isfinite(effects).all():
            raise DgpError("effects_bps must be a finite 6x6 table (lag x group)")
        if self.overnight_df is not None and self.overnight_df <= 2:
            raise DgpError("overnight_df must exceed 2 (finite variance)")
        if not 0 <= self.jump_prob < 1 or self.jump_scale < 0:
            raise DgpError("jump_prob must lie in [0, 1) and jump_scale be non-negative")
        if self.noise_sd < 0 or self.tick_seconds <= 0:
            raise DgpError("noise_sd must be >= 0 and tick_seconds > 0")
        if not 0 < self.holders_range[0] <= self.holders_range[1]:
            raise DgpError("holders_range must be positive and ordered")

    @property
    def effects(self) -> np.ndarray:
        """Lag x group effects in natural units."""
        return np.asarray(self.effects_bps, dtype=float) / 1e4

    def pipeline_config(self, **changes) -> Config:
        """Pipeline settings matching this DGP's calendar window and length."""
        base = Config(
            delay_minutes=self.delay_minutes,
            sample_start=self.start,
            min_returns=min(240, self.n_days - 1),
            market_ticker=self.market_ticker,
        )
        return base.replace(**changes) if changes else base

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["start"] = self.start.isoformat()
        return d


@dataclasses.dataclass
class SynthData:
    snapshots: pd.DataFrame  # ticker, timestamp (UTC ISO strings), users_holding
    ticks: TickStore  # raw (pre-split) prices, includes the market proxy
    meta: SecurityMeta
    truth: dict
    clean_reference: pd.DataFrame = dataclasses.field(repr=False, default=None)
    signal: pd.DataFrame = dataclasses.field(repr=False, default=None)  # ticker, k, signal, target

    def tick_frame(self, exchange: str = "N") -> pd.DataFrame:
        frame = self.ticks.to_frame()
        frame["timestamp"] = frame.pop("traded_at").dt.strftime("%Y-%m-%dT%H:%M:%S.%f")
        frame["exchange"] = exchange
        return frame[["ticker", "timestamp", "price", "exchange"]]


# --------------------------------------------------------------------------
# Price simulation
# --------------------------------------------------------------------------


def _gjr_path(rng, n, omega, alpha, gamma, beta, df=None):
    """Unit-unconditional-variance GJR path: returns (h, z) of length n.

    Innovations are standard normal, or unit-variance Student t with ``df``
    degrees of freedom.
    """
    uncond = omega / (1 - alpha - gamma / 2 - beta)
    if df is None:
        z = rng.standard_normal(n)
    else:
        z = rng.standard_t(df, size=n) / math.sqrt(df / (df - 2))
    h = np.empty(n)
    prev_h, prev_e = 1.0, 0.0
    for t in range(n):
        prev_h = omega / uncond + (alpha + gamma * (prev_e < 0)) * prev_e * prev_e + beta * prev_h
        h[t] = prev_h
        prev_e = math.sqrt(prev_h) * z[t]
    return h, z


def _session_grid(days, calendar, tick_seconds):
    """Tick times (ns) and day index for every session in ``days``."""
    open_min = SESSION_OPEN.hour * 60 + SESSION_OPEN.minute
    times, day_idx = [], []
    for i, d in enumerate(days):
        close = calendar.session_close(d)
        minutes = close.hour * 60 + close.minute - open_min
        n = minutes * 60 // tick_seconds + 1
        base = np.datetime64(d, "ns").astype(np.int64) + open_min * MINUTE_NS
        times.append(base + np.arange(n, dtype=np.int64) * tick_seconds * 1_000_000_000)
        day_idx.append(np.full(n, i))
    return np.concatenate(times), np.concatenate(day_idx)


def _simulate_prices(
    rng, grid_ns, day_idx, n_days, daily_vol, gjr, p0, tick_seconds, df=None, jump_prob=0.0, jump_scale=0.0
):
    """Log-price ticks: GJR-scaled overnight gaps plus intraday Brownian increments.

    With probability ``jump_prob`` an overnight gap also carries a normal jump
    whose sd is ``jump_scale`` times the half-day volatility.
    """
    h, z = _gjr_path(rng, n_days, *gjr, df=df)
    jumps = rng.standard_normal(n_days) * jump_scale * (rng.random(n_days) < jump_prob)
    z = z + jumps
    half_var = daily_vol**2 / 2 * h
    first = np.r_[True, day_idx[1:] != day_idx[:-1]]
    per_tick_var = half_var[day_idx] * tick_seconds / (390 * 60)
    inc = rng.standard_normal(len(grid_ns)) * np.sqrt(per_tick_var)
    gaps = np.sqrt(half_var) * z
    gaps[0] = 0.0
    inc[first] = gaps
    return p0 * np.exp(np.cumsum(inc))


def _snapshot_times(rng, days, calendar, extra):
    """Observed snapshot instants (NY, ns): just before each full hour 10:00..close."""
    in_hours, out_hours = [], []
    for d in days:
        close = calendar.session_close(d)
        base = np.datetime64(d, "ns").astype(np.int64)
        hours = np.arange(10, close.hour + 1)
        jitter = rng.integers(1, 60, size=len(hours))
        in_hours.append(base + hours * 60 * MINUTE_NS - jitter * 1_000_000_000)
        if extra:
            for hh in (8, 17, 21):
                out_hours.append(base + (hh * 60 + 59) * MINUTE_NS)
    return np.concatenate(in_hours), np.array(out_hours, dtype=np.int64)


def _utc_strings(ny_ns, delay_minutes):
    local = pd.DatetimeIndex(ny_ns.view("datetime64[ns]")) + pd.Timedelta(minutes=delay_minutes)
    utc = local.tz_localize(NEW_YORK).tz_convert("UTC").tz_localize(None)
    return np.char.add(np.datetime_as_string(utc.to_numpy(), unit="us"), "Z")


# --------------------------------------------------------------------------
# Generator
# --------------------------------------------------------------------------


def _pseudo_true(signal, groups_lagged, r_lagged, m_lagged):
    """Lag x group coefficients of the noise-free signal on each lag's design.

    Conditional on the regressors, OLS is unbiased for these values, so they
    are the exact target of the estimated group coefficients. The design is
    assembled here independently of the regression module.
    """
    n = len(signal)
    out = np.zeros((N_LAGS, 6))
    for lag in range(N_LAGS):
        ind = np.zeros((n, 6))
        ind[np.arange(n), groups_lagged[:, lag]] = 1.0
        own = [c for j in range(N_LAGS) if j != lag for c in (r_lagged[:, j], r_lagged[:, j] ** 2)]
        mkt = [c for j in range(N_LAGS) for c in (m_lagged[:, j], m_lagged[:, j] ** 2)]
        X = np.column_stack([ind, *own, *mkt])
        coef, *_ = np.linalg.lstsq(X, signal, rcond=None)
        out[lag] = coef[:6]
    return out


def generate(cfg: DgpConfig, calendar: TradingCalendar | None = None) -> SynthData:
    """Simulate one dataset in memory."""
    calendar = calendar or default_calendar()
    days = calendar.next_sessions(cfg.start, cfg.n_days)
    minutes = np.array([calendar.session_minutes(d) for d in days])
    grid_ns, day_idx = _session_grid(days, calendar, cfg.tick_seconds)
    grid = grid_ns.view("datetime64[ns]")
    root = np.random.SeedSequence(cfg.seed)
    market_rng, meta_rng, *stock_seeds = [np.random.default_rng(s) for s in root.spawn(cfg.n_stocks + 2)]

    tickers = [f"S{i:04d}" for i in range(cfg.n_stocks)]
    market_prices = _simulate_prices(
        market_rng, grid_ns, day_idx, cfg.n_days, cfg.market_daily_vol, cfg.gjr, 300.0, cfg.tick_seconds, cfg.overnight_df, cfg.jump_prob, cfg.jump_scale
    )
    series = {cfg.market_ticker: (grid, market_prices)}

    # per-stock prices and snapshot times
    vols = meta_rng.uniform(*cfg.daily_vol_range, size=cfg.n_stocks)
    p0 = meta_rng.uniform(10.0, 200.0, size=cfg.n_stocks)
    log_h0 = meta_rng.uniform(*np.log(cfg.holders_range), size=cfg.n_stocks)
    log_cap = meta_rng.uniform(*np.log(cfg.cap_range), size=cfg.n_stocks)
    split_stocks = set(meta_rng.choice(cfg.n_stocks, size=min(cfg.n_split_stocks, cfg.n_stocks), replace=False))
    splits = []
    adjusted = {}
    snap_in, snap_out = {}, {}
    for i, ticker in enumerate(tickers):
        rng = stock_seeds[i]
        prices = _simulate_prices(rng, grid_ns, day_idx, cfg.n_days, vols[i], cfg.gjr, p0[i], cfg.tick_seconds, cfg.overnight_df, cfg.jump_prob, cfg.jump_scale)
        adjusted[ticker] = prices
        raw = prices
        if i in split_stocks:
            split_day = days[int(rng.integers(cfg.n_days // 4, 3 * cfg.n_days // 4))]
            ratio = float(rng.choice([2.0, 4.0]))
            raw = np.where(day_idx < days.index(split_day), prices * ratio, prices)
            splits.append((ticker, pd.Timestamp(split_day), ratio))
        series[ticker] = (grid, raw)
        snap_in[ticker], snap_out[ticker] = _snapshot_times(rng, days, calendar, cfg.extra_snapshots)

    # production price side: clean frame -> panel -> standardized returns
    config = cfg.pipeline_config()
    clean_parts = []
    for ticker in tickers:
        t = snap_in[ticker]
        idx = np.searchsorted(grid_ns, t, side="left") - 1
        clean_parts.append(
            pd.DataFrame(
                {
                    "ticker": ticker,
                    "observed_at": t.view("datetime64[ns]"),
                    "holders": 0,
                    "price": adjusted[ticker][idx],
                }
            )
        )
    clean = pd.concat(clean_parts, ignore_index=True)
    clean["day"] = clean["observed_at"].dt.normalize()
    panel, _ = build_panel(clean, grid, market_prices, config)
    adjusted_store = TickStore({t: (grid, adjusted[t]) for t in tickers})
    vol = standardize_panel(panel, adjusted_store, grid, market_prices, clean, config, calendar)
    std_panel = vol.panel
    cutoffs = compute_cutoffs(std_panel["std_return"])
    groups = assign_groups(std_panel["std_return"].to_numpy(), cutoffs)

    # lagged effects by panel position within each stock
    effects = cfg.effects
    is_on = std_panel["is_overnight"].to_numpy(bool)
    post = std_panel["day"].to_numpy() >= np.datetime64(config.covid_boundary, "ns")
    mult = np.where(is_on, cfg.overnight_multiplier, cfg.intraday_multiplier) * np.where(
        post, cfg.post_covid_multiplier, 1.0
    )
    codes = pd.factorize(std_panel["ticker"].to_numpy(), sort=True)[0]
    n = len(std_panel)
    pos = np.arange(n)
    first = np.r_[True, codes[1:] != codes[:-1]]
    start = np.maximum.accumulate(np.where(first, pos, 0))
    contrib = np.zeros((n, N_LAGS))
    r_lag = np.full((n, N_LAGS), np.nan)
    m_lag = np.full((n, N_LAGS), np.nan)
    g_lag = np.zeros((n, N_LAGS), dtype=np.int64)
    std = std_panel["std_return"].to_numpy()
    mkt_std = std_panel["mkt_std_return"].to_numpy()
    for j in range(N_LAGS):
        src = pos - j
        ok = src >= start
        contrib[ok, j] = effects[j, groups[src[ok]]] * mult[src[ok]]
        r_lag[ok, j] = std[src[ok]]
        m_lag[ok, j] = mkt_std[src[ok]]
        g_lag[ok, j] = groups[src[ok]]
    noise_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919]))
    mu = cfg.trend_bps / 1e4
    target = mu + contrib.sum(axis=1) + cfg.noise_sd * noise_rng.standard_normal(n)
    sf = scaling_factors(is_on, std_panel["mnt"].to_numpy())
    step = target / sf

    full = (pos - start) >= N_LAGS - 1
    pseudo = _pseudo_true(mu + contrib[full].sum(axis=1), g_lag[full], r_lag[full], m_lag[full])
    truth = {L: {GROUP_LABELS[g]: float(pseudo[L, g]) for g in range(6)} for L in range(N_LAGS)}

    # holder counts for every clean observation, in time order per stock
    step_by_key = pd.Series(step, index=pd.MultiIndex.from_arrays([std_panel["ticker"], std_panel["k"]]))
    holders_parts = []
    for i, ticker in enumerate(tickers):
        k_count = len(snap_in[ticker])
        steps = np.zeros(k_count)
        if ticker in vol.params:
            s = step_by_key.loc[ticker]
            steps[s.index.to_numpy()] = s.to_numpy()
        else:
            steps[1:] = cfg.noise_sd / 13.0 * noise_rng.standard_normal(k_count - 1)
        level = log_h0[i] + np.cumsum(steps)
        holders_parts.append(np.maximum(np.round(np.exp(level) - 1.0), 0).astype(np.int64))
    holders = dict(zip(tickers, holders_parts))

    snapshots = _snapshot_frame(tickers, snap_in, snap_out, holders, log_h0, cfg)
    info = pd.DataFrame(
        {
            "ticker": tickers,
            "share_code": 11,
            "sector": [GICS_SECTORS[i % len(GICS_SECTORS)] for i in range(cfg.n_stocks)],
            "dual_class": False,
        }
    )
    caps = _cap_frame(tickers, days, log_cap, adjusted, grid_ns, day_idx)
    split_frame = pd.DataFrame(splits, columns=["ticker", "date", "ratio"])
    if cfg.decoys:
        snapshots, info, caps = _add_decoys(cfg, days, calendar, snapshots, info, caps, series, grid, grid_ns, day_idx, minutes)
    meta = SecurityMeta(info=info, splits=split_frame, market_caps=caps)

    clean_ref = clean.drop(columns="holders").merge(
        pd.DataFrame(
            {
                "ticker": np.repeat(tickers, [len(holders[t]) for t in tickers]),
                "observed_at": np.concatenate([snap_in[t] for t in tickers]).view("datetime64[ns]"),
                "holders": np.concatenate([holders[t] for t in tickers]),
            }
        ),
        on=["ticker", "observed_at"],
    )
    manifest = {
        "dgp": cfg.to_dict(),
        "trend": mu,
        "effects": effects.tolist(),
        "truth": {str(L): v for L, v in truth.items()},
        "cutoffs": cutoffs.to_dict(),
        "gjr_failures": sorted(vol.excluded),
        "splits": [[t, d.date().isoformat(), r] for t, d, r in splits],
        "n_panel_rows": int(n),
    }
    signal = pd.DataFrame(
        {
            "ticker": std_panel["ticker"].to_numpy(),
            "k": std_panel["k"].to_numpy(),
            "signal": mu + contrib.sum(axis=1),
            "target": target,
        }
    )
    return SynthData(
        snapshots=snapshots,
        ticks=TickStore(series),
        meta=meta,
        truth=manifest,
        clean_reference=clean_ref,
        signal=signal,
    )


def _snapshot_frame(tickers, snap_in, snap_out, holders, log_h0, cfg):
    t_all, h_all, tk_all = [], [], []
    for i, ticker in enumerate(tickers):
        t_in, t_out = snap_in[ticker], snap_out[ticker]
        h_in = holders[ticker]
        # out-of-hours snapshots carry the nearest earlier in-hours count
        if len(t_out):
            j = np.clip(np.searchsorted(t_in, t_out) - 1, 0, len(t_in) - 1)
            h_out = h_in[j]
        else:
            h_out = np.zeros(0, dtype=np.int64)
        t = np.r_[t_in, t_out]
        h = np.r_[h_in, h_out]
        order = np.argsort(t, kind="stable")
        t_all.append(t[order])
        h_all.append(h[order])
        tk_all.append(np.full(len(t), ticker))
    t = np.concatenate(t_all)
    return pd.DataFrame(
        {
            "ticker": np.concatenate(tk_all),
            "timestamp": _utc_strings(t, cfg.delay_minutes),
            "users_holding": np.concatenate(h_all),
        }
    )


def _cap_frame(tickers, days, log_cap, prices, grid_ns, day_idx):
    last = np.r_[np.flatnonzero(day_idx[1:] != day_idx[:-1]), len(day_idx) - 1]
    parts = []
    for i, ticker in enumerate(tickers):
        close = prices[ticker][last]
        cap = np.exp(log_cap[i]) * close / close[0]
        parts.append(pd.DataFrame({"ticker": ticker, "date": pd.to_datetime(days), "market_cap": cap}))
    return pd.concat(parts, ignore_index=True)


def _add_decoys(cfg, days, calendar, snapshots, info, caps, series, grid, grid_ns, day_idx, minutes):
    """Stocks that must each be removed by one specific cleaning step."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 104729]))
    decoys = {"XPREF": "share_code", "XDUAL": "dual_class", "XGAP": "gap", "XCONST": "constant"}
    rows = []
    for ticker, kind in decoys.items():
        prices = _simulate_prices(rng, grid_ns, day_idx, cfg.n_days, 0.02, cfg.gjr, 50.0, cfg.tick_seconds, cfg.overnight_df, cfg.jump_prob, cfg.jump_scale)
        series[ticker] = (grid, prices)
        t_in, _ = _snapshot_times(rng, days, calendar, False)
        if kind == "gap":
            day_of = (t_in // 86_400_000_000_000) * 86_400_000_000_000
            gap_days = np.array([np.datetime64(d, "ns").astype(np.int64) for d in days[10:18]])
            t_in = t_in[~np.isin(day_of, gap_days)]
        if kind == "constant":
            h = np.full(len(t_in), 1000, dtype=np.int64)
        else:
            h = (1000 + np.cumsum(rng.integers(-3, 4, size=len(t_in)))).clip(0)
        rows.append(pd.DataFrame({"ticker": ticker, "timestamp": _utc_strings(t_in, cfg.delay_minutes), "users_holding": h}))
        info = pd.concat(
            [
                info,
                pd.DataFrame(
                    {
                        "ticker": [ticker],
                        "share_code": [12 if kind == "share_code" else 11],
                        "sector": ["Energy"],
                        "dual_class": [kind == "dual_class"],
                    }
                ),
            ],
            ignore_index=True,
        )
        caps = pd.concat(
            [caps, pd.DataFrame({"ticker": ticker, "date": pd.to_datetime(days), "market_cap": 1e9})],
            ignore_index=True,
        )
    return pd.concat([snapshots, *rows], ignore_index=True), info, caps


def write_files(data: SynthData, directory) -> dict[str, Path]:
    """Write the dataset in the ingest input formats plus the truth manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "snapshots": directory / "snapshots.csv",
        "ticks": directory / "ticks.csv",
        "metadata": directory / "metadata.csv",
        "splits": directory / "splits.csv",
        "market_caps": directory / "market_caps.csv",
        "truth": directory / "truth.json",
    }
    data.snapshots.to_csv(paths["snapshots"], index=False)
    data.tick_frame().to_csv(paths["ticks"], index=False, float_format="%.10g")
    data.meta.info.to_csv(paths["metadata"], index=False)
    splits = data.meta.splits.assign(date=pd.to_datetime(data.meta.splits["date"]).dt.strftime("%Y-%m-%d"))
    splits.to_csv(paths["splits"], index=False)
    caps = data.meta.market_caps.assign(date=data.meta.market_caps["date"].dt.strftime("%Y-%m-%d"))
    caps.to_csv(paths["market_caps"], index=False, float_format="%.10g")
    with open(paths["truth"], "w") as fh:
        json.dump(data.truth, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return paths


# --------------------------------------------------------------------------
# Oracles: direct, slow reference implementations
# --------------------------------------------------------------------------


def oracle_ols(y, X) -> np.ndarray:
    """Normal equations with an explicit inverse."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xtx = X.T @ X
    if np.linalg.matrix_rank(xtx) < X.shape[1]:
        raise np.linalg.LinAlgError("singular X'X")
    return np.linalg.inv(xtx) @ (X.T @ y)


def oracle_cluster_cov(X, residuals, cluster_ids, small_sample: bool = True) -> np.ndarray:
    """Sandwich covariance by explicit summation over clusters."""
    X = np.asarray(X, dtype=np.float64)
    u = np.asarray(residuals, dtype=np.float64)
    ids = np.asarray(cluster_ids)
    n, k = X.shape
    bread = np.linalg.inv(X.T @ X)
    meat = np.zeros((k, k))
    clusters = sorted(set(ids.tolist()))
    for c in clusters:
        s = np.zeros(k)
        for i in np.flatnonzero(ids == c):
            s += X[i] * u[i]
        meat += np.outer(s, s)
    v = bread @ meat @ bread
    if small_sample:
        g = len(clusters)
        v *= g / (g - 1) * (n - 1) / (n - k)
    return v


def oracle_quantile(values, pct: float) -> float:
    """Linear interpolation between order statistics at rank ``(n-1) p``."""
    x = sorted(float(v) for v in values)
    if not x:
        raise ValueError("empty sample")
    h = (len(x) - 1) * pct / 100.0
    lo = math.floor(h)
    hi = min(lo + 1, len(x) - 1)
    return x[lo] + (h - lo) * (x[hi] - x[lo])


def oracle_gjr_recursion(omega, alpha, gamma, beta, eps, init_variance) -> list[float]:
    """Variance recursion written as a plain loop; returns n+1 values."""
    h = [float(init_variance)]
    for e in eps:
        h.append(omega + (alpha + (gamma if e < 0 else 0.0)) * e * e + beta * h[-1])
    return h


def oracle_garch_fit(returns, init_variance: float | None = None) -> tuple[np.ndarray, float]:
    """Plain GARCH(1,1) Gaussian MLE by a loop likelihood and SLSQP.

    Returns ``((omega, alpha, beta), loglik)`` on the demeaned series. The
    recursion starts at the sample variance, as in production.
    """
    eps = np.asarray(returns, dtype=np.float64)
    eps = eps - eps.mean()
    var0 = float(np.mean(eps * eps)) if init_variance is None else init_variance
    n = len(eps)

    def negll(theta):
        omega, alpha, beta = theta
        h = var0
        total = 0.0
        for e in eps:
            if h <= 0:
                return 1e10
            total += math.log(h) + e * e / h
            h = omega + alpha * e * e + beta * h
        return 0.5 * (total + n * math.log(2 * math.pi)) / n

    cons = [{"type": "ineq", "fun": lambda th: 0.999 - th[1] - th[2]}]
    res = scipy.optimize.minimize(
        negll,
        x0=np.array([0.05 * var0, 0.05, 0.9]),
        method="SLSQP",
        bounds=[(1e-8 * var0, 10 * var0), (0.0, 1.0), (0.0, 1.0)],
        constraints=cons,
        options={"ftol": 1e-13, "maxiter": 1000},
    )
    return res.x, -res.fun * n
