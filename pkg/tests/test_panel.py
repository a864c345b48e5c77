import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfretail.config import Config
from hfretail.panel import (
    UnmatchableError,
    build_daily_panel,
    build_panel,
    detrend_holders,
    detrend_residuals,
    load_frame,
    match_last_trade,
    match_prices,
    position_openings,
    raw_return,
    save_frame,
    scaling_factor,
    summary_stats,
    winsorize,
)
from hfretail.synth import oracle_quantile


def ts(text):
    return np.datetime64(pd.Timestamp(text), "ns")


# ---------------------------------------------------------------- scaling factor


def test_scaling_factor_one_hour():
    # [TRIVIAL] 60/60 * 6.5 * 2
    assert scaling_factor("intraday", 60) == 13.0


def test_scaling_factor_overnight():
    # [PAPER] overnight factor is 2
    assert scaling_factor("overnight") == 2.0


def test_scaling_factor_65_minutes():
    # [TRIVIAL] 60/65 * 13
    assert scaling_factor("intraday", 65) == pytest.approx(12.0, rel=1e-15)


@pytest.mark.parametrize("mnt", [0, -5, None])
def test_scaling_factor_rejects_non_positive(mnt):
    with pytest.raises(ValueError):
        scaling_factor("intraday", mnt)


# ---------------------------------------------------------------- row arithmetic


def test_position_openings_examples():
    assert position_openings(100, 100, "intraday", 60) == 0.0
    assert position_openings(0, 0, "overnight") == 0.0
    # [DERIVED] log(102/101) * 13 by hand
    assert position_openings(100, 101, "intraday", 60) == pytest.approx(0.128080, abs=5e-7)
    assert position_openings(100, 101, "intraday", 60) == pytest.approx(math.log(102 / 101) * 13, rel=1e-15)


def test_position_openings_rejects_negative_counts():
    with pytest.raises(ValueError):
        position_openings(-1, 3, "overnight")


def test_raw_return_examples():
    assert raw_return(100, 100, "intraday", 60) == 0.0
    # [DERIVED] log(1.02) * 2 and log(1.01) * 13
    # exact values are 0.0396053 and 0.1293543; the quoted decimals are off in the sixth place
    assert raw_return(50, 51, "overnight") == pytest.approx(math.log(1.02) * 2, rel=1e-15)
    assert raw_return(50, 51, "overnight") == pytest.approx(0.039604, abs=2e-6)
    assert raw_return(100, 101, "intraday", 60) == pytest.approx(math.log(1.01) * 13, rel=1e-15)
    assert raw_return(100, 101, "intraday", 60) == pytest.approx(0.129353, abs=2e-6)


def test_raw_return_rejects_non_positive_price():
    with pytest.raises(ValueError):
        raw_return(0.0, 1.0, "overnight")


@given(
    p0=st.floats(1.0, 1e4),
    p1=st.floats(1.0, 1e4),
    c=st.floats(1e-3, 1e3),
    mnt=st.floats(1.0, 200.0),
)
def test_price_scale_invariance_and_round_trip(p0, p1, c, mnt):
    r = raw_return(p0, p1, "intraday", mnt)
    assert raw_return(p0 * c, p1 * c, "intraday", mnt) == pytest.approx(r, rel=1e-9, abs=1e-12)
    # [TRIVIAL] undoing the scaling gives the unscaled interval log return
    assert r * mnt / (60 * 13) == pytest.approx(math.log(p1 / p0), rel=1e-9, abs=1e-15)


# ---------------------------------------------------------------- matching


def test_match_last_trade_strictly_before():
    times = [ts("2020-01-02 09:31"), ts("2020-01-02 09:59")]
    prices = [10.0, 11.0]
    assert match_last_trade(times, prices, ts("2020-01-02 10:00")) == 11.0
    # [DERIVED] a tick exactly at t is excluded, so its predecessor is used
    assert match_last_trade(times, prices, ts("2020-01-02 09:59")) == 10.0


def test_match_last_trade_unmatchable():
    with pytest.raises(UnmatchableError):
        match_last_trade([ts("2020-01-02 09:31")], [10.0], ts("2020-01-02 09:30"))


def test_match_prices_same_session_rule():
    times = [ts("2020-01-02 15:59"), ts("2020-01-03 09:45")]
    prices = [10.0, 12.0]
    q = [ts("2020-01-03 09:40"), ts("2020-01-03 10:00")]
    out = match_prices(times, prices, q)
    assert np.isnan(out[0])  # yesterday's close is not today's price
    assert out[1] == 12.0
    assert match_prices(times, prices, q, same_session=False)[0] == 10.0


# ---------------------------------------------------------------- winsorize


def test_winsorize_constant_series_unchanged():
    x = np.full(50, 3.5)
    assert np.array_equal(winsorize(x), x)


def test_winsorize_against_sort_and_clamp_oracle():
    # [DERIVED] bounds from the brute-force interpolation oracle
    x = np.arange(1.0, 1001.0)
    rng = np.random.default_rng(0)
    rng.shuffle(x)
    lo = oracle_quantile(x, 0.5)
    hi = oracle_quantile(x, 99.5)
    out = winsorize(x)
    assert out.min() == pytest.approx(lo, rel=1e-12)
    assert out.max() == pytest.approx(hi, rel=1e-12)
    assert np.array_equal(out, np.clip(x, lo, hi))
    assert len(out) == len(x)


def test_winsorize_twice_close_to_once():
    # a second pass recomputes percentiles of the clamped data, which can only
    # move the bounds inward by less than the gap to the next order statistic
    x = np.random.default_rng(1).standard_normal(10_000)
    once = winsorize(x)
    twice = winsorize(once)
    assert np.max(np.abs(twice - once)) < 1e-2
    x = np.arange(1.0, 11.0)
    assert np.array_equal(winsorize(winsorize(x)), winsorize(x)) or np.allclose(
        winsorize(winsorize(x)), winsorize(x), atol=0.05
    )


def test_winsorize_empty_raises():
    with pytest.raises(ValueError):
        winsorize([])


# ---------------------------------------------------------------- detrending


def test_detrend_exact_line_gives_zero():
    t = np.arange(20.0)
    y = 0.3 + 0.02 * t
    assert np.allclose(detrend_holders(t, y, np.zeros(19, bool), np.full(19, 60.0)), 0.0, atol=1e-12)


def test_detrend_residuals_sum_and_slope_zero():
    rng = np.random.default_rng(2)
    t = np.sort(rng.uniform(0, 50, 200))
    y = 4.0 + 0.01 * t + rng.standard_normal(200) * 0.1
    resid = detrend_residuals(t, y)
    assert abs(resid.sum()) < 1e-9 * np.abs(y).sum()
    slope = np.polyfit(t, resid, 1)[0]
    assert abs(slope) < 1e-10


def test_detrend_recovers_injected_deviations():
    # [DERIVED] deviations orthogonal to [1, t] survive detrending exactly
    t = np.arange(30.0)
    dev = np.random.default_rng(3).standard_normal(30)
    X = np.column_stack([np.ones_like(t), t])
    dev = dev - X @ np.linalg.lstsq(X, dev, rcond=None)[0]
    y = 2.0 - 0.05 * t + dev
    assert np.allclose(detrend_residuals(t, y), dev, atol=1e-8)


def test_detrend_degenerate_time_axis():
    with pytest.raises(ValueError):
        detrend_residuals([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


# ---------------------------------------------------------------- panel assembly


def _fixture_clean(n_stocks=2, n_days=3, seed=0):
    """Seven hourly snapshots a day (10:00..16:00) per stock."""
    rng = np.random.default_rng(seed)
    days = pd.bdate_range("2020-01-06", periods=n_days)
    rows = []
    for s in range(n_stocks):
        for d in days:
            for h in range(10, 17):
                rows.append(
                    {
                        "ticker": f"T{s}",
                        "observed_at": d + pd.Timedelta(hours=h) - pd.Timedelta(seconds=int(rng.integers(1, 59))),
                        "holders": int(rng.integers(100, 200)),
                        "price": float(rng.uniform(10, 11)),
                    }
                )
    clean = pd.DataFrame(rows)
    clean["day"] = clean["observed_at"].dt.normalize()
    return clean


def _fixture_market(days):
    times = []
    for d in days:
        times.extend(pd.date_range(d + pd.Timedelta(hours=9, minutes=30), d + pd.Timedelta(hours=16), freq="1min"))
    times = pd.DatetimeIndex(times).to_numpy(dtype="datetime64[ns]")
    prices = 300 * np.exp(np.cumsum(np.random.default_rng(9).standard_normal(len(times)) * 1e-4))
    return times, prices


def test_build_panel_row_count_fixture():
    # [DERIVED] 2 stocks x (6 intraday x 3 days + 2 overnight)
    clean = _fixture_clean()
    mt, mp = _fixture_market(clean["day"].unique())
    panel, drops = build_panel(clean, mt, mp, Config())
    assert len(panel) == 2 * (6 * 3 + 2)
    assert int((~panel["is_overnight"]).sum()) == 2 * 18
    assert int(panel["is_overnight"].sum()) == 4
    assert drops["market_unmatchable"] == 0
    per_day = panel.groupby(["ticker", "day"])["is_overnight"].agg(["sum", "size"])
    assert ((per_day["sum"] <= 1) & (per_day["size"] - per_day["sum"] == 6)).all()


def test_build_panel_values_match_row_formulas():
    clean = _fixture_clean(1, 2)
    mt, mp = _fixture_market(clean["day"].unique())
    panel, _ = build_panel(clean, mt, mp, Config(winsor_lower_pct=0.0, winsor_upper_pct=100.0))
    for row in panel.itertuples():
        kind = "overnight" if row.is_overnight else "intraday"
        mnt = None if row.is_overnight else row.mnt
        assert row.delta_n == pytest.approx(position_openings(row.n_prev, row.n_curr, kind, mnt), rel=1e-12)
        assert row.raw_return == pytest.approx(raw_return(row.p_prev, row.p_curr, kind, mnt), rel=1e-12)
        assert 0 < (row.mnt if not row.is_overnight else 1) <= 200


def test_build_panel_drops_long_intraday_gaps():
    clean = _fixture_clean(1, 2)
    day0 = clean["day"].iloc[0]
    drop = (clean["day"] == day0) & clean["observed_at"].dt.hour.isin([11, 12, 13, 14])
    clean = clean.loc[~drop]  # a 10:00 -> 15:00 gap of about 300 minutes
    mt, mp = _fixture_market(clean["day"].unique())
    panel, drops = build_panel(clean, mt, mp, Config())
    assert drops["intraday_interval_out_of_range"] == 1
    assert panel.loc[~panel["is_overnight"], "mnt"].max() <= 200


def test_daily_panel_plus_one_guard():
    # [DERIVED] closes 200 -> 202 give log(203/201)
    clean = _fixture_clean(1, 2)
    last = clean.groupby("day")["observed_at"].transform("max") == clean["observed_at"]
    clean.loc[last, "holders"] = [200, 202]
    mt, mp = _fixture_market(clean["day"].unique())
    daily, _ = build_daily_panel(clean, mt, mp, Config(winsor_lower_pct=0, winsor_upper_pct=100))
    assert len(daily) == 1
    assert daily["delta_n"].iloc[0] == pytest.approx(math.log(203 / 201), rel=1e-12)
    assert daily["delta_n"].iloc[0] == pytest.approx(0.009901, abs=5e-7)


def test_daily_panel_constant_closes():
    clean = _fixture_clean(1, 4)
    clean["holders"] = 150
    clean["price"] = 20.0
    mt, mp = _fixture_market(clean["day"].unique())
    daily, _ = build_daily_panel(clean, mt, mp, Config())
    assert (daily["delta_n"] == 0).all() and (daily["raw_return"] == 0).all()


# ---------------------------------------------------------------- summary stats


def test_summary_stats_constant():
    panel = pd.DataFrame({"ticker": "A", "day": pd.Timestamp("2020-01-02"), "x": np.full(10, 2.5)})
    row = summary_stats(panel, "x").iloc[0]
    assert row["std"] == 0.0
    assert all(row[c] == 2.5 for c in ("p5", "p25", "p50", "p75", "p95", "mean"))


def test_summary_stats_normal_quantile():
    # [DERIVED] Monte Carlo 5th percentile of N(0, 1) is -1.645
    x = np.random.default_rng(4).standard_normal(1_000_000)
    panel = pd.DataFrame({"ticker": "A", "day": pd.Timestamp("2020-01-02"), "x": x})
    row = summary_stats(panel, "x").iloc[0]
    assert row["p5"] == pytest.approx(-1.645, abs=0.01)


def test_summary_stats_split_by_kind():
    clean = _fixture_clean()
    mt, mp = _fixture_market(clean["day"].unique())
    panel, _ = build_panel(clean, mt, mp, Config())
    table = summary_stats(panel, "delta_n", scale=1e4)
    assert list(table["kind"]) == ["Intraday", "Overnight", "All"]
    assert table["nobs"].tolist() == [36, 4, 40]


# ---------------------------------------------------------------- persistence


@pytest.mark.parametrize("fmt,suffix", [("parquet", ".parquet"), ("csv", ".csv")])
def test_save_load_round_trip(tmp_path, fmt, suffix):
    clean = _fixture_clean()
    mt, mp = _fixture_market(clean["day"].unique())
    panel, _ = build_panel(clean, mt, mp, Config())
    path = tmp_path / f"panel{suffix}"
    save_frame(panel, path, fmt)
    back = load_frame(path)
    assert np.allclose(back["delta_n"], panel["delta_n"], rtol=1e-15)
    assert (back["t_curr"].to_numpy() == panel["t_curr"].to_numpy()).all()


@settings(max_examples=50)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200))
def test_winsorize_preserves_order_and_bounds(values):
    out = winsorize(values)
    x = np.asarray(values)
    order = np.argsort(x, kind="stable")
    assert np.all(np.diff(out[order]) >= 0)
    assert out.min() >= x.min() and out.max() <= x.max()
