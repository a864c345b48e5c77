import datetime as dt

import numpy as np
import pandas as pd
import pytest

from hfretail.config import Config, ConfigError
from hfretail.ingest import (
    STEP_NAMES,
    EmptyPanelError,
    FilterLedger,
    SecurityMeta,
    adjust_splits,
    adjust_timestamps,
    apply_filters,
    clean_to_snapshots,
    dedupe_hourly,
    normalize_snapshots,
    normalize_ticks,
    read_exclusions,
)
from hfretail.pipeline import adjust_store_splits, run_ingest
from hfretail.synth import DgpConfig, generate


def snaps(times, ticker="AAA", holders=None):
    times = pd.to_datetime(times)
    holders = holders if holders is not None else range(len(times))
    return pd.DataFrame({"ticker": ticker, "observed_at": times, "holders": list(holders)})


@pytest.fixture(scope="module")
def synth():
    cfg = DgpConfig(n_stocks=4, n_days=30, decoys=True, seed=3)
    data = generate(cfg)
    ticks = adjust_store_splits(data.ticks, data.meta.splits)
    return cfg, data, ticks


@pytest.fixture(scope="module")
def ingested(synth):
    cfg, data, ticks = synth
    return run_ingest(data.snapshots, ticks, data.meta, cfg.pipeline_config())


# ---------------------------------------------------------------- timestamps


def test_delay_and_new_york_conversion():
    # [TRIVIAL] June is UTC-4
    raw = pd.DataFrame({"ticker": ["A"], "timestamp": ["2019-06-03T14:45:00Z"], "users_holding": [10]})
    frame, rejected = normalize_snapshots(raw)
    out = adjust_timestamps(frame, 45)
    assert rejected == 0
    assert out["observed_at"].iloc[0] == pd.Timestamp("2019-06-03 10:00:00")


def test_delay_across_dst_change():
    # January is UTC-5
    frame, _ = normalize_snapshots(
        pd.DataFrame({"ticker": ["A"], "timestamp": ["2020-01-06T15:45:00Z"], "users_holding": [1]})
    )
    assert adjust_timestamps(frame, 45)["observed_at"].iloc[0] == pd.Timestamp("2020-01-06 10:00:00")


def test_delay_zero_rejected():
    frame, _ = normalize_snapshots(pd.DataFrame({"ticker": ["A"], "timestamp": ["2019-06-03T14:45:00Z"], "users_holding": [1]}))
    with pytest.raises(ConfigError):
        adjust_timestamps(frame, 0)


def test_delay_equivariance():
    # [TRIVIAL] shifting is linear and keeps order
    times = pd.date_range("2019-06-03 14:00", periods=50, freq="37min", tz="UTC")
    frame = pd.DataFrame({"ticker": "A", "observed_at": times, "holders": np.arange(50)})
    a = adjust_timestamps(frame, 30)
    b = adjust_timestamps(frame, 60)
    assert ((a["observed_at"] - b["observed_at"]) == pd.Timedelta(minutes=30)).all()
    assert a["holders"].tolist() == b["holders"].tolist()
    assert a["observed_at"].is_monotonic_increasing


def test_bad_records_rejected_and_counted():
    raw = pd.DataFrame(
        {
            "ticker": ["A", "A", "", "A", "A"],
            "timestamp": ["2019-06-03T14:45:00Z", "not a time", "2019-06-03T14:45:00Z", "2019-06-03T15:45:00Z", "2019-06-03T16:45:00Z"],
            "users_holding": [1, 2, 3, -4, 2.5],
        }
    )
    frame, rejected = normalize_snapshots(raw)
    assert len(frame) == 1 and rejected == 4


def test_ticks_venue_and_price_filter():
    raw = pd.DataFrame(
        {
            "ticker": ["A", "A", "A"],
            "timestamp": ["2019-06-03T10:00:00", "2019-06-03T10:01:00", "2019-06-03T10:02:00"],
            "price": [10.0, -1.0, 11.0],
            "exchange": ["N", "N", "X"],
        }
    )
    out = normalize_ticks(raw, venues={"N", "T"})
    assert out["price"].tolist() == [10.0]


# ---------------------------------------------------------------- dedupe


def test_dedupe_keeps_last_in_hour():
    # [PAPER] 9:43 and 9:44 in the same hour: keep 9:44
    out = dedupe_hourly(snaps(["2019-06-03 09:43", "2019-06-03 09:44"], holders=[1500, 1500]))
    assert out["observed_at"].tolist() == [pd.Timestamp("2019-06-03 09:44")]


def test_dedupe_near_hour_pair():
    # [PAPER] 11:59 then 12:01: the later one goes
    out = dedupe_hourly(snaps(["2019-06-03 11:59", "2019-06-03 12:01", "2019-06-03 13:00"]))
    assert out["observed_at"].tolist() == [pd.Timestamp("2019-06-03 11:59"), pd.Timestamp("2019-06-03 13:00")]


def test_dedupe_single_observation_unchanged():
    # [TRIVIAL]
    frame = snaps(["2019-06-03 10:15"])
    assert dedupe_hourly(frame).equals(frame)


def test_dedupe_outside_epsilon_kept():
    out = dedupe_hourly(snaps(["2019-06-03 11:57", "2019-06-03 12:01"]))
    assert len(out) == 2
    assert len(dedupe_hourly(snaps(["2019-06-03 11:59", "2019-06-03 12:01"]), epsilon_minutes=0)) == 2


def test_dedupe_per_ticker():
    frame = pd.concat([snaps(["2019-06-03 11:59"], "A"), snaps(["2019-06-03 12:01"], "B")])
    assert len(dedupe_hourly(frame)) == 2


def test_dedupe_at_most_one_per_hour():
    rng = np.random.default_rng(0)
    t = pd.Timestamp("2019-06-03 09:30") + pd.to_timedelta(np.sort(rng.integers(0, 400 * 60, 300)), unit="s")
    out = dedupe_hourly(snaps(t))
    assert not out["observed_at"].dt.floor("h").duplicated().any()


# ---------------------------------------------------------------- splits


def test_adjust_splits():
    ticks = pd.DataFrame(
        {
            "ticker": ["A", "A", "B"],
            "traded_at": pd.to_datetime(["2019-06-03 10:00", "2019-06-05 10:00", "2019-06-03 10:00"]),
            "price": [100.0, 50.0, 7.0],
        }
    )
    splits = pd.DataFrame({"ticker": ["A"], "date": pd.to_datetime(["2019-06-04"]), "ratio": [2.0]})
    assert adjust_splits(ticks, splits)["price"].tolist() == [50.0, 50.0, 7.0]


def test_meta_validation():
    info = pd.DataFrame({"ticker": ["A"], "share_code": [11], "sector": ["Nowhere"], "dual_class": [False]})
    with pytest.raises(ValueError):
        SecurityMeta(info, pd.DataFrame(), pd.DataFrame())
    info["sector"] = "Energy"
    bad = pd.DataFrame({"ticker": ["A"], "date": [pd.Timestamp("2019-06-03")], "ratio": [0.0]})
    with pytest.raises(ValueError):
        SecurityMeta(info, bad, pd.DataFrame())


# ---------------------------------------------------------------- filters


def test_ledger_shape_and_monotone(ingested):
    clean, ledger = ingested
    frame = ledger.to_frame()
    assert frame["step"].tolist() == list(range(1, 13))
    assert frame["filtering_step"].tolist() == list(STEP_NAMES)
    assert ledger.is_monotone()


def test_decoys_leave_at_expected_steps(ingested):
    # share code 12 at step 5, dual class at step 6, 8-session gap at step 9,
    # constant holders at step 12
    clean, ledger = ingested
    stocks = ledger.to_frame().set_index("step")["n_stocks"]
    assert stocks[4] - stocks[5] == 1
    assert stocks[5] - stocks[6] == 1
    assert stocks[8] - stocks[9] == 1
    assert stocks[11] - stocks[12] == 1
    assert sorted(clean["ticker"].unique()) == ["S0000", "S0001", "S0002", "S0003"]


def test_prebuilt_input_has_no_attrition_after_decoys():
    # [DERIVED] without decoys the generator satisfies every filter
    cfg = DgpConfig(n_stocks=3, n_days=25, seed=5)
    data = generate(cfg)
    ticks = adjust_store_splits(data.ticks, data.meta.splits)
    _, ledger = run_ingest(data.snapshots, ticks, data.meta, cfg.pipeline_config())
    counts = ledger.to_frame().set_index("step")
    assert counts.loc[5:12, "n_obs"].nunique() == 1
    assert counts.loc[5:12, "n_stocks"].nunique() == 1


def test_idempotent(synth, ingested):
    cfg, data, ticks = synth
    clean, _ = ingested
    again, ledger = apply_filters(clean_to_snapshots(clean), ticks, data.meta, cfg.pipeline_config())
    pd.testing.assert_frame_equal(again, clean)
    counts = ledger.to_frame()
    assert counts["n_obs"].nunique() == 1 and counts["n_stocks"].nunique() == 1


def test_clean_day_structure(ingested):
    clean, _ = ingested
    per_day = clean.groupby(["ticker", "day"]).size()
    # six or seven points on full days, four on the 2019-07-03 half day
    half = per_day.index.get_level_values("day") == pd.Timestamp("2019-07-03")
    assert per_day[~half].between(6, 7).all()
    assert (per_day[half] >= 4).all()
    tod = clean["observed_at"] - clean["day"]
    assert (tod >= pd.Timedelta(hours=9, minutes=30)).all() and (tod <= pd.Timedelta(hours=16)).all()


def test_worker_count_invariant(synth, ingested):
    cfg, data, ticks = synth
    clean, ledger = ingested
    other, ledger2 = run_ingest(data.snapshots, ticks, data.meta, cfg.pipeline_config(workers=3))
    pd.testing.assert_frame_equal(other, clean)
    assert ledger.steps == ledger2.steps


def test_exclusion_list(synth, ingested, tmp_path):
    cfg, data, ticks = synth
    clean, _ = ingested
    path = tmp_path / "ex.csv"
    path.write_text("ticker,action,start,end\nS0001,exclude,,\n")
    out, _ = run_ingest(data.snapshots, ticks, data.meta, cfg.pipeline_config(), exclusions=read_exclusions(path))
    assert "S0001" not in set(out["ticker"])
    assert set(out["ticker"]) == set(clean["ticker"]) - {"S0001"}
    path.write_text("ticker,action,start,end\nS0001,delete,,\n")
    with pytest.raises(ConfigError):
        read_exclusions(path)


def test_aliases(synth, ingested):
    cfg, data, ticks = synth
    clean, _ = ingested
    renamed = data.snapshots.replace({"ticker": {"S0002": "OLDNAME"}})
    without, _ = run_ingest(renamed, ticks, data.meta, cfg.pipeline_config())
    assert "S0002" not in set(without["ticker"])
    with_alias, _ = run_ingest(renamed, ticks, data.meta, cfg.pipeline_config(), aliases={"OLDNAME": "S0002"})
    pd.testing.assert_frame_equal(with_alias, clean)


def test_empty_panel_names_step(synth):
    cfg, data, ticks = synth
    late = cfg.pipeline_config(sample_start=dt.date(2030, 1, 1))
    with pytest.raises(EmptyPanelError) as info:
        run_ingest(data.snapshots, ticks, data.meta, late)
    assert info.value.step == 2
    assert STEP_NAMES[1] in str(info.value)


def test_ledger_monotone_check():
    ledger = FilterLedger([("a", 10, 2), ("b", 9, 2), ("c", 9, 3)])
    assert not ledger.is_monotone()


def test_config_round_trip(tmp_path):
    cfg = Config(delay_minutes=30, sample_end=dt.date(2020, 8, 13), workers=2)
    path = tmp_path / "run.cfg"
    path.write_text(cfg.to_text())
    assert Config.from_file(path) == cfg
    with pytest.raises(ConfigError):
        Config.from_text("bogus = 1\n")
    with pytest.raises(ConfigError):
        Config(delay_minutes=0)
