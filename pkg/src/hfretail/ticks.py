"""Per-ticker, time-sorted trade arrays."""

from __future__ import annotations

from collections.abc import Iterator, Mapping

import numpy as np
import pandas as pd


class TickStore(Mapping):
    """Maps ticker -> ``(times, prices)``.

    ``times`` are ``datetime64[ns]`` New York wall-clock instants sorted
    non-decreasing; ``prices`` are split-adjusted floats.
    """

    def __init__(self, series: dict[str, tuple[np.ndarray, np.ndarray]] | None = None):
        self._series = {}
        for ticker, (times, prices) in (series or {}).items():
            times = np.asarray(times, dtype="datetime64[ns]")
            prices = np.asarray(prices, dtype=np.float64)
            if times.shape != prices.shape:
                raise ValueError(f"{ticker}: times and prices differ in length")
            if len(times) > 1 and (np.diff(times.view(np.int64)) < 0).any():
                order = np.argsort(times, kind="stable")
                times, prices = times[order], prices[order]
            self._series[ticker] = (times, prices)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "TickStore":
        """Build from a frame with ``ticker``, ``traded_at`` and ``price`` columns."""
        if frame.empty:
            return cls()
        ordered = frame.sort_values(["ticker", "traded_at"], kind="stable")
        tickers = ordered["ticker"].to_numpy()
        times = ordered["traded_at"].to_numpy(dtype="datetime64[ns]")
        prices = ordered["price"].to_numpy(dtype=np.float64)
        bounds = np.flatnonzero(tickers[1:] != tickers[:-1]) + 1
        starts = np.r_[0, bounds]
        stops = np.r_[bounds, len(tickers)]
        store = cls()
        for lo, hi in zip(starts, stops):
            store._series[str(tickers[lo])] = (times[lo:hi], prices[lo:hi])
        return store

    def __getitem__(self, ticker: str) -> tuple[np.ndarray, np.ndarray]:
        return self._series[ticker]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._series))

    def __len__(self) -> int:
        return len(self._series)

    @property
    def n_ticks(self) -> int:
        return sum(len(t) for t, _ in self._series.values())

    def subset(self, tickers) -> "TickStore":
        store = TickStore()
        store._series = {t: self._series[t] for t in tickers if t in self._series}
        return store

    def to_frame(self) -> pd.DataFrame:
        parts = []
        for ticker in self:
            times, prices = self._series[ticker]
            parts.append(pd.DataFrame({"ticker": ticker, "traded_at": times, "price": prices}))
        if not parts:
            return pd.DataFrame({"ticker": [], "traded_at": pd.to_datetime([]), "price": []})
        return pd.concat(parts, ignore_index=True)
