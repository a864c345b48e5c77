"""NYSE trading calendar backed by a bundled holiday/half-day table."""

from __future__ import annotations

import datetime as dt
from functools import lru_cache
from importlib import resources

import numpy as np
import pandas as pd

SESSION_OPEN = dt.time(9, 30)
SESSION_CLOSE = dt.time(16, 0)
FULL_SESSION_MINUTES = 390


class TradingCalendar:
    """Weekdays minus exchange holidays, with early closes on half days."""

    def __init__(self, holidays, half_days: dict[dt.date, dt.time]):
        self.holidays = frozenset(holidays)
        self.half_days = dict(half_days)

    @classmethod
    def from_csv(cls, path) -> "TradingCalendar":
        table = pd.read_csv(path, dtype=str).fillna("")
        holidays, half_days = [], {}
        for row in table.itertuples(index=False):
            day = dt.date.fromisoformat(row.date)
            if row.kind == "holiday":
                holidays.append(day)
            elif row.kind == "half_day":
                half_days[day] = dt.time.fromisoformat(row.close or "13:00")
            else:
                raise ValueError(f"unknown calendar entry kind {row.kind!r} on {row.date}")
        return cls(holidays, half_days)

    def is_session(self, day: dt.date) -> bool:
        return day.weekday() < 5 and day not in self.holidays

    def session_close(self, day: dt.date) -> dt.time:
        return self.half_days.get(day, SESSION_CLOSE)

    def session_minutes(self, day: dt.date) -> int:
        close = self.session_close(day)
        return (close.hour * 60 + close.minute) - (SESSION_OPEN.hour * 60 + SESSION_OPEN.minute)

    def sessions(self, start: dt.date, end: dt.date) -> list[dt.date]:
        """Trading days in ``[start, end]``."""
        out = []
        day = start
        one = dt.timedelta(days=1)
        while day <= end:
            if self.is_session(day):
                out.append(day)
            day += one
        return out

    def next_sessions(self, start: dt.date, count: int) -> list[dt.date]:
        out = []
        day = start
        one = dt.timedelta(days=1)
        while len(out) < count:
            if self.is_session(day):
                out.append(day)
            day += one
        return out

    def session_index(self, days) -> np.ndarray:
        """Ordinal trading-day number for each date (consecutive sessions differ by 1)."""
        days = pd.to_datetime(pd.Series(days)).dt.date
        if len(days) == 0:
            return np.zeros(0, dtype=np.int64)
        lo, hi = min(days), max(days)
        table = {d: i for i, d in enumerate(self.sessions(lo, hi))}
        try:
            return np.fromiter((table[d] for d in days), dtype=np.int64, count=len(days))
        except KeyError as exc:
            raise ValueError(f"{exc.args[0]} is not a trading day") from None


@lru_cache(maxsize=1)
def default_calendar() -> TradingCalendar:
    with resources.as_file(resources.files("hfretail") / "data" / "nyse_calendar.csv") as path:
        return TradingCalendar.from_csv(path)
