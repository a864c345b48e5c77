"""Run configuration stored as a plain ``key = value`` text file."""

from __future__ import annotations

import configparser
import dataclasses
import datetime as dt
from pathlib import Path

ALLOWED_DELAYS = (30, 45, 60)

# TAQ single-letter exchange codes kept for price data
DEFAULT_VENUES = {"N": "NYSE", "T": "NASDAQ", "Q": "NASDAQ", "A": "AMEX", "P": "NYSE"}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclasses.dataclass(frozen=True)
class Config:
    delay_minutes: int = 45
    sample_start: dt.date = dt.date(2018, 6, 1)
    sample_end: dt.date | None = None
    near_hour_epsilon_minutes: float = 2.0
    min_points_per_day: int = 6
    max_gap_trading_days: int = 7
    min_returns: int = 240
    mnt_max_minutes: float = 200.0
    winsor_lower_pct: float = 0.5
    winsor_upper_pct: float = 99.5
    market_ticker: str = "SPY"
    venues: tuple[str, ...] = tuple(sorted(DEFAULT_VENUES))
    exclusion_list: str | None = None
    alias_table: str | None = None
    covid_boundary: dt.date = dt.date(2020, 3, 11)
    small_cap_max: float = 2e9
    large_cap_min: float = 1e10
    small_sample_correction: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.delay_minutes not in ALLOWED_DELAYS:
            raise ConfigError(
                f"delay_minutes must be one of {ALLOWED_DELAYS}, got {self.delay_minutes}"
            )
        if self.near_hour_epsilon_minutes < 0:
            raise ConfigError("near_hour_epsilon_minutes must be non-negative")
        if not 0 <= self.winsor_lower_pct < self.winsor_upper_pct <= 100:
            raise ConfigError("winsorization percentiles must satisfy 0 <= lower < upper <= 100")
        if self.small_cap_max > self.large_cap_min:
            raise ConfigError("small_cap_max must not exceed large_cap_min")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if value is None:
                continue
            if isinstance(value, tuple):
                value = ",".join(value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{field.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base_dir: Path | None = None) -> "Config":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        parser.optionxform = str
        parser.read_string("[run]\n" + text)
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in parser["run"].items():
            if key not in known:
                raise ConfigError(f"unknown configuration key {key!r}")
            kwargs[key] = _coerce(key, raw.strip(), known[key].type, base_dir)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "Config":
        path = Path(path)
        return cls.from_text(path.read_text(), base_dir=path.parent)


def _coerce(key, raw, type_name, base_dir):
    type_name = str(type_name)
    try:
        if type_name.startswith("int"):
            return int(raw)
        if type_name.startswith("float"):
            return float(raw)
        if type_name == "bool":
            lowered = raw.lower()
            if lowered not in {"true", "false", "1", "0", "yes", "no"}:
                raise ValueError(raw)
            return lowered in {"true", "1", "yes"}
        if "dt.date" in type_name:
            return dt.date.fromisoformat(raw) if raw else None
        if type_name.startswith("tuple"):
            return tuple(part.strip() for part in raw.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r}") from None
    if key in {"exclusion_list", "alias_table"} and raw and base_dir is not None:
        path = Path(raw)
        return str(path if path.is_absolute() else (base_dir / path))
    return raw or None
