"""Behavior proxies as linear combinations of group coefficients, with Wald tests.

* Ext: half the extreme responses minus half the moderate ones,
  ``(b_G1 + b_G6)/2 - (b_G3 + b_G4)/2``.
* Asy: big losers minus big gainers, ``b_G1 - b_G6``.
* SpeedExtNeg: the big-loser response at lag 1 minus that at lag 5, taken
  from two separate regressions whose cross-covariance is set to zero.
"""

from __future__ import annotations

import dataclasses
import json
from collections.abc import Mapping, Sequence

import numpy as np
import pandas as pd
import scipy.linalg
from scipy import stats

from .regression import BPS, FitResult, RegressionSpec

PROXIES = ("Ext", "Asy", "SpeedExtNeg")
EXT_WEIGHTS = {"G1": 0.5, "G6": 0.5, "G3": -0.5, "G4": -0.5}
ASY_WEIGHTS = {"G1": 1.0, "G6": -1.0}

# a term references one coefficient of one fit: (fit_id, label) -> weight
Terms = Mapping[tuple[str, str], float]


@dataclasses.dataclass(frozen=True)
class ProxyValue:
    proxy: str
    level: str
    lag: int | None
    value: float  # natural units
    std_error: float
    wald_stat: float
    p_value: float
    terms: tuple[tuple[str, str, float], ...] = ()

    @property
    def value_bps(self) -> float:
        return self.value * BPS

    @property
    def se_bps(self) -> float:
        return self.std_error * BPS

    @property
    def stars(self) -> str:
        return stars(self.p_value)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["terms"] = [list(t) for t in self.terms]
        d["stars"] = self.stars
        return d


def stars(p: float) -> str:
    """``***`` below 1%, ``**`` below 5%, ``*`` below 10%."""
    if not np.isfinite(p):
        return ""
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.10:
        return "*"
    return ""


def fit_id(fit: FitResult) -> str:
    s = fit.spec
    return f"{s.frequency}/{s.dependent}/{s.subgroup}/L{s.lag}"


def _level_label(fit: FitResult, level: str | None, group: str) -> str:
    if level is None or level == "all":
        if group in fit.labels:
            return group
        raise KeyError(f"fit has subgroup levels; pass a level to address {group}")
    return f"{level}:{group}"


def wald_linear(fits: Mapping[str, FitResult], terms: Terms) -> tuple[float, float, float, float]:
    """Single-restriction Wald test of ``sum w * beta = 0``.

    Coefficients from different fits are treated as uncorrelated, so the
    covariance is block diagonal across fits.

    Returns ``(value, std_error, stat, p_value)``.
    """
    if not terms:
        raise ValueError("no terms given")
    value = 0.0
    variance = 0.0
    by_fit: dict[str, dict[int, float]] = {}
    for (fid, label), w in terms.items():
        if fid not in fits:
            raise KeyError(f"unknown fit {fid!r}")
        i = fits[fid].index(label)
        by_fit.setdefault(fid, {})
        by_fit[fid][i] = by_fit[fid].get(i, 0.0) + float(w)
    for fid, weights in by_fit.items():
        fit = fits[fid]
        idx = np.array(sorted(weights))
        w = np.array([weights[i] for i in idx])
        value += float(w @ fit.beta[idx])
        variance += float(w @ fit.vcov[np.ix_(idx, idx)] @ w)
    if not variance > 0:
        raise ValueError(f"non-positive variance of the linear combination ({variance})")
    stat = value * value / variance
    p = float(stats.chi2.sf(stat, df=1))
    return value, float(np.sqrt(variance)), stat, p


def _proxy(name, level, lag, fits, terms) -> ProxyValue:
    value, se, stat, p = wald_linear(fits, terms)
    flat = tuple((fid, label, float(w)) for (fid, label), w in terms.items())
    return ProxyValue(name, level or "all", lag, value, se, stat, p, flat)


def _one_fit_terms(fit, level, weights):
    fid = fit_id(fit)
    return {(fid, _level_label(fit, level, g)): w for g, w in weights.items()}


def ext_proxy(fit: FitResult, level: str | None = None) -> ProxyValue:
    terms = _one_fit_terms(fit, level, EXT_WEIGHTS)
    return _proxy("Ext", level, fit.spec.lag, {fit_id(fit): fit}, terms)


def asy_proxy(fit: FitResult, level: str | None = None) -> ProxyValue:
    terms = _one_fit_terms(fit, level, ASY_WEIGHTS)
    return _proxy("Asy", level, fit.spec.lag, {fit_id(fit): fit}, terms)


def _check_same_suite(a: FitResult, b: FitResult):
    sa, sb = a.spec, b.spec
    if (sa.subgroup, sa.frequency, sa.dependent) != (sb.subgroup, sb.frequency, sb.dependent):
        raise ValueError("fits come from different specification suites")
    if a.n_obs != b.n_obs:
        raise ValueError("fits do not share a sample")


def speed_ext_neg(fit_l1: FitResult, fit_l5: FitResult, level: str | None = None) -> ProxyValue:
    _check_same_suite(fit_l1, fit_l5)
    if fit_l1.spec.lag != 1 or fit_l5.spec.lag != 5:
        raise ValueError("SpeedExtNeg needs the lag-1 and lag-5 fits")
    fits = {fit_id(fit_l1): fit_l1, fit_id(fit_l5): fit_l5}
    g1_1 = _level_label(fit_l1, level, "G1")
    g1_5 = _level_label(fit_l5, level, "G1")
    terms = {(fit_id(fit_l1), g1_1): 1.0, (fit_id(fit_l5), g1_5): -1.0}
    return _proxy("SpeedExtNeg", level, None, fits, terms)


def suite_proxies(fits: Sequence[FitResult], levels: Sequence[str] | None = None) -> list[ProxyValue]:
    """Ext and Asy at every lag and SpeedExtNeg, for each subgroup level."""
    by_lag = {f.spec.lag: f for f in fits}
    levels = list(levels) if levels is not None else [None]
    out = []
    for level in levels:
        for lag in sorted(by_lag):
            out.append(ext_proxy(by_lag[lag], level))
        for lag in sorted(by_lag):
            out.append(asy_proxy(by_lag[lag], level))
        if 1 in by_lag and 5 in by_lag:
            out.append(speed_ext_neg(by_lag[1], by_lag[5], level))
    return out


def _combine(proxies: Sequence[ProxyValue], weights: Sequence[float]) -> dict[tuple[str, str], float]:
    terms: dict[tuple[str, str], float] = {}
    for proxy, c in zip(proxies, weights):
        for fid, label, w in proxy.terms:
            terms[(fid, label)] = terms.get((fid, label), 0.0) + c * w
    return terms


def compare_levels(
    proxies: Sequence[ProxyValue],
    fits: Mapping[str, FitResult],
    *,
    mode: str = "pairwise",
) -> pd.DataFrame:
    """Contrasts of one proxy (same name and lag) across subgroup levels.

    ``pairwise`` gives every ``a minus b`` in level order; ``vs_mean`` gives
    each level minus the unweighted mean of all other levels.
    """
    if len(proxies) < 2:
        raise ValueError("need at least two levels to compare")
    names = {(p.proxy, p.lag) for p in proxies}
    if len(names) != 1:
        raise ValueError("proxies must share name and lag")
    rows = []
    if mode == "pairwise":
        contrasts = [
            (f"{a.level} minus {b.level}", [a, b], [1.0, -1.0])
            for i, a in enumerate(proxies)
            for b in proxies[i + 1 :]
        ]
    elif mode == "vs_mean":
        m = len(proxies) - 1
        contrasts = [
            (f"{a.level} minus mean of others", list(proxies), [1.0 if q is a else -1.0 / m for q in proxies])
            for a in proxies
        ]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    proxy_name, lag = next(iter(names))
    for label, group, weights in contrasts:
        terms = _combine(group, weights)
        terms = {k: w for k, w in terms.items() if w != 0.0}
        try:
            value, se, stat, p = wald_linear(fits, terms)
        except ValueError:
            value, se, stat, p = float(np.dot(weights, [q.value for q in group])), 0.0, float("nan"), float("nan")
        rows.append(
            {
                "proxy": proxy_name,
                "lag": lag,
                "contrast": label,
                "value_bps": value * BPS,
                "se_bps": se * BPS,
                "wald_stat": stat,
                "p_value": p,
                "stars": stars(p),
            }
        )
    return pd.DataFrame(rows)


def proxies_from_coefficients(
    coefficients: Mapping[int, Mapping[str, float]],
    std_errors: Mapping[int, Mapping[str, float]] | None = None,
) -> dict[str, float]:
    """Proxy point values from published-style coefficient tables.

    ``coefficients[lag][group]`` holds the group coefficients (any unit);
    the result is in the same unit. Standard errors default to one, which
    does not affect the point values.
    """
    fits = {}
    for lag, coefs in coefficients.items():
        labels = list(coefs)
        beta = np.array([coefs[g] for g in labels], dtype=np.float64)
        se = np.array([(std_errors or {}).get(lag, {}).get(g, 1.0) for g in labels])
        fits[lag] = FitResult(
            spec=RegressionSpec(lag=lag),
            labels=labels,
            beta=beta,
            vcov=np.diag(se**2),
            adj_r2=float("nan"),
            n_obs=0,
            n_clusters=0,
            rss=float("nan"),
            tss=float("nan"),
        )
    out = {}
    for lag, fit in fits.items():
        if all(g in fit.labels for g in EXT_WEIGHTS):
            out[f"Ext_L{lag}"] = ext_proxy(fit).value
        if all(g in fit.labels for g in ASY_WEIGHTS):
            out[f"Asy_L{lag}"] = asy_proxy(fit).value
    if 1 in fits and 5 in fits:
        out["SpeedExtNeg"] = speed_ext_neg(fits[1], fits[5]).value
    return out


# --------------------------------------------------------------------------
# Output
# --------------------------------------------------------------------------


def proxy_table(proxies: Sequence[ProxyValue]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "proxy": [p.proxy for p in proxies],
            "level": [p.level for p in proxies],
            "lag": [("" if p.lag is None else p.lag) for p in proxies],
            "value_bps": [p.value_bps for p in proxies],
            "se_bps": [p.se_bps for p in proxies],
            "wald_stat": [p.wald_stat for p in proxies],
            "p_value": [p.p_value for p in proxies],
            "stars": [p.stars for p in proxies],
        }
    )


def write_proxies(proxies: Sequence[ProxyValue], table_path, json_path) -> None:
    proxy_table(proxies).to_csv(table_path, index=False, float_format="%.10g")
    with open(json_path, "w") as fh:
        json.dump([p.to_dict() for p in proxies], fh, indent=1, sort_keys=True)
        fh.write("\n")


def block_diagonal_vcov(fits: Sequence[FitResult]) -> np.ndarray:
    """Joint covariance of stacked coefficient vectors with zero cross-fit blocks."""
    return scipy.linalg.block_diag(*(f.vcov for f in fits))
