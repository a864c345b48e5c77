"""Pooled OLS of position openings on lagged return-group indicators.

Each specification regresses the dependent variable on six group indicators
(optionally interacted with a C-level subgroup partition) for the return at
lag L, plus own-stock r and r² at the other five lags and market r and r² at
lags 0..5. There is no intercept because the indicators span the constant.
Standard errors are clustered by stock.
"""

from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
import scipy.linalg

from .config import Config
from .grouping import GROUP_LABELS, GroupCutoffs, assign_groups

N_LAGS = 6
LAGS = tuple(range(N_LAGS))
BPS = 1e4
SUBGROUPS = ("none", "kind", "covid", "size", "sector")
DEPENDENTS = ("delta_n", "delta_n_detrended")
FREQUENCIES = ("hf", "daily")
KIND_LEVELS = ("OV", "ID")
COVID_LEVELS = ("pre", "post")
SIZE_LEVELS = ("small", "mid", "large")
DEFAULT_CHUNK_ROWS = 250_000


class RankDeficiencyError(np.linalg.LinAlgError):
    def __init__(self, columns):
        super().__init__(f"design matrix is rank deficient; dependent columns: {', '.join(columns)}")
        self.columns = list(columns)


@dataclasses.dataclass(frozen=True)
class RegressionSpec:
    lag: int
    subgroup: str = "none"
    frequency: str = "hf"
    dependent: str = "delta_n"

    def __post_init__(self):
        if self.lag not in LAGS:
            raise ValueError(f"lag must be in 0..5, got {self.lag}")
        if self.subgroup not in SUBGROUPS:
            raise ValueError(f"unknown subgroup {self.subgroup!r}")
        if self.frequency not in FREQUENCIES:
            raise ValueError(f"unknown frequency {self.frequency!r}")
        if self.dependent not in DEPENDENTS:
            raise ValueError(f"unknown dependent {self.dependent!r}")
        if self.frequency == "daily" and self.subgroup == "kind":
            raise ValueError("the overnight/intraday split does not exist at daily frequency")


@dataclasses.dataclass
class FitResult:
    spec: RegressionSpec
    labels: list[str]
    beta: np.ndarray
    vcov: np.ndarray
    adj_r2: float
    n_obs: int
    n_clusters: int
    rss: float
    tss: float
    residuals: np.ndarray | None = dataclasses.field(default=None, repr=False)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def t_stats(self) -> np.ndarray:
        se = self.std_errors
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(se > 0, self.beta / se, np.nan)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"no coefficient labelled {label!r}") from None

    def coef(self, label: str) -> float:
        return float(self.beta[self.index(label)])

    def to_table(self) -> pd.DataFrame:
        """Coefficient table in basis points."""
        return pd.DataFrame(
            {
                "label": self.labels,
                "beta_bps": self.beta * BPS,
                "se_bps": self.std_errors * BPS,
                "t_stat": self.t_stats,
            }
        )

    def to_dict(self) -> dict:
        return {
            "spec": dataclasses.asdict(self.spec),
            "labels": list(self.labels),
            "beta": [float(b) for b in self.beta],
            "vcov": [[float(v) for v in row] for row in self.vcov],
            "adj_r2": float(self.adj_r2),
            "n_obs": int(self.n_obs),
            "n_clusters": int(self.n_clusters),
            "rss": float(self.rss),
            "tss": float(self.tss),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FitResult":
        return cls(
            spec=RegressionSpec(**data["spec"]),
            labels=list(data["labels"]),
            beta=np.array(data["beta"], dtype=np.float64),
            vcov=np.array(data["vcov"], dtype=np.float64),
            adj_r2=data["adj_r2"],
            n_obs=data["n_obs"],
            n_clusters=data["n_clusters"],
            rss=data["rss"],
            tss=data["tss"],
        )


# --------------------------------------------------------------------------
# Core estimators on in-memory arrays
# --------------------------------------------------------------------------


def _rank_check(r_diag, labels, rtol=1e-10):
    scale = np.max(np.abs(r_diag)) if len(r_diag) else 0.0
    bad = np.flatnonzero(np.abs(r_diag) <= rtol * max(scale, 1e-300))
    if len(bad):
        names = [labels[i] if labels is not None else f"x{i}" for i in bad]
        raise RankDeficiencyError(names)


def pooled_ols(y, X, labels=None) -> tuple[np.ndarray, np.ndarray]:
    """Least squares via QR; returns ``(beta, residuals)``.

    Raises
    ------
    RankDeficiencyError
        Naming the columns that are linear combinations of earlier ones.
    """
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be 2-D with one row per element of y")
    if X.shape[0] < X.shape[1]:
        raise RankDeficiencyError([f"more columns ({X.shape[1]}) than rows ({X.shape[0]})"])
    q, r = np.linalg.qr(X, mode="reduced")
    _rank_check(np.diag(r), labels)
    beta = scipy.linalg.solve_triangular(r, q.T @ y)
    return beta, y - X @ beta


def _cluster_bounds(cluster_ids):
    ids = np.asarray(cluster_ids)
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    starts = np.r_[0, np.flatnonzero(sorted_ids[1:] != sorted_ids[:-1]) + 1]
    return order, starts


def _small_sample_factor(n_clusters, n_obs, k):
    return n_clusters / (n_clusters - 1) * (n_obs - 1) / (n_obs - k)


def cluster_robust_cov(X, residuals, cluster_ids, *, small_sample: bool = True) -> np.ndarray:
    """Stock-clustered sandwich ``B M B`` with ``B = (X'X)^-1``.

    ``M = sum_c (X_c' u_c)(X_c' u_c)'``; with ``small_sample`` the result is
    multiplied by ``G/(G-1) * (N-1)/(N-K)``.
    """
    X = np.asarray(X, dtype=np.float64)
    u = np.asarray(residuals, dtype=np.float64)
    n, k = X.shape
    order, starts = _cluster_bounds(cluster_ids)
    n_clusters = len(starts)
    if n_clusters < 2:
        raise ValueError("cluster-robust covariance needs at least two clusters")
    scores = np.add.reduceat(X[order] * u[order, None], starts, axis=0)
    meat = scores.T @ scores
    r = np.linalg.qr(X, mode="r")
    r_inv = scipy.linalg.solve_triangular(r, np.eye(k))
    bread = r_inv @ r_inv.T
    vcov = bread @ meat @ bread
    if small_sample:
        vcov *= _small_sample_factor(n_clusters, n, k)
    return (vcov + vcov.T) / 2


def adj_r2(y, residuals, k_params: int) -> float:
    """``1 - (RSS/(n-k)) / (TSS/(n-1))`` with TSS about the mean."""
    y = np.asarray(y, dtype=np.float64)
    u = np.asarray(residuals, dtype=np.float64)
    n = len(y)
    if n <= k_params:
        raise ValueError(f"adjusted R² needs n > k (n={n}, k={k_params})")
    rss = float(u @ u)
    centered = y - math.fsum(y) / n
    tss = float(centered @ centered)
    if tss == 0:
        return 1.0 if rss == 0 else float("nan")
    return 1.0 - (rss / (n - k_params)) / (tss / (n - 1))


# --------------------------------------------------------------------------
# Subgroup levels
# --------------------------------------------------------------------------


def subgroup_levels(panel: pd.DataFrame, subgroup: str, config: Config | None = None):
    """Level code per row (-1 when unlabeled) and the ordered level names."""
    config = config or Config()
    n = len(panel)
    if subgroup == "none":
        return np.zeros(n, dtype=np.int16), ("all",)
    if subgroup == "kind":
        if "is_overnight" not in panel:
            raise ValueError("the kind split needs an is_overnight column")
        return np.where(panel["is_overnight"].to_numpy(bool), 0, 1).astype(np.int16), KIND_LEVELS
    if subgroup == "covid":
        post = panel["day"].to_numpy() >= np.datetime64(config.covid_boundary, "ns")
        return post.astype(np.int16), COVID_LEVELS
    if subgroup == "size":
        cap = panel["market_cap"].to_numpy(dtype=np.float64)
        codes = np.where(cap < config.small_cap_max, 0, np.where(cap > config.large_cap_min, 2, 1))
        codes = np.where(np.isfinite(cap), codes, -1)
        return codes.astype(np.int16), SIZE_LEVELS
    if subgroup == "sector":
        from .ingest import GICS_SECTORS

        lookup = {name: i for i, name in enumerate(GICS_SECTORS)}
        codes = panel["sector"].map(lambda s: lookup.get(s, -1)).to_numpy(dtype=np.int16)
        return codes, GICS_SECTORS
    raise ValueError(f"unknown subgroup {subgroup!r}")


# --------------------------------------------------------------------------
# Lag structure shared by the six specifications
# --------------------------------------------------------------------------


@dataclasses.dataclass
class LagData:
    """Per-row lagged inputs for one dependent variable and subgroup split.

    Arrays of shape ``(n, 6)`` hold values at lags 0..5. Rows are sorted by
    stock then time, so each cluster is a contiguous block.
    """

    y: np.ndarray
    groups: np.ndarray
    levels: np.ndarray
    r: np.ndarray
    m: np.ndarray
    clusters: np.ndarray
    level_names: tuple[str, ...]
    frequency: str
    dependent: str
    n_dropped_unlabeled: int = 0
    n_dropped_lags: int = 0

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def cluster_starts(self) -> np.ndarray:
        c = self.clusters
        return np.r_[0, np.flatnonzero(c[1:] != c[:-1]) + 1] if len(c) else np.zeros(0, dtype=np.int64)


def build_lag_data(
    panel: pd.DataFrame,
    cutoffs: GroupCutoffs,
    *,
    subgroup: str = "none",
    dependent: str = "delta_n",
    frequency: str = "hf",
    config: Config | None = None,
) -> LagData:
    """Align lags 0..5 positionally within each stock.

    ``panel`` needs ``ticker``, ``k``, the dependent column, ``std_return``
    and ``mkt_std_return`` (plus subgroup attribute columns). A row enters
    only if all six lags exist and carry subgroup labels, so every lag
    specification uses the same sample.
    """
    frame = panel.sort_values(["ticker", "k"], kind="stable")
    tickers = frame["ticker"].to_numpy()
    codes = pd.factorize(tickers, sort=True)[0]
    std = frame["std_return"].to_numpy(dtype=np.float64)
    mkt = frame["mkt_std_return"].to_numpy(dtype=np.float64)
    y_all = frame[dependent].to_numpy(dtype=np.float64)
    if not (np.isfinite(std).all() and np.isfinite(mkt).all() and np.isfinite(y_all).all()):
        raise ValueError("panel contains non-finite standardized returns or dependent values")
    groups_all = assign_groups(std, cutoffs)
    level_all, names = subgroup_levels(frame, subgroup, config)

    n = len(frame)
    pos = np.arange(n)
    first = np.r_[True, codes[1:] != codes[:-1]]
    start = np.maximum.accumulate(np.where(first, pos, 0))
    has_lags = pos - start >= N_LAGS - 1
    idx = pos[has_lags][:, None] - np.arange(N_LAGS)[None, :]
    levels = level_all[idx]
    labeled = (levels >= 0).all(axis=1)
    rows = idx[labeled]
    return LagData(
        y=y_all[rows[:, 0]],
        groups=groups_all[rows],
        levels=levels[labeled],
        r=std[rows],
        m=mkt[rows],
        clusters=codes[rows[:, 0]],
        level_names=tuple(names),
        frequency=frequency,
        dependent=dependent,
        n_dropped_unlabeled=int((~labeled).sum()),
        n_dropped_lags=int((~has_lags).sum()),
    )


def design_labels(lag: int, level_names) -> list[str]:
    if len(level_names) == 1:
        labels = list(GROUP_LABELS)
    else:
        labels = [f"{level}:{g}" for level in level_names for g in GROUP_LABELS]
    for j in LAGS:
        if j != lag:
            labels += [f"r_lag{j}", f"r2_lag{j}"]
    for j in LAGS:
        labels += [f"mkt_r_lag{j}", f"mkt_r2_lag{j}"]
    return labels


def design_rows(data: LagData, lag: int, lo: int = 0, hi: int | None = None) -> np.ndarray:
    """Dense design block for rows ``lo:hi`` of the specification at ``lag``."""
    hi = data.n_obs if hi is None else hi
    m = hi - lo
    n_levels = len(data.level_names)
    n_ind = 6 * n_levels
    X = np.zeros((m, n_ind + 2 * (N_LAGS - 1) + 2 * N_LAGS))
    col = data.levels[lo:hi, lag].astype(np.int64) * 6 + data.groups[lo:hi, lag]
    X[np.arange(m), col] = 1.0
    c = n_ind
    for j in LAGS:
        if j != lag:
            r = data.r[lo:hi, j]
            X[:, c] = r
            X[:, c + 1] = r * r
            c += 2
    for j in LAGS:
        mj = data.m[lo:hi, j]
        X[:, c] = mj
        X[:, c + 1] = mj * mj
        c += 2
    return X


def build_design(data: LagData, lag: int):
    """Full ``(y, X, cluster_ids, labels)`` for one specification."""
    return data.y, design_rows(data, lag), data.clusters, design_labels(lag, data.level_names)


def _chunk_bounds(data: LagData, chunk_rows: int):
    """Row chunks no longer than ``chunk_rows`` (unless one stock is longer) split at stock boundaries."""
    starts = data.cluster_starts
    bounds = [0]
    for s in starts[1:]:
        if s - bounds[-1] >= chunk_rows:
            bounds.append(int(s))
    bounds.append(data.n_obs)
    return list(zip(bounds[:-1], bounds[1:]))


def fit_spec(
    data: LagData,
    spec: RegressionSpec,
    *,
    small_sample: bool = True,
    chunk_rows: int = DEFAULT_CHUNK_ROWS,
    keep_residuals: bool = False,
) -> FitResult:
    """Pooled OLS with clustered covariance, streaming over row chunks.

    The solve is a tall-skinny QR: each chunk of ``[X | y]`` is stacked under
    the running triangular factor and re-factorized. A second pass forms the
    residuals and per-cluster scores.
    """
    labels = design_labels(spec.lag, data.level_names)
    k = len(labels)
    n = data.n_obs
    if n <= k:
        raise ValueError(f"too few observations ({n}) for {k} parameters")
    chunks = _chunk_bounds(data, chunk_rows)
    r_aug = np.zeros((0, k + 1))
    for lo, hi in chunks:
        block = np.column_stack([design_rows(data, spec.lag, lo, hi), data.y[lo:hi]])
        r_aug = np.linalg.qr(np.vstack([r_aug, block]), mode="r")
        r_aug = r_aug[: k + 1]
    r_xx = r_aug[:k, :k]
    _rank_check(np.diag(r_xx), labels)
    beta = scipy.linalg.solve_triangular(r_xx, r_aug[:k, k])
    r_inv = scipy.linalg.solve_triangular(r_xx, np.eye(k))
    bread = r_inv @ r_inv.T

    starts = data.cluster_starts
    n_clusters = len(starts)
    if n_clusters < 2:
        raise ValueError("cluster-robust covariance needs at least two clusters")
    scores = []
    rss_parts = []
    resid = np.empty(n) if keep_residuals else None
    for lo, hi in chunks:
        X = design_rows(data, spec.lag, lo, hi)
        u = data.y[lo:hi] - X @ beta
        rss_parts.append(float(u @ u))
        if keep_residuals:
            resid[lo:hi] = u
        local = starts[(starts >= lo) & (starts < hi)] - lo
        scores.append(np.add.reduceat(X * u[:, None], local, axis=0))
    scores = np.vstack(scores)
    meat = scores.T @ scores
    vcov = bread @ meat @ bread
    if small_sample:
        vcov *= _small_sample_factor(n_clusters, n, k)
    vcov = (vcov + vcov.T) / 2

    rss = math.fsum(rss_parts)
    mean_y = math.fsum(data.y) / n
    centered = data.y - mean_y
    tss = float(centered @ centered)
    adj = 1.0 - (rss / (n - k)) / (tss / (n - 1)) if tss > 0 else float("nan")
    return FitResult(
        spec=spec,
        labels=labels,
        beta=beta,
        vcov=vcov,
        adj_r2=adj,
        n_obs=n,
        n_clusters=n_clusters,
        rss=rss,
        tss=tss,
        residuals=resid,
    )


def run_spec_suite(
    data: LagData,
    *,
    subgroup: str = "none",
    small_sample: bool = True,
    workers: int = 1,
    chunk_rows: int = DEFAULT_CHUNK_ROWS,
) -> list[FitResult]:
    """Fit the six lag specifications on one shared sample."""
    specs = [
        RegressionSpec(lag=L, subgroup=subgroup, frequency=data.frequency, dependent=data.dependent)
        for L in LAGS
    ]

    def one(spec):
        return fit_spec(data, spec, small_sample=small_sample, chunk_rows=chunk_rows)

    if workers <= 1:
        return [one(s) for s in specs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, specs))


def run_daily(
    daily_panel: pd.DataFrame,
    cutoffs: GroupCutoffs,
    *,
    subgroup: str = "none",
    dependent: str = "delta_n",
    config: Config | None = None,
    workers: int = 1,
) -> list[FitResult]:
    """The six daily-lag specifications on close-to-close rows."""
    config = config or Config()
    data = build_lag_data(
        daily_panel, cutoffs, subgroup=subgroup, dependent=dependent, frequency="daily", config=config
    )
    return run_spec_suite(
        data, subgroup=subgroup, small_sample=config.small_sample_correction, workers=workers
    )


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def suite_table(fits: list[FitResult]) -> pd.DataFrame:
    """Wide table: one row per coefficient, beta/se/t columns per lag."""
    parts = []
    for fit in fits:
        t = fit.to_table().set_index("label")
        t.columns = [f"{c}_L{fit.spec.lag}" for c in t.columns]
        parts.append(t)
    wide = pd.concat(parts, axis=1, sort=False)
    footer = pd.DataFrame(
        {f"beta_bps_L{f.spec.lag}": [f.adj_r2, float(f.n_obs)] for f in fits}, index=["adj_r2", "n_obs"]
    )
    return pd.concat([wide, footer]).reset_index(names="label")


def write_suite(fits: list[FitResult], table_path, json_path) -> None:
    suite_table(fits).to_csv(table_path, index=False, float_format="%.10g")
    with open(json_path, "w") as fh:
        json.dump([f.to_dict() for f in fits], fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_suite(json_path) -> list[FitResult]:
    with open(json_path) as fh:
        return [FitResult.from_dict(d) for d in json.load(fh)]
