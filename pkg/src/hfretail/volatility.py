"""Volatility estimators used to standardize returns.

Intraday returns are scaled by a subsampled five-minute realized volatility,
overnight and close-to-close returns by a GJR-GARCH(1,1) fitted by Gaussian
maximum likelihood. Both are expressed on a full-day scale.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import functools
import logging
import math

import numpy as np
from scipy import optimize, signal

from .calendar import SESSION_OPEN, TradingCalendar, default_calendar

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
MINUTE_NS = 60_000_000_000
LOG_2PI = math.log(2.0 * math.pi)


class InestimableError(ValueError):
    """Not enough data on a stock-day to form a volatility estimate."""


class InsufficientDataError(ValueError):
    """Return series shorter than the minimum required for a GARCH fit."""


class ConvergenceError(RuntimeError):
    """Neither the GJR-GARCH fit nor its plain-GARCH fallback converged."""


# --------------------------------------------------------------------------
# Realized volatility
# --------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class RvEstimate:
    stock_id: str | None
    day: dt.date | None
    sigma_rv: float
    n_grid_returns: int
    offset_rv: tuple[float, ...] = ()


def _offset_realized_variances(times_ns, prices, open_ns, close_ns, spacing_ns, n_offsets):
    log_p = np.log(prices)
    rvs, counts = [], []
    for offset in range(n_offsets):
        grid = np.arange(open_ns + offset * MINUTE_NS, close_ns + 1, spacing_ns, dtype=np.int64)
        idx = np.searchsorted(times_ns, grid, side="right") - 1
        idx = idx[idx >= 0]
        if len(idx) < 2:
            rvs.append(np.nan)
            counts.append(0)
            continue
        returns = np.diff(log_p[idx])
        rvs.append(float(np.dot(returns, returns)))
        counts.append(len(returns))
    return np.array(rvs), np.array(counts)


def realized_vol_subsampled(
    times,
    prices,
    *,
    day: dt.date | None = None,
    stock_id: str | None = None,
    session_open: dt.datetime | None = None,
    session_close: dt.datetime | None = None,
    spacing_minutes: int = 5,
    n_offsets: int = 5,
    calendar: TradingCalendar | None = None,
) -> RvEstimate:
    """Subsampled realized volatility for one stock-day, full-day scaled.

    Five grids with ``spacing_minutes`` calendar spacing are laid over the
    session, shifted by 0..``n_offsets``-1 minutes. The price at each grid
    point is the last trade at or before it. Realized variances are averaged
    across usable grids and the square root is multiplied by sqrt(2).

    Raises
    ------
    InestimableError
        If no grid has at least two usable points.
    """
    times = np.asarray(times, dtype="datetime64[ns]")
    prices = np.asarray(prices, dtype=np.float64)
    if len(times) == 0:
        raise InestimableError("no ticks")
    if (prices <= 0).any():
        raise ValueError("prices must be strictly positive")
    if day is None:
        day = times[0].astype("datetime64[D]").astype(dt.date)
    calendar = calendar or default_calendar()
    if session_open is None:
        session_open = dt.datetime.combine(day, SESSION_OPEN)
    if session_close is None:
        session_close = dt.datetime.combine(day, calendar.session_close(day))
    open_ns = np.datetime64(session_open, "ns").astype(np.int64)
    close_ns = np.datetime64(session_close, "ns").astype(np.int64)
    t_ns = times.astype(np.int64)
    keep = (t_ns >= open_ns) & (t_ns <= close_ns)
    t_ns, prices = t_ns[keep], prices[keep]
    rvs, counts = _offset_realized_variances(
        t_ns, prices, open_ns, close_ns, spacing_minutes * MINUTE_NS, n_offsets
    )
    usable = counts > 0
    if not usable.any():
        raise InestimableError(f"fewer than two usable grid points on every offset ({day})")
    avg = float(np.mean(rvs[usable]))
    return RvEstimate(
        stock_id=stock_id,
        day=day,
        sigma_rv=math.sqrt(avg) * SQRT2,
        n_grid_returns=int(counts[usable].sum()),
        offset_rv=tuple(float(v) for v in rvs),
    )


@functools.lru_cache(maxsize=8)
def _rv_grid(days: tuple, calendar: TradingCalendar, spacing: int = 5, n_offsets: int = 5):
    """Grid layout shared by every stock observed on the same days."""
    open_min = SESSION_OPEN.hour * 60 + SESSION_OPEN.minute
    day_ns = np.array([np.datetime64(d, "ns").astype(np.int64) for d in days], dtype=np.int64)
    close_min = np.array(
        [calendar.session_close(d).hour * 60 + calendar.session_close(d).minute for d in days]
    )
    # grid points per (day, offset): open + offset + 5*j minutes, up to the close
    per_offset = (close_min - open_min - np.arange(n_offsets)[:, None]) // spacing + 1
    counts = per_offset.T.ravel()  # day-major, then offset
    group = np.repeat(np.arange(len(days) * n_offsets), counts)
    starts = np.r_[0, np.cumsum(counts)[:-1]]
    j = np.arange(len(group)) - np.repeat(starts, counts)
    g_day = group // n_offsets
    g_off = group % n_offsets
    open_ns = day_ns + open_min * MINUTE_NS
    grid = open_ns[g_day] + (g_off + spacing * j) * MINUTE_NS
    for arr in (group, g_day, grid, open_ns):
        arr.flags.writeable = False
    return group, g_day, grid, open_ns


def realized_vol_days(times, prices, days, calendar: TradingCalendar | None = None) -> np.ndarray:
    """Full-day-scaled RV for each date in ``days`` (NaN where inestimable).

    Vectorized over days and offsets; equivalent to calling
    :func:`realized_vol_subsampled` once per day.
    """
    calendar = calendar or default_calendar()
    t_ns = np.asarray(times, dtype="datetime64[ns]").view(np.int64)
    log_p = np.log(np.asarray(prices, dtype=np.float64))
    n_days = len(days)
    out = np.full(n_days, np.nan)
    if n_days == 0 or len(t_ns) == 0:
        return out
    n_offsets = 5
    group, g_day, grid, open_ns = _rv_grid(tuple(days), calendar, 5, n_offsets)
    idx = np.searchsorted(t_ns, grid, side="right") - 1
    usable = idx >= 0
    usable[usable] = t_ns[idx[usable]] >= open_ns[g_day[usable]]
    grp, lp = group[usable], log_p[idx[usable]]
    same = grp[1:] == grp[:-1]
    sq = np.diff(lp)[same] ** 2
    n_groups = n_days * n_offsets
    rv = np.bincount(grp[1:][same], weights=sq, minlength=n_groups).reshape(n_days, n_offsets)
    n_ret = np.bincount(grp[1:][same], minlength=n_groups).reshape(n_days, n_offsets)
    ok = n_ret > 0
    n_ok = ok.sum(axis=1)
    avg = np.where(ok, rv, 0.0).sum(axis=1) / np.maximum(n_ok, 1)
    out[n_ok > 0] = np.sqrt(avg[n_ok > 0]) * SQRT2
    return out


# --------------------------------------------------------------------------
# GJR-GARCH(1,1)
# --------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class GjrParams:
    omega: float
    alpha: float
    gamma: float
    beta: float
    model_kind: str  # "gjr", "garch_fallback" or "garch"
    mean: float
    loglik: float
    converged: bool
    n_obs: int
    init_variance: float
    std_errors: dict | None = None

    @property
    def persistence(self) -> float:
        return self.alpha + self.beta + 0.5 * self.gamma

    @property
    def unconditional_variance(self) -> float:
        return self.omega / (1.0 - self.persistence)


def gjr_variance_path(omega, alpha, gamma, beta, eps, init_variance) -> np.ndarray:
    """Conditional variances h_1..h_{n+1} for residuals ``eps``.

    h_1 = ``init_variance`` and
    h_t = omega + (alpha + gamma * 1[eps_{t-1} < 0]) * eps_{t-1}^2 + beta * h_{t-1}.
    The last element is the one-step-ahead forecast.
    """
    eps = np.asarray(eps, dtype=np.float64)
    e2 = eps * eps
    drive = omega + alpha * e2 + gamma * np.where(eps < 0, e2, 0.0)
    tail = signal.lfilter([1.0], [1.0, -beta], drive, zi=[beta * init_variance])[0]
    return np.concatenate(([init_variance], tail))


def _loglik_and_grad(theta, eps, e2, neg_e2, init_variance):
    """Gaussian log-likelihood and gradient in (omega, alpha, gamma, beta)."""
    omega, alpha, gamma, beta = theta
    n = len(eps)
    drive = omega + alpha * e2[:-1] + gamma * neg_e2[:-1]
    h = np.empty(n)
    h[0] = init_variance
    if n > 1:
        h[1:] = signal.lfilter([1.0], [1.0, -beta], drive, zi=[beta * init_variance])[0]
    if not np.all(h > 0) or not np.all(np.isfinite(h)):
        return -np.inf, np.zeros(4)
    ll = -0.5 * float(np.sum(LOG_2PI + np.log(h) + e2 / h))
    dl_dh = -0.5 * (1.0 / h - e2 / (h * h))
    grad = np.zeros(4)
    if n > 1:
        sources = np.vstack([np.ones(n - 1), e2[:-1], neg_e2[:-1], h[:-1]])
        dh = signal.lfilter([1.0], [1.0, -beta], sources, axis=1)
        grad = dh @ dl_dh[1:]
    return ll, grad


class _Transform:
    """Unconstrained coordinates <-> (omega, alpha, gamma, beta).

    omega = exp(u0); (alpha, gamma/2, beta, slack) = softmax(u1, u2, u3, 0),
    so alpha, gamma, beta >= 0 and alpha + beta + gamma/2 < 1. With
    ``with_gamma=False`` the gamma logit is dropped and gamma == 0.
    """

    def __init__(self, with_gamma: bool):
        self.with_gamma = with_gamma

    def to_natural(self, u):
        omega = math.exp(u[0])
        logits = np.append(u[1:], 0.0)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        if self.with_gamma:
            alpha, half_gamma, beta = w[0], w[1], w[2]
        else:
            alpha, half_gamma, beta = w[0], 0.0, w[1]
        return np.array([omega, alpha, 2.0 * half_gamma, beta]), w

    def jacobian(self, u):
        """d(natural)/du, shape (4, len(u))."""
        theta, w = self.to_natural(u)
        k = len(u)
        jac = np.zeros((4, k))
        jac[0, 0] = theta[0]
        soft = np.diag(w) - np.outer(w, w)  # d w_i / d logit_j
        rows = (1, 2, 3) if self.with_gamma else (1, 3)
        scales = (1.0, 2.0, 1.0) if self.with_gamma else (1.0, 1.0)
        for i, (row, scale) in enumerate(zip(rows, scales)):
            jac[row, 1:] = scale * soft[i, : k - 1]
        return jac

    def from_natural(self, omega, alpha, gamma, beta):
        slack = 1.0 - alpha - beta - 0.5 * gamma
        parts = [alpha, 0.5 * gamma, beta] if self.with_gamma else [alpha, beta]
        return np.array([math.log(omega)] + [math.log(p / slack) for p in parts])


def _optimize(eps, init_variance, with_gamma, max_iter, gtol):
    e2 = eps * eps
    neg_e2 = np.where(eps < 0, e2, 0.0)
    n = len(eps)
    transform = _Transform(with_gamma)
    alpha0, gamma0, beta0 = 0.05, (0.05 if with_gamma else 0.0), 0.85
    omega0 = init_variance * (1.0 - alpha0 - beta0 - 0.5 * gamma0)
    u0 = transform.from_natural(omega0, alpha0, gamma0, beta0)

    def objective(u):
        theta, _ = transform.to_natural(u)
        ll, grad = _loglik_and_grad(theta, eps, e2, neg_e2, init_variance)
        if not np.isfinite(ll):
            return 1e10, np.zeros_like(u)
        return -ll / n, -(transform.jacobian(u).T @ grad) / n

    res = optimize.minimize(
        objective,
        u0,
        jac=True,
        method="L-BFGS-B",
        options={"gtol": gtol, "maxiter": max_iter, "ftol": 1e-15},
    )
    theta, _ = transform.to_natural(res.x)
    ll, _ = _loglik_and_grad(theta, eps, e2, neg_e2, init_variance)
    grad_norm = float(np.max(np.abs(res.jac))) if res.jac is not None else np.inf
    # the line search may stop on precision loss right at the optimum
    converged = bool(np.isfinite(ll)) and res.nit < max_iter and (
        res.success or grad_norm < 100 * gtol
    )
    return theta, ll, converged


def _hessian_std_errors(theta, eps, init_variance):
    e2 = eps * eps
    neg_e2 = np.where(eps < 0, e2, 0.0)
    hess = np.zeros((4, 4))
    for j in range(4):
        step = 1e-5 * max(abs(theta[j]), 1e-3)
        up, down = theta.copy(), theta.copy()
        up[j] += step
        down[j] -= step
        g_up = _loglik_and_grad(up, eps, e2, neg_e2, init_variance)[1]
        g_down = _loglik_and_grad(down, eps, e2, neg_e2, init_variance)[1]
        hess[:, j] = (g_up - g_down) / (2 * step)
    hess = 0.5 * (hess + hess.T)
    try:
        cov = np.linalg.inv(-hess)
    except np.linalg.LinAlgError:
        return None
    diag = np.diag(cov)
    if (diag <= 0).any():
        return None
    return np.sqrt(diag)


def fit_gjr_garch(
    returns,
    kind: str = "overnight",
    *,
    min_obs: int = 240,
    max_iter: int = 500,
    gtol: float = 1e-6,
    compute_se: bool = False,
    model: str = "gjr",
) -> GjrParams:
    """Fit GJR-GARCH(1,1) with Gaussian errors to a demeaned return series.

    Falls back to plain GARCH(1,1) (gamma fixed at 0) when the GJR fit does not
    converge. ``model="garch"`` fits the gamma-constrained model directly. ``kind`` is informational here; the full-day scaling is applied
    by :func:`gjr_sigma_series`.

    Raises
    ------
    InsufficientDataError
        Fewer than ``min_obs`` returns.
    ConvergenceError
        Both the GJR and the fallback fit failed.
    """
    if kind not in ("overnight", "daily"):
        raise ValueError(f"kind must be 'overnight' or 'daily', got {kind!r}")
    if model not in ("gjr", "garch"):
        raise ValueError(f"model must be 'gjr' or 'garch', got {model!r}")
    returns = np.asarray(returns, dtype=np.float64)
    if not np.all(np.isfinite(returns)):
        raise ValueError("returns contain non-finite values")
    n = len(returns)
    if n < min_obs:
        raise InsufficientDataError(f"need at least {min_obs} returns, got {n}")
    mean = float(np.mean(returns))
    eps = returns - mean
    variance = float(np.mean(eps * eps))
    if variance <= 0:
        raise ConvergenceError("return series has zero variance")
    scale = math.sqrt(variance)
    z = eps / scale

    attempts = ((True, "gjr"), (False, "garch_fallback")) if model == "gjr" else ((False, "garch"),)
    for with_gamma, model_kind in attempts:
        theta, ll, converged = _optimize(z, 1.0, with_gamma, max_iter, gtol)
        if converged:
            break
        logger.info("GJR-GARCH fit (%s) did not converge; n=%d", model_kind, n)
    else:
        raise ConvergenceError("neither GJR-GARCH nor GARCH(1,1) converged")

    std_errors = None
    if compute_se:
        se = _hessian_std_errors(theta, z, 1.0)
        if se is not None:
            std_errors = {
                "omega": float(se[0] * variance),
                "alpha": float(se[1]),
                "gamma": float(se[2]) if model_kind == "gjr" else 0.0,
                "beta": float(se[3]),
            }
    return GjrParams(
        omega=float(theta[0] * variance),
        alpha=float(theta[1]),
        gamma=float(theta[2]),
        beta=float(theta[3]),
        model_kind=model_kind,
        mean=mean,
        loglik=float(ll - n * math.log(scale)),
        converged=True,
        n_obs=n,
        init_variance=variance,
        std_errors=std_errors,
    )


def gjr_loglik(params: GjrParams, returns) -> float:
    """Gaussian log-likelihood of ``returns`` under ``params``."""
    eps = np.asarray(returns, dtype=np.float64) - params.mean
    h = gjr_variance_path(
        params.omega, params.alpha, params.gamma, params.beta, eps, params.init_variance
    )[:-1]
    return float(-0.5 * np.sum(LOG_2PI + np.log(h) + eps * eps / h))


def gjr_sigma_series(params: GjrParams, returns, kind: str = "overnight") -> np.ndarray:
    """Filtered conditional volatility aligned to each return, full-day scaled.

    Overnight volatilities are multiplied by sqrt(2); the daily variant is
    already on a full-day scale.
    """
    if kind not in ("overnight", "daily"):
        raise ValueError(f"kind must be 'overnight' or 'daily', got {kind!r}")
    eps = np.asarray(returns, dtype=np.float64) - params.mean
    h = gjr_variance_path(
        params.omega, params.alpha, params.gamma, params.beta, eps, params.init_variance
    )[:-1]
    scale = SQRT2 if kind == "overnight" else 1.0
    return np.sqrt(h) * scale


def standardize(raw_return, sigma):
    """``raw_return / sigma``; NaN marks an inestimable observation (sigma <= 0)."""
    raw = np.asarray(raw_return, dtype=np.float64)
    sig = np.asarray(sigma, dtype=np.float64)
    ok = np.isfinite(sig) & (sig > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(ok, raw / np.where(ok, sig, 1.0), np.nan)
    return float(out) if out.ndim == 0 else out
