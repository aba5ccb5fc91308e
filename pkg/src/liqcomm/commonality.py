"""Firm-quarter liquidity betas, high-ownership betas, volume betas and
return autocorrelations.

Series for one quarter are passed as arrays over the quarter's market
calendar (NaN where a value is unavailable). Lead and lag terms only look
inside those arrays, so the first and last market day of each quarter never
enter a lead/lag regression.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .econ import (
    InsufficientDataError,
    RegressionResult,
    batched_ols_coefficients,
    ols_fit,
    one_sample_t,
    welch_t,
)

log = logging.getLogger(__name__)

MARKET_NAMES = (
    "const",
    "dilliq_mkt",
    "dilliq_mkt_lead",
    "dilliq_mkt_lag",
    "ret_mkt",
    "ret_mkt_lead",
    "ret_mkt_lag",
    "ret_sq",
)
BETA_COLUMNS = (
    "stock_id",
    "quarter",
    "beta_L",
    "beta_HI",
    "beta_TO",
    "autocorr",
    "n_obs",
    "n_obs_hi",
    "n_obs_to",
    "controls_used",
    "skip_L",
    "skip_HI",
    "skip_TO",
)
HI_NAMES = MARKET_NAMES[:4] + ("dilliq_hi", "dilliq_hi_lead", "dilliq_hi_lag") + MARKET_NAMES[4:]


@dataclass
class BetaEstimate:
    stock_id: str
    quarter: int
    beta_L: float = np.nan
    beta_HI: float | None = None
    beta_TO: float | None = None
    autocorr: float | None = None
    n_obs: int = 0
    controls_used: str = ""
    skipped: str = ""


# centred sums of squares below this fraction of the raw ones count as zero
_VAR_TOL = 1e-20


def _lead_lag(x):
    """Columns (x_d, x_{d+1}, x_{d-1}) for d = 1..T-2."""
    x = np.asarray(x, dtype=float)
    return x[1:-1], x[2:], x[:-2]


def liquidity_design(y, mkt, ret_mkt, ret_sq=None, hi=None, controls: bool = True):
    """Regression rows for one firm-quarter.

    Returns ``(y, X, names, rows)`` where ``rows`` indexes the quarter days
    used. Rows with any missing value are dropped.
    """
    y = np.asarray(y, dtype=float)
    T = y.shape[0]
    if T < 3:
        return y[:0], np.empty((0, 1)), MARKET_NAMES[:1], np.arange(0)
    cols = [np.ones(T - 2), *_lead_lag(mkt)]
    names = list(MARKET_NAMES[:4])
    if hi is not None:
        cols += list(_lead_lag(hi))
        names += ["dilliq_hi", "dilliq_hi_lead", "dilliq_hi_lag"]
    if controls:
        cols += list(_lead_lag(ret_mkt))
        names += ["ret_mkt", "ret_mkt_lead", "ret_mkt_lag"]
        cols.append(np.asarray(ret_sq, dtype=float)[1:-1])
        names.append("ret_sq")
    X = np.column_stack(cols)
    yy = y[1:-1]
    ok = np.isfinite(yy) & np.isfinite(X).all(axis=1)
    rows = np.flatnonzero(ok) + 1
    return yy[ok], X[ok], tuple(names), rows


def estimate_liquidity_beta(
    y, mkt, ret_mkt, ret_sq, min_obs: int = 25, controls: bool = True, lags: int = 0
) -> RegressionResult:
    """OLS of the firm's daily illiq change on the market change (with lead
    and lag), market returns (with lead and lag) and its own squared return.

    ``mkt`` and ``ret_mkt`` must already exclude the firm. The liquidity
    beta is the ``dilliq_mkt`` coefficient.
    """
    yy, X, names, _ = liquidity_design(y, mkt, ret_mkt, ret_sq, controls=controls)
    if len(yy) < min_obs:
        raise InsufficientDataError(f"{len(yy)} aligned observations < {min_obs}")
    return ols_fit(yy, X, lags=lags, names=names)


def estimate_high_ownership_beta(
    y, mkt, hi, ret_mkt, ret_sq, min_obs: int = 25, controls: bool = True, lags: int = 0
) -> RegressionResult:
    """As :func:`estimate_liquidity_beta` with the high-ownership portfolio
    change (and its lead and lag) added. The HI beta is ``dilliq_hi``."""
    yy, X, names, _ = liquidity_design(y, mkt, ret_mkt, ret_sq, hi=hi, controls=controls)
    if len(yy) < min_obs:
        raise InsufficientDataError(f"{len(yy)} aligned observations < {min_obs}")
    return ols_fit(yy, X, lags=lags, names=names)


def estimate_volume_beta(turnover_change, market_turnover_change, min_obs: int = 25) -> RegressionResult:
    """Slope of the stock's daily turnover percentage change on the market's."""
    y = np.asarray(turnover_change, dtype=float)
    x = np.asarray(market_turnover_change, dtype=float)
    ok = np.isfinite(y) & np.isfinite(x)
    if ok.sum() < min_obs:
        raise InsufficientDataError(f"{int(ok.sum())} turnover observations < {min_obs}")
    X = np.column_stack([np.ones(ok.sum()), x[ok]])
    return ols_fit(y[ok], X, names=("const", "turnover_mkt"))


def turnover_change(turnover) -> np.ndarray:
    """``(to_d - to_{d-1}) / to_{d-1}`` down axis 0; NaN when the prior day is
    missing or zero."""
    to = np.asarray(turnover, dtype=float)
    out = np.full(to.shape, np.nan)
    prev, cur = to[:-1], to[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        out[1:] = np.where(prev > 0, cur / prev - 1.0, np.nan)
    return out


def return_autocorrelation(returns, min_obs: int = 2) -> float:
    """Lag-one Pearson correlation of consecutive returns (NaN pairs
    skipped); NaN when either leg has zero variance."""
    r = np.asarray(returns, dtype=float)
    a, b = r[1:], r[:-1]
    ok = np.isfinite(a) & np.isfinite(b)
    if np.isfinite(r).sum() < min_obs or ok.sum() < 3:
        return np.nan
    scale = (a[ok] @ a[ok]) * (b[ok] @ b[ok])
    a, b = a[ok] - a[ok].mean(), b[ok] - b[ok].mean()
    den = np.sqrt((a @ a) * (b @ b))
    if not den > _VAR_TOL * np.sqrt(scale):
        return np.nan
    return float(np.clip(a @ b / den, -1.0, 1.0))


# ---------------------------------------------------------------------------
# batched estimation over one quarter
# ---------------------------------------------------------------------------


@dataclass
class QuarterInputs:
    """Dense ``(days x stocks)`` arrays over one quarter's market calendar.

    ``mkt``, ``ret_mkt``, ``hi`` and ``turnover_mkt`` are per-firm
    (leave-one-out) regressors; column ``i`` is the series used for stock
    ``i``.
    """

    quarter: int
    stocks: np.ndarray
    y: np.ndarray
    ret_sq: np.ndarray
    mkt: np.ndarray
    ret_mkt: np.ndarray
    hi: np.ndarray | None = None
    turnover_chg: np.ndarray | None = None
    turnover_mkt: np.ndarray | None = None
    returns: np.ndarray | None = None
    in_sample: np.ndarray | None = None


def panel_design(y, mkt, ret_mkt, ret_sq=None, hi=None, controls: bool = True):
    """Stacked designs for all stocks of one quarter.

    Inputs are ``(days x stocks)``; returns ``Y (stocks, days-2)``,
    ``X (stocks, days-2, k)``, a validity mask of the same leading shape and
    the column names. Row ``r`` corresponds to quarter day ``r + 1``.
    """
    y = np.asarray(y, dtype=float)
    T, N = y.shape
    cols = [np.ones((T - 2, N)), *_lead_lag(mkt)]
    names = list(MARKET_NAMES[:4])
    if hi is not None:
        cols += list(_lead_lag(hi))
        names += ["dilliq_hi", "dilliq_hi_lead", "dilliq_hi_lag"]
    if controls:
        cols += list(_lead_lag(ret_mkt))
        names += ["ret_mkt", "ret_mkt_lead", "ret_mkt_lag"]
        cols.append(np.asarray(ret_sq, dtype=float)[1:-1])
        names.append("ret_sq")
    X = np.stack(cols, axis=-1).transpose(1, 0, 2)
    Y = y[1:-1].T
    valid = np.isfinite(Y) & np.isfinite(X).all(axis=2)
    return Y, X, valid, tuple(names)


def _batch(Y, X, valid, names, target, min_obs, subset):
    """Target coefficient, observation count and skip reason per stock."""
    n = valid.sum(axis=1)
    beta = np.full(len(n), np.nan)
    skip = np.where(n < min_obs, "insufficient_obs", "").astype(object)
    run = np.flatnonzero(subset & (n >= min_obs))
    if run.size:
        coef, errors = batched_ols_coefficients(Y[run], X[run], valid[run], names)
        beta[run] = coef[:, names.index(target)]
        for j, exc in errors.items():
            col = getattr(exc, "column", None)
            skip[run[j]] = f"singular:{col}" if col else "insufficient_obs"
    return beta, n, skip


def autocorrelations(returns, min_obs: int = 2) -> np.ndarray:
    """Column-wise :func:`return_autocorrelation`."""
    r = np.asarray(returns, dtype=float)
    a, b = r[1:], r[:-1]
    ok = np.isfinite(a) & np.isfinite(b)
    cnt = ok.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ma = np.where(ok, a, 0).sum(axis=0) / cnt
        mb = np.where(ok, b, 0).sum(axis=0) / cnt
        da = np.where(ok, a - ma, 0.0)
        db = np.where(ok, b - mb, 0.0)
        den = np.sqrt((da * da).sum(axis=0) * (db * db).sum(axis=0))
        rho = np.clip((da * db).sum(axis=0) / den, -1.0, 1.0)
    scale = np.sqrt((np.where(ok, a, 0) ** 2).sum(axis=0) * (np.where(ok, b, 0) ** 2).sum(axis=0))
    enough = (np.isfinite(r).sum(axis=0) >= min_obs) & (cnt >= 3) & (den > _VAR_TOL * scale)
    return np.where(enough, rho, np.nan)


def estimate_quarter(q: QuarterInputs, min_obs: int = 25, controls: bool = True) -> pd.DataFrame:
    """Estimate every in-sample firm of one quarter; failures are recorded
    as skip reasons rather than raised."""
    sample = q.in_sample if q.in_sample is not None else np.isfinite(q.y).any(axis=0)
    N = len(q.stocks)
    rec = {
        "stock_id": q.stocks,
        "quarter": np.full(N, q.quarter),
        "beta_L": np.full(N, np.nan),
        "beta_HI": np.full(N, np.nan),
        "beta_TO": np.full(N, np.nan),
        "autocorr": np.full(N, np.nan),
        "n_obs": np.zeros(N, dtype=int),
        "n_obs_hi": np.zeros(N, dtype=int),
        "n_obs_to": np.zeros(N, dtype=int),
        "controls_used": np.full(N, "ret_mkt(-1,0,+1),ret_sq" if controls else "none", dtype=object),
        "skip_L": np.full(N, "", dtype=object),
        "skip_HI": np.full(N, "", dtype=object),
        "skip_TO": np.full(N, "", dtype=object),
    }
    if q.y.shape[0] >= 3:
        Y, X, valid, names = panel_design(q.y, q.mkt, q.ret_mkt, q.ret_sq, controls=controls)
        rec["beta_L"], rec["n_obs"], rec["skip_L"] = _batch(Y, X, valid, names, "dilliq_mkt", min_obs, sample)
        if q.hi is not None:
            Y, X, valid, names = panel_design(q.y, q.mkt, q.ret_mkt, q.ret_sq, hi=q.hi, controls=controls)
            rec["beta_HI"], rec["n_obs_hi"], rec["skip_HI"] = _batch(Y, X, valid, names, "dilliq_hi", min_obs, sample)
    else:
        rec["skip_L"][:] = "insufficient_obs"
    if q.turnover_chg is not None:
        ty, tx = q.turnover_chg.T, q.turnover_mkt.T
        valid = np.isfinite(ty) & np.isfinite(tx)
        X = np.stack([np.ones_like(tx), tx], axis=-1)
        rec["beta_TO"], rec["n_obs_to"], rec["skip_TO"] = _batch(
            ty, X, valid, ("const", "turnover_mkt"), "turnover_mkt", min_obs, sample
        )
    if q.returns is not None:
        rec["autocorr"] = autocorrelations(q.returns, min_obs=min_obs)
    return pd.DataFrame(rec)[sample]


def estimate_all(quarters, min_obs: int = 25, controls: bool = True, max_workers: int = 1) -> pd.DataFrame:
    """Estimate all quarters; output sorted by (stock_id, quarter) regardless
    of scheduling."""
    quarters = list(quarters)
    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as ex:
            parts = list(ex.map(lambda q: estimate_quarter(q, min_obs, controls), quarters))
    else:
        parts = [estimate_quarter(q, min_obs, controls) for q in quarters]
    if not parts:
        return pd.DataFrame(columns=BETA_COLUMNS)
    df = pd.concat(parts, ignore_index=True)[list(BETA_COLUMNS)]
    return df.sort_values(["stock_id", "quarter"], kind="mergesort").reset_index(drop=True)


def annual_beta_means(
    estimates: pd.DataFrame,
    value: str = "beta_L",
    group_col: str = "size_group",
    groups=("large", "small"),
    diff=("large", "small"),
) -> pd.DataFrame:
    """Per-year cross-sectional statistics of firm-year mean betas.

    Quarterly betas are first averaged per firm and year (within a size
    group for the group rows, across all quarters for the ``all`` row).
    Each year gets the cross-sectional mean, its t-statistic and the
    percentage of positive firm-year means; ``diff`` adds a row with the
    difference of two group means and its Welch t-statistic. Empty
    group-years are omitted.
    """
    cols = ["year", "group", "mean", "t_stat", "pct_positive", "n"]
    e = estimates.dropna(subset=[value])
    if e.empty:
        return pd.DataFrame(columns=cols)
    e = e.assign(year=e["quarter"] // 4)
    firm_all = e.groupby(["year", "stock_id"], sort=True)[value].mean().reset_index()
    firm_grp = e.dropna(subset=[group_col]).groupby([group_col, "year", "stock_id"], sort=True)[value].mean()
    rows = []
    for year in sorted(firm_all["year"].unique()):
        samples = {"all": firm_all.loc[firm_all["year"] == year, value].to_numpy()}
        for g in groups:
            try:
                samples[g] = firm_grp.loc[(g, year)].to_numpy()
            except KeyError:
                samples[g] = np.array([])
        for g, a in samples.items():
            if a.size == 0:
                continue
            rows.append((int(year), g, float(a.mean()), one_sample_t(a), 100.0 * float((a > 0).mean()), int(a.size)))
        if diff is not None:
            a, b = samples.get(diff[0], np.array([])), samples.get(diff[1], np.array([]))
            if a.size and b.size:
                rows.append((int(year), f"{diff[0]}-{diff[1]}", float(a.mean() - b.mean()), welch_t(a, b), np.nan, int(a.size + b.size)))
    return pd.DataFrame(rows, columns=cols)
