"""Daily Amihud illiquidity, log changes, and weighted cross-sectional aggregates.

Aggregates operate on dense ``(days x stocks)`` matrices with NaN marking a
stock that does not contribute on a day. Columns are kept in sorted stock
order so that reductions happen in a fixed order and results are
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd


def amihud_daily(ret, dollar_volume):
    """``|ret| / dollar_volume``; NaN when either is zero or non-finite."""
    ret = np.asarray(ret, dtype=float)
    dvol = np.asarray(dollar_volume, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.abs(ret) / dvol
    out = np.where(np.isfinite(out) & (out > 0), out, np.nan)
    return out[()] if out.ndim == 0 else out


def delta_illiq(illiq_d, illiq_prev):
    """Log change ``ln(illiq_d / illiq_prev)``; NaN if either side is undefined."""
    a = np.asarray(illiq_d, dtype=float)
    b = np.asarray(illiq_prev, dtype=float)
    ok = (a > 0) & (b > 0) & np.isfinite(a) & np.isfinite(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(ok, np.log(a) - np.log(b), np.nan)
    return out[()] if out.ndim == 0 else out


def delta_illiq_chain(illiq, reconnect: bool = True) -> np.ndarray:
    """Log changes along one stock's daily illiq series.

    Undefined days get NaN. With ``reconnect`` the change is taken against
    the nearest earlier defined day, otherwise a gap breaks the chain.
    """
    x = np.asarray(illiq, dtype=float)
    out = np.full(x.shape, np.nan)
    idx = np.flatnonzero(np.isfinite(x) & (x > 0))
    if len(idx) < 2:
        return out
    cur, prev = idx[1:], idx[:-1]
    d = np.log(x[cur]) - np.log(x[prev])
    if not reconnect:
        d = np.where(cur - prev == 1, d, np.nan)
    out[cur] = d
    return out


def turnover_daily(volume, shares_outstanding):
    return np.asarray(volume, dtype=float) / np.asarray(shares_outstanding, dtype=float)


def quoted_spread_pct(spread, close):
    """Spread over close; NaN when the spread is missing."""
    if spread is None:
        return np.nan
    return np.asarray(spread, dtype=float) / np.asarray(close, dtype=float)


# ---------------------------------------------------------------------------
# dense panels
# ---------------------------------------------------------------------------


@dataclass
class DensePanel:
    """A ``(days x stocks)`` matrix view of a long panel."""

    dates: pd.DatetimeIndex
    stocks: np.ndarray
    values: dict

    def __getitem__(self, key) -> np.ndarray:
        return self.values[key]


def to_dense(frame: pd.DataFrame, columns, dates=None, stocks=None) -> DensePanel:
    if dates is None:
        dates = pd.DatetimeIndex(np.sort(frame["date"].unique()))
    if stocks is None:
        stocks = np.sort(frame["stock_id"].unique())
    r = dates.get_indexer(pd.DatetimeIndex(frame["date"]))
    c = pd.Index(stocks).get_indexer(frame["stock_id"])
    ok = (r >= 0) & (c >= 0)
    out = {}
    for col in columns:
        m = np.full((len(dates), len(stocks)), np.nan)
        m[r[ok], c[ok]] = frame[col].to_numpy(dtype=float)[ok]
        out[col] = m
    return DensePanel(dates, np.asarray(stocks), out)


# ---------------------------------------------------------------------------
# weighted means and leave-one-out
# ---------------------------------------------------------------------------


def _prepare(values, weights, equal):
    x = np.asarray(values, dtype=float)
    w = np.ones_like(x) if equal or weights is None else np.asarray(weights, dtype=float)
    use = np.isfinite(x) & np.isfinite(w) & (w > 0)
    x0 = np.where(use, x, 0.0)
    w0 = np.where(use, w, 0.0)
    return x0, w0, use


def weighted_mean(values, weights=None, equal: bool = False, min_count: int = 2) -> np.ndarray:
    """Row-wise weighted mean over contributing stocks (NaN if fewer than
    ``min_count`` contribute)."""
    x0, w0, use = _prepare(values, weights, equal)
    num = (w0 * x0).sum(axis=1)
    den = w0.sum(axis=1)
    n = use.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num / den
    return np.where(n >= min_count, out, np.nan)


def leave_one_out_mean(values, weights=None, equal: bool = False, min_count: int = 2) -> np.ndarray:
    """Weighted mean excluding each column in turn.

    Entry ``[d, i]`` is ``(S_d - w_di x_di) / (W_d - w_di)``, where the own
    term is subtracted only when stock ``i`` contributes on day ``d``. NaN
    when fewer than ``min_count`` other stocks contribute.
    """
    x0, w0, use = _prepare(values, weights, equal)
    wx = w0 * x0
    num = wx.sum(axis=1, keepdims=True) - wx
    den = w0.sum(axis=1, keepdims=True) - w0
    n = use.sum(axis=1, keepdims=True) - use
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num / den
    return np.where(n >= min_count, out, np.nan)


def market_delta_illiq(observations: pd.DataFrame, equal: bool = False, exclude=None, min_count: int = 2) -> pd.Series:
    """Daily cap-weighted (or equal-weighted) mean of ``delta_illiq``.

    ``observations`` needs ``stock_id, date, delta_illiq, weight`` where the
    weight is the previous trading day's market cap. ``exclude`` drops one
    stock before averaging.
    """
    obs = observations
    if exclude is not None:
        obs = obs[obs["stock_id"] != exclude]
    dense = to_dense(obs, ["delta_illiq", "weight"])
    vals = weighted_mean(dense["delta_illiq"], dense["weight"], equal=equal, min_count=min_count)
    return pd.Series(vals, index=dense.dates, name="delta_illiq_mkt")


# ---------------------------------------------------------------------------
# high-ownership portfolio
# ---------------------------------------------------------------------------


def top_fraction_members(fractions: pd.Series, top: float = 0.1) -> np.ndarray:
    """Stock ids in the top ``top`` fraction by ownership (at least one).

    Ranking is by value then stock id, matching the bucket sorts.
    """
    f = fractions.dropna()
    if f.empty:
        return np.array([], dtype=object)
    df = pd.DataFrame({"stock_id": f.index.astype(str), "v": f.to_numpy()})
    df = df.sort_values(["v", "stock_id"], kind="mergesort")
    k = max(1, int(np.floor(top * len(df) + 1e-9)))
    return np.sort(df["stock_id"].to_numpy()[-k:])


def hi_portfolio_loo(levels, weights, members, equal: bool = False):
    """Daily log change of a value-weighted portfolio illiq level.

    ``levels`` and ``weights`` are ``(days x stocks)``; row ``d - 1`` is the
    previous market day. ``members`` is a boolean mask over stocks. For each
    day the portfolio is restricted to members defined on both ``d`` and
    ``d - 1``; the level on each side uses that side's weights.

    Returns ``(full, loo)``: the change with all members, and a
    ``(days x stocks)`` matrix where column ``i`` excludes stock ``i``.
    """
    L = np.asarray(levels, dtype=float)
    W = np.ones_like(L) if equal else np.asarray(weights, dtype=float)
    ok = np.isfinite(L) & (L > 0) & np.isfinite(W) & (W > 0) & np.asarray(members, dtype=bool)[None, :]
    m = np.zeros_like(ok)
    m[1:] = ok[1:] & ok[:-1]
    Lc = np.where(m, L, 0.0)
    Wc = np.where(m, W, 0.0)
    Lp = np.zeros_like(Lc)
    Wp = np.zeros_like(Wc)
    Lp[1:] = np.where(m[1:], L[:-1], 0.0)
    Wp[1:] = np.where(m[1:], W[:-1], 0.0)
    a, b = Wc * Lc, Wc
    c, d = Wp * Lp, Wp
    A, B, C, D = (z.sum(axis=1, keepdims=True) for z in (a, b, c, d))
    n = m.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        full = np.log((A / B) / (C / D))[:, 0]
        loo = np.log(((A - a) / (B - b)) / ((C - c) / (D - d)))
    full = np.where(n[:, 0] >= 1, full, np.nan)
    loo = np.where((n - m) >= 1, loo, np.nan)
    return full, loo


def high_ownership_portfolio_illiq(levels: pd.DataFrame, members, equal: bool = False) -> pd.DataFrame:
    """Portfolio illiq level and its daily log change for a fixed member set.

    ``levels`` has ``stock_id, date, illiq, weight``. Returns a frame indexed
    by date with ``illiq_hi`` (level over all members defined that day) and
    ``delta_illiq_hi`` (matched-set change).
    """
    dense = to_dense(levels, ["illiq", "weight"])
    mask = np.isin(dense.stocks, np.asarray(list(members)))
    full, _ = hi_portfolio_loo(dense["illiq"], dense["weight"], mask, equal=equal)
    L, W = dense["illiq"], np.ones_like(dense["illiq"]) if equal else dense["weight"]
    ok = np.isfinite(L) & np.isfinite(W) & (W > 0) & mask[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        level = np.where(ok, W * L, 0).sum(axis=1) / np.where(ok, W, 0).sum(axis=1)
    return pd.DataFrame({"illiq_hi": level, "delta_illiq_hi": full}, index=dense.dates)


def pct_change_loo(levels, weights, equal: bool = False, min_count: int = 2):
    """Percentage change of a leave-one-out weighted mean level.

    Returns ``(full, loo)`` like :func:`hi_portfolio_loo`; the change at
    ``d`` compares the mean at ``d`` with the mean at row ``d - 1``.
    """
    full_lvl = weighted_mean(levels, weights, equal=equal, min_count=min_count)
    loo_lvl = leave_one_out_mean(levels, weights, equal=equal, min_count=min_count)
    full = np.full_like(full_lvl, np.nan)
    loo = np.full_like(loo_lvl, np.nan)
    with np.errstate(invalid="ignore", divide="ignore"):
        full[1:] = full_lvl[1:] / full_lvl[:-1] - 1.0
        loo[1:] = loo_lvl[1:] / loo_lvl[:-1] - 1.0
    full = np.where(np.isfinite(full), full, np.nan)
    loo = np.where(np.isfinite(loo), loo, np.nan)
    return full, loo
