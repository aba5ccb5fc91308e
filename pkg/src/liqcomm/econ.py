"""Regression kernel: OLS, Newey-West HAC covariance, Fama-MacBeth,
Dickey-Fuller and deterministic-trend regressions.

All estimators are pure functions of their inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

log = logging.getLogger(__name__)

EPS = np.finfo(float).eps


class SingularDesignError(ValueError):
    """Design matrix is rank deficient; ``column`` names the first offender."""

    def __init__(self, column: str, message: str | None = None):
        self.column = column
        super().__init__(message or f"singular design: column {column!r} is collinear")


class InsufficientDataError(ValueError):
    pass


class FamaMacBethError(ValueError):
    pass


@dataclass
class RegressionResult:
    coefficients: np.ndarray
    hac_covariance: np.ndarray
    t_stats: np.ndarray
    r_squared: float
    n_obs: int
    lag_used: int
    residuals: np.ndarray = field(repr=False)
    classical_covariance: np.ndarray = field(repr=False)
    names: tuple[str, ...] = ()

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.hac_covariance), 0.0, None))

    @property
    def classical_std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.classical_covariance), 0.0, None))

    def index(self, name: str) -> int:
        return self.names.index(name)

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.index(name)])


@dataclass
class FMResult:
    mean_coefficients: np.ndarray
    nw_t_stats: np.ndarray
    per_period_coefficients: np.ndarray
    n_periods: int
    nw_std_errors: np.ndarray = None
    zero_variance: np.ndarray = None
    periods: tuple = ()
    skipped: dict = field(default_factory=dict)
    names: tuple[str, ...] = ()
    lags: int = 2
    mean_n_obs: float = float("nan")

    def coef(self, name: str) -> float:
        return float(self.mean_coefficients[self.names.index(name)])

    def tstat(self, name: str) -> float:
        return float(self.nw_t_stats[self.names.index(name)])

    def se(self, name: str) -> float:
        return float(self.nw_std_errors[self.names.index(name)])


def _default_names(k: int) -> tuple[str, ...]:
    return tuple(f"x{j}" for j in range(k))


def _qr_solve(y: np.ndarray, X: np.ndarray, names: Sequence[str]):
    """Least squares via column-pivoted QR on the column-equilibrated design.

    Rank tolerance: eps * max(n, k) * largest singular value of the
    equilibrated design. Returns (beta, XtX_inv).
    """
    n, k = X.shape
    norms = np.sqrt(np.einsum("ij,ij->j", X, X))
    for j in range(k):
        if not np.isfinite(norms[j]) or norms[j] == 0.0:
            raise SingularDesignError(names[j])
    Xs = X / norms
    Q, R, piv = linalg.qr(Xs, mode="economic", pivoting=True, check_finite=False)
    smax = np.linalg.norm(Xs, 2)
    tol = EPS * max(n, k) * smax
    diag = np.abs(np.diag(R))
    bad = np.flatnonzero(diag <= tol)
    if bad.size:
        raise SingularDesignError(names[piv[bad[0]]])
    coef_s = linalg.solve_triangular(R, Q.T @ y, check_finite=False)
    rinv = linalg.solve_triangular(R, np.eye(k), check_finite=False)
    beta = np.empty(k)
    beta[piv] = coef_s
    inv_s = np.empty((k, k))
    inv_s[np.ix_(piv, piv)] = rinv @ rinv.T
    beta /= norms
    xtx_inv = inv_s / np.outer(norms, norms)
    return beta, xtx_inv


def nw_hac_cov(
    residuals: np.ndarray,
    X: np.ndarray,
    lags: int,
    xtx_inv: np.ndarray | None = None,
) -> np.ndarray:
    """Newey-West covariance of OLS coefficients with Bartlett weights
    ``1 - j / (lags + 1)``. ``lags=0`` is the White (HC0) sandwich."""
    X = np.asarray(X, dtype=float)
    e = np.asarray(residuals, dtype=float)
    n = X.shape[0]
    if lags < 0:
        raise ValueError("lags must be non-negative")
    if lags >= n:
        raise InsufficientDataError(f"lags={lags} must be < n_obs={n}")
    if xtx_inv is None:
        xtx_inv = np.linalg.inv(X.T @ X)
    U = X * e[:, None]
    meat = U.T @ U
    for j in range(1, lags + 1):
        w = 1.0 - j / (lags + 1.0)
        gamma = U[j:].T @ U[:-j]
        meat += w * (gamma + gamma.T)
    cov = xtx_inv @ meat @ xtx_inv
    return 0.5 * (cov + cov.T)


def ols_fit(
    y: np.ndarray,
    X: np.ndarray,
    lags: int = 0,
    names: Sequence[str] | None = None,
) -> RegressionResult:
    """Ordinary least squares with HAC (Newey-West, ``lags``) covariance.

    ``X`` must already contain the intercept column. Raises
    :class:`SingularDesignError` naming the offending column when the design
    is rank deficient, and :class:`InsufficientDataError` when
    ``n_obs <= n_regressors``.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    names = tuple(names) if names is not None else _default_names(k)
    if len(names) != k:
        raise ValueError("names length does not match design columns")
    if y.shape[0] != n:
        raise ValueError("y and X have different lengths")
    if n <= k:
        raise InsufficientDataError(f"n_obs={n} must exceed number of regressors {k}")
    beta, xtx_inv = _qr_solve(y, X, names)
    resid = y - X @ beta
    rss = float(resid @ resid)
    yc = y - y.mean()
    tss = float(yc @ yc)
    if tss > 0:
        r2 = 1.0 - rss / tss
    else:
        r2 = 1.0 if rss <= EPS * max(1.0, float(y @ y)) else float("nan")
    classical = xtx_inv * (rss / (n - k))
    hac = nw_hac_cov(resid, X, lags, xtx_inv=xtx_inv)
    se = np.sqrt(np.clip(np.diag(hac), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / np.where(se > 0, se, 1.0), np.nan)
    return RegressionResult(
        coefficients=beta,
        hac_covariance=hac,
        t_stats=t,
        r_squared=r2,
        n_obs=n,
        lag_used=lags,
        residuals=resid,
        classical_covariance=classical,
        names=names,
    )


def ols_coefficients(y: np.ndarray, X: np.ndarray, names: Sequence[str] | None = None) -> np.ndarray:
    """Coefficients only; same rank rules as :func:`ols_fit`."""
    X = np.asarray(X, dtype=float)
    n, k = X.shape
    names = tuple(names) if names is not None else _default_names(k)
    if n <= k:
        raise InsufficientDataError(f"n_obs={n} must exceed number of regressors {k}")
    beta, _ = _qr_solve(np.asarray(y, dtype=float), X, names)
    return beta


def batched_ols_coefficients(Y: np.ndarray, X: np.ndarray, valid: np.ndarray, names: Sequence[str] | None = None):
    """Coefficients for many independent regressions of equal width.

    ``Y`` is ``(m, n)``, ``X`` is ``(m, n, k)`` and ``valid`` marks the rows
    that belong to each regression. Invalid rows are zeroed, which leaves the
    least-squares solution unchanged. Problems whose equilibrated design is
    close to the rank tolerance are re-solved one at a time with the pivoted
    QR path, so rank decisions match :func:`ols_coefficients`.

    Returns ``(coefficients, errors)`` where failed rows are NaN and
    ``errors`` maps the problem index to the raised exception.
    """
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    m, n, k = X.shape
    names = tuple(names) if names is not None else _default_names(k)
    valid = np.asarray(valid, dtype=bool)
    Xz = np.where(valid[:, :, None], X, 0.0)
    Yz = np.where(valid, Y, 0.0)
    nobs = valid.sum(axis=1)
    out = np.full((m, k), np.nan)
    errors = {}
    norms = np.sqrt(np.einsum("mij,mij->mj", Xz, Xz))
    ok = (nobs > k) & np.all(norms > 0, axis=1) & np.all(np.isfinite(norms), axis=1)
    idx = np.flatnonzero(ok)
    if idx.size:
        Xs = Xz[idx] / norms[idx][:, None, :]
        U, s, Vt = np.linalg.svd(Xs, full_matrices=False)
        tol = EPS * np.maximum(nobs[idx], k) * s[:, 0]
        fast = s[:, -1] > 64.0 * tol
        uy = np.einsum("mnk,mn->mk", U, Yz[idx])
        coef_s = np.einsum("mkj,mk->mj", Vt, uy / s)
        out[idx[fast]] = coef_s[fast] / norms[idx[fast]]
        ok[idx[~fast]] = False
    for i in np.flatnonzero(~ok):
        rows = valid[i]
        try:
            out[i] = ols_coefficients(Y[i, rows], X[i, rows], names)
        except (SingularDesignError, InsufficientDataError) as exc:
            errors[int(i)] = exc
    return out, errors


def mean_nw_se(series: np.ndarray, lags: int) -> float:
    """NW standard error of the sample mean (regression on a constant)."""
    c = np.asarray(series, dtype=float)
    ones = np.ones((c.size, 1))
    cov = nw_hac_cov(c - c.mean(), ones, lags, xtx_inv=np.array([[1.0 / c.size]]))
    return float(np.sqrt(max(cov[0, 0], 0.0)))


def fama_macbeth(
    cross_sections: Sequence[tuple[np.ndarray, np.ndarray]],
    lags: int = 2,
    names: Sequence[str] | None = None,
    periods: Sequence | None = None,
    max_skip_fraction: float = 0.2,
) -> FMResult:
    """Two-pass Fama-MacBeth: per-period OLS, then time-series means with
    NW(``lags``) t-statistics on each coefficient series.

    Periods whose design fails the rank or size checks are skipped and logged;
    more than ``max_skip_fraction`` skipped raises :class:`FamaMacBethError`.
    A coefficient series with no variation beyond rounding gets a NaN t-stat
    and ``zero_variance`` set.
    """
    if periods is None:
        periods = list(range(len(cross_sections)))
    coefs, kept, skipped, nobs = [], [], {}, []
    for p, (y, X) in zip(periods, cross_sections):
        X = np.asarray(X, dtype=float)
        k = X.shape[1]
        nm = tuple(names) if names is not None else _default_names(k)
        try:
            coefs.append(ols_coefficients(y, X, nm))
            kept.append(p)
            nobs.append(X.shape[0])
        except (SingularDesignError, InsufficientDataError) as exc:
            skipped[p] = str(exc)
            log.info("fama_macbeth: period %s skipped: %s", p, exc)
    total = len(cross_sections)
    if total == 0:
        raise FamaMacBethError("no periods supplied")
    if len(skipped) > max_skip_fraction * total:
        reasons = sorted(set(skipped.values()))
        raise FamaMacBethError(
            f"{len(skipped)} of {total} periods skipped (> {max_skip_fraction:.0%}): {'; '.join(reasons)}"
        )
    if len(kept) < 3:
        raise FamaMacBethError(f"need at least 3 usable periods, got {len(kept)}")
    C = np.vstack(coefs)
    T, k = C.shape
    names = tuple(names) if names is not None else _default_names(k)
    if lags >= T:
        raise InsufficientDataError(f"lags={lags} must be < number of periods {T}")
    mean = C.mean(axis=0)
    se = np.array([mean_nw_se(C[:, j], lags) for j in range(k)])
    scale = np.max(np.abs(C), axis=0)
    zero = C.std(axis=0) <= 64 * EPS * np.where(scale > 0, scale, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(zero | (se <= 0), np.nan, mean / np.where(se > 0, se, 1.0))
    return FMResult(
        mean_coefficients=mean,
        nw_t_stats=t,
        per_period_coefficients=C,
        n_periods=T,
        nw_std_errors=se,
        zero_variance=zero,
        periods=tuple(kept),
        skipped=skipped,
        names=names,
        lags=lags,
        mean_n_obs=float(np.mean(nobs)),
    )


# MacKinnon (2010) response-surface coefficients for the single-series
# Dickey-Fuller tau statistic: tau(T) = b0 + b1/T + b2/T**2 + b3/T**3.
# Rows are the 1%, 5% and 10% levels.
DF_RESPONSE_SURFACE = {
    "c": np.array(
        [
            [-3.43035, -6.5393, -16.786, -79.433],
            [-2.86154, -2.8903, -4.234, -40.040],
            [-2.56677, -1.5384, -2.809, 0.0],
        ]
    ),
    "ct": np.array(
        [
            [-3.95877, -9.0531, -28.428, -134.155],
            [-3.41049, -4.3904, -9.036, -45.374],
            [-3.12705, -2.5856, -3.925, -22.380],
        ]
    ),
}
DF_LEVELS = (0.01, 0.05, 0.10)


def df_critical_values(n_obs: int, with_trend: bool = True) -> dict[float, float]:
    """Finite-sample Dickey-Fuller critical values for a regression on
    ``n_obs`` observations."""
    table = DF_RESPONSE_SURFACE["ct" if with_trend else "c"]
    inv = 1.0 / n_obs
    powers = np.array([1.0, inv, inv**2, inv**3])
    return {lvl: float(row @ powers) for lvl, row in zip(DF_LEVELS, table)}


@dataclass
class DickeyFullerResult:
    rho: float | None
    statistic: float | None
    reject_5pct: bool | None
    critical_values: dict
    n_obs: int
    with_trend: bool
    degenerate: bool = False
    reason: str = ""

    @property
    def rho_minus_one(self) -> float | None:
        return None if self.rho is None else self.rho - 1.0


def dickey_fuller(series: np.ndarray, with_trend: bool = True) -> DickeyFullerResult:
    """Unit-root test on the levels regression
    ``b_t = a + rho * b_{t-1} [+ g * t] + v_t``; statistic ``(rho - 1) / se``.

    A design that is singular or fits with zero residual variance is reported
    as ``degenerate`` with no statistic.
    """
    b = np.asarray(series, dtype=float)
    if b.ndim != 1 or b.size < 10:
        raise InsufficientDataError("dickey_fuller needs a series of length >= 10")
    if not np.all(np.isfinite(b)):
        raise ValueError("series contains non-finite values")
    y = b[1:]
    n = y.size
    cols = [np.ones(n), b[:-1]]
    names = ["const", "lag"]
    if with_trend:
        cols.append(np.arange(2, b.size + 1, dtype=float))
        names.append("trend")
    X = np.column_stack(cols)
    crit = df_critical_values(n, with_trend)
    try:
        res = ols_fit(y, X, lags=0, names=names)
    except SingularDesignError as exc:
        return DickeyFullerResult(None, None, None, crit, n, with_trend, True, f"singular design ({exc.column})")
    rss = float(res.residuals @ res.residuals)
    if rss <= (1e3 * EPS) ** 2 * float(y @ y):
        return DickeyFullerResult(None, None, None, crit, n, with_trend, True, "zero residual variance")
    rho = res.coef("lag")
    se = float(res.classical_std_errors[1])
    stat = (rho - 1.0) / se
    return DickeyFullerResult(rho, stat, bool(stat < crit[0.05]), crit, n, with_trend)


def trend_regression(series: np.ndarray, lags: int = 2) -> RegressionResult:
    """OLS of the series on an intercept and time index 1..T with NW(lags)."""
    b = np.asarray(series, dtype=float)
    if b.size < 4:
        raise InsufficientDataError("trend_regression needs length >= 4")
    t = np.arange(1, b.size + 1, dtype=float)
    X = np.column_stack([np.ones(b.size), t])
    return ols_fit(b, X, lags=lags, names=("const", "trend"))


def welch_t(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample t statistic with unequal variances for mean(a) - mean(b)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        return float("nan")
    se2 = a.var(ddof=1) / a.size + b.var(ddof=1) / b.size
    if se2 <= 0:
        return float("nan")
    return float((a.mean() - b.mean()) / np.sqrt(se2))


def one_sample_t(a: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    if a.size < 2:
        return float("nan")
    sd = a.std(ddof=1)
    if sd <= 0:
        return float("nan")
    return float(a.mean() / (sd / np.sqrt(a.size)))
