"""Report tables and figure series built from the estimated panels."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from .commonality import annual_beta_means
from .econ import (
    FamaMacBethError,
    InsufficientDataError,
    RegressionResult,
    SingularDesignError,
    dickey_fuller,
    fama_macbeth,
    mean_nw_se,
    ols_fit,
    one_sample_t,
    trend_regression,
)
from .ingest import quarter_label

log = logging.getLogger(__name__)

SIZE_LABELS = ("small", "mid", "large")


@dataclass(frozen=True)
class SortSpec:
    variable: str
    n_buckets: int = 3

    def __post_init__(self):
        if self.n_buckets < 1:
            raise ValueError("n_buckets must be positive")


def bucket_sizes(n: int, n_buckets: int) -> np.ndarray:
    """Bucket populations; the remainder goes to the lowest buckets."""
    base, rem = divmod(n, n_buckets)
    return np.array([base + 1] * rem + [base] * (n_buckets - rem), dtype=int)


def sort_assign(values: pd.Series, n_buckets: int) -> pd.Series:
    """Rank-based bucket labels ``1..n_buckets`` (1 = lowest).

    ``values`` is indexed by stock id. Ties are broken by stock id. Missing
    values are excluded (logged) and get no label.
    """
    v = values.dropna()
    dropped = len(values) - len(v)
    if dropped:
        log.info("sort_assign: %d stocks without a sort value excluded", dropped)
    if v.empty:
        return pd.Series([], dtype=int, name="bucket")
    df = pd.DataFrame({"sid": v.index.astype(str), "v": v.to_numpy()}, index=v.index)
    df = df.sort_values(["v", "sid"], kind="mergesort")
    labels = np.repeat(np.arange(1, n_buckets + 1), bucket_sizes(len(df), n_buckets))
    return pd.Series(labels, index=df.index, name="bucket").loc[v.index]


def dependent_sort(values: pd.Series, outer: pd.Series, n_buckets: int) -> pd.Series:
    """Sort within each outer bucket (e.g. ownership quintiles within size
    terciles)."""
    parts = []
    common = values.index.intersection(outer.dropna().index)
    for _, idx in outer.loc[common].groupby(outer.loc[common]).groups.items():
        parts.append(sort_assign(values.loc[idx], n_buckets))
    if not parts:
        return pd.Series([], dtype=int, name="bucket")
    return pd.concat(parts).loc[lambda s: ~s.index.duplicated()]


def size_groups(caps: pd.Series) -> pd.Series:
    """Tercile size labels from lagged market caps."""
    b = sort_assign(caps, 3)
    return b.map(dict(enumerate(SIZE_LABELS, start=1)))


# ---------------------------------------------------------------------------
# report tables

CELL_COLUMNS = ["panel", "row", "column", "value", "t_stat", "provenance"]


@dataclass
class ReportTable:
    """Labelled numeric cells in long form.

    Each cell carries an optional t-statistic and a provenance string naming
    the operation and inputs that produced it.
    """

    name: str
    title: str
    cells: pd.DataFrame = None

    def __post_init__(self):
        if self.cells is None:
            self.cells = pd.DataFrame(columns=CELL_COLUMNS)
        self._pending = []

    def add(self, panel, row, column, value, t_stat=np.nan, provenance=""):
        self._pending.append((str(panel), str(row), str(column), _num(value), _num(t_stat), provenance))
        return self

    def _flush(self):
        if self._pending:
            new = pd.DataFrame(self._pending, columns=CELL_COLUMNS)
            self.cells = new if self.cells.empty else pd.concat([self.cells, new], ignore_index=True)
            self._pending = []

    @property
    def frame(self) -> pd.DataFrame:
        self._flush()
        return self.cells

    def value(self, panel, row, column) -> float:
        f = self.frame
        hit = f[(f["panel"] == str(panel)) & (f["row"] == str(row)) & (f["column"] == str(column))]
        if hit.empty:
            raise KeyError((panel, row, column))
        return float(hit["value"].iloc[0])

    def t_stat(self, panel, row, column) -> float:
        f = self.frame
        hit = f[(f["panel"] == str(panel)) & (f["row"] == str(row)) & (f["column"] == str(column))]
        if hit.empty:
            raise KeyError((panel, row, column))
        return float(hit["t_stat"].iloc[0])

    def to_csv(self, path) -> None:
        self.frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")

    def render(self, digits: int = 3) -> str:
        """Aligned text grid per panel; t-statistics in brackets under the
        estimate."""
        f = self.frame
        out = [f"{self.name}: {self.title}"]
        for panel in dict.fromkeys(f["panel"]):
            p = f[f["panel"] == panel]
            cols = list(dict.fromkeys(p["column"]))
            rows = list(dict.fromkeys(p["row"]))
            lines = [["", *cols]]
            for r in rows:
                vals, ts, any_t = [r], [""], False
                for c in cols:
                    hit = p[(p["row"] == r) & (p["column"] == c)]
                    if hit.empty:
                        vals.append("")
                        ts.append("")
                        continue
                    v, t = hit["value"].iloc[0], hit["t_stat"].iloc[0]
                    vals.append("" if np.isnan(v) else f"{v:.{digits}f}")
                    if not np.isnan(t):
                        any_t = True
                        ts.append(f"[{t:.2f}]")
                    else:
                        ts.append("")
                lines.append(vals)
                if any_t:
                    lines.append(ts)
            widths = [max(len(line[i]) for line in lines) for i in range(len(cols) + 1)]
            if panel:
                out.append("")
                out.append(panel)
            for line in lines:
                out.append("  ".join(s.rjust(w) if i else s.ljust(w) for i, (s, w) in enumerate(zip(line, widths))).rstrip())
        return "\n".join(out) + "\n"


def _num(x) -> float:
    try:
        return float(x)
    except (TypeError, ValueError):
        return float("nan")


GROUP_NAMES = {"all": "All", "large": "Large", "mid": "Mid", "small": "Small"}
OWNERSHIP_LABELS = {"institution": "Institutional Ownership", "foreign": "Foreign Ownership", "local": "Local Ownership"}
REGRESSOR_LABELS = {
    **OWNERSHIP_LABELS,
    "log_size": "Size",
    "illiq_lag": "Illiq",
    "ps_lag": "PS Illiq",
    "spread_lag": "Pct Spread",
    "bm": "BM",
    "dy": "DY",
    "stdret_lag": "STDRET",
    "re_lag": "RE",
    "const": "Intercept",
}


def _sample(betas: pd.DataFrame) -> pd.DataFrame:
    if "in_sample" in betas.columns:
        return betas[betas["in_sample"].fillna(False).astype(bool)]
    return betas


def _group_frame(df: pd.DataFrame, group: str) -> pd.DataFrame:
    return df if group == "all" else df[df["size_group"] == group]


def _dist(a) -> dict:
    a = np.asarray(a, dtype=float)
    a = a[np.isfinite(a)]
    if a.size == 0:
        return {k: np.nan for k in ("mean", "median", "std", "min", "p25", "p75", "max")}
    return {
        "mean": a.mean(),
        "median": np.median(a),
        "std": a.std(ddof=1) if a.size > 1 else 0.0,
        "min": a.min(),
        "p25": np.percentile(a, 25),
        "p75": np.percentile(a, 75),
        "max": a.max(),
    }


# ---------------------------------------------------------------------------
# summary statistics


def summary_stats(characteristics: pd.DataFrame, holdings: pd.DataFrame | None = None) -> ReportTable:
    """Firm-quarter distribution of size, price and dollar volume by size
    group (panel A), of lagged ownership percentages (panel B), and first
    versus last year aggregate holdings (panel C).

    Size is the previous quarter-end cap in millions, dollar volume is in
    thousands. ``holdings`` is the firm-quarter frame with ``market_cap`` and
    lagged fractions; by default it is ``characteristics`` itself.
    """
    t = ReportTable("table1", "Summary statistics")
    df = _sample(characteristics)
    stats = ("mean", "median", "std", "min", "max")
    var = {"Size ($M)": df["lagged_market_cap"] / 1e6, "Price": df["price"], "Dollar Volume ($K)": df["dollar_volume"] / 1e3}
    for g in ("all", "large", "mid", "small"):
        m = np.ones(len(df), bool) if g == "all" else (df["size_group"] == g).to_numpy()
        for label, s in var.items():
            d = _dist(s.to_numpy()[m])
            for k in stats:
                t.add("A: Summary statistics", f"{GROUP_NAMES[g]} {label}", k, d[k], provenance=f"summary_stats({label}; {g})")
        for cat, label in (("institution", "Institutions (%)"), ("foreign", "Foreign (%)"), ("local", "Local (%)")):
            if cat not in df:
                continue
            d = _dist(100 * df[cat].to_numpy()[m])
            for k in stats:
                t.add("B: Ownership percentage", f"{GROUP_NAMES[g]} {label}", k, d[k], provenance=f"summary_stats({cat}; {g})")

    h = _sample(holdings) if holdings is not None else df
    if {"market_cap", "foreign"}.issubset(h.columns) and h["foreign"].notna().any():
        h = h.dropna(subset=["foreign"]).assign(year=lambda x: x["quarter"] // 4)
        years = sorted(h["year"].unique())
        first, last = years[0], years[-1]
        for cat, label in (("institution", "Institutions"), ("foreign", "Foreign"), ("local", "Local")):
            dollars, pct = {}, {}
            for y in (first, last):
                hy = h[h["year"] == y]
                per_q = (hy[cat] * hy["market_cap"]).groupby(hy["quarter"]).sum()
                cap_q = hy["market_cap"].groupby(hy["quarter"]).sum()
                dollars[y] = per_q.mean()
                pct[y] = 100 * (per_q / cap_q).mean()
            prov = f"summary_stats(holdings; {cat})"
            t.add("C: Changes in holdings", label, f"pct_{first}", pct[first], provenance=prov)
            t.add("C: Changes in holdings", label, f"pct_{last}", pct[last], provenance=prov)
            t.add("C: Changes in holdings", label, "pct_change", pct[last] - pct[first], provenance=prov)
            t.add("C: Changes in holdings", label, f"dollars_bn_{first}", dollars[first] / 1e9, provenance=prov)
            t.add("C: Changes in holdings", label, f"dollars_bn_{last}", dollars[last] / 1e9, provenance=prov)
            t.add("C: Changes in holdings", label, "dollar_change_pct", 100 * (dollars[last] / dollars[first] - 1), provenance=prov)
    t._flush()
    return t


# ---------------------------------------------------------------------------
# time-series behaviour of the liquidity beta


def annual_beta_table(betas: pd.DataFrame, value: str = "beta_L", name: str = "table2") -> ReportTable:
    """Per-year means of firm-year average betas for all, large and small
    firms and the large-minus-small difference."""
    t = ReportTable(name, f"Annual means of {value}")
    res = annual_beta_means(_sample(betas), value=value)
    for r in res.itertuples(index=False):
        prov = f"annual_beta_means({value}; {r.group})"
        label = GROUP_NAMES.get(r.group, "Large-Small")
        t.add("", r.year, f"{label} mean", r.mean, r.t_stat, prov)
        if r.group in GROUP_NAMES:
            t.add("", r.year, f"{label} %pos", r.pct_positive, provenance=prov)
    t._flush()
    return t


def quarterly_group_means(betas: pd.DataFrame, value: str = "beta_L") -> pd.DataFrame:
    """Quarterly cross-sectional mean of ``value`` per size group, with the
    large-minus-small spread; quarters missing either group are dropped."""
    df = _sample(betas).dropna(subset=[value, "size_group"])
    wide = df.pivot_table(index="quarter", columns="size_group", values=value, aggfunc="mean")
    for g in SIZE_LABELS:
        if g not in wide:
            wide[g] = np.nan
    wide = wide[list(SIZE_LABELS)].dropna(subset=["large", "small"])
    wide["spread"] = wide["large"] - wide["small"]
    wide.columns.name = None
    return wide


def _two_sided_p(t: float) -> float:
    return float(2 * stats.norm.sf(abs(t))) if np.isfinite(t) else np.nan


def unit_root_table(betas: pd.DataFrame, split_quarter: int | None = None, lags: int = 2) -> ReportTable:
    """Dickey-Fuller regressions with drift and trend (panel A) and
    deterministic trend regressions (panel B) on the quarterly mean beta
    of large and small firms and their spread, over the full sample and two
    subsamples split at ``split_quarter`` (default: the middle quarter)."""
    t = ReportTable("table3", "Unit-root and trend tests")
    m = quarterly_group_means(betas)
    series = {"Large": m["large"], "Small": m["small"], "Large-Small": m["spread"]}
    q = m.index.to_numpy()
    if split_quarter is None and len(q):
        split_quarter = int(q[len(q) // 2])
    periods = {"full": np.ones(len(q), bool)}
    if split_quarter is not None:
        periods["first"] = q < split_quarter
        periods["second"] = q >= split_quarter
    for label, s in series.items():
        for per, mask in periods.items():
            x = s.to_numpy()[mask]
            prov = f"dickey_fuller({label}; {per})"
            try:
                df = dickey_fuller(x, with_trend=True)
            except (InsufficientDataError, ValueError) as exc:
                log.info("unit_root_table: %s %s skipped: %s", label, per, exc)
                df = None
            if df is None or df.degenerate:
                est, tau, crit = np.nan, np.nan, np.nan
            else:
                est, tau, crit = df.rho_minus_one, df.statistic, df.critical_values[0.05]
            t.add("A: Dickey-Fuller", label, f"{per} rho-1", est, tau, prov)
            t.add("A: Dickey-Fuller", label, f"{per} crit5", crit, provenance=prov)
            prov = f"trend_regression({label}; {per})"
            try:
                tr = trend_regression(x, lags=lags)
                coef, ts = tr.coefficients, tr.t_stats
            except (InsufficientDataError, SingularDesignError) as exc:
                log.info("unit_root_table: trend %s %s skipped: %s", label, per, exc)
                coef, ts = np.full(2, np.nan), np.full(2, np.nan)
            for j, nm in enumerate(("Constant", "Time Trend")):
                t.add("B: Deterministic trend", f"{nm} {label}", f"{per} estimate", coef[j], ts[j], prov)
                t.add("B: Deterministic trend", f"{nm} {label}", f"{per} p-value", _two_sided_p(ts[j]), provenance=prov)
    t._flush()
    return t


# ---------------------------------------------------------------------------
# trading activity


def turnover_by_ownership(characteristics: pd.DataFrame, n_buckets: int = 5) -> ReportTable:
    """Quarterly mean turnover by lagged foreign and local ownership
    quintile (panel A), ownership-weighted turnover and holding period
    (panel B), and index versus non-index turnover (panel C).

    Quarterly cross-sections are averaged over time; t-statistics are on
    the quarterly series of differences.
    """
    t = ReportTable("table4", "Turnover and holding period by ownership")
    df = _sample(characteristics).dropna(subset=["turnover"])
    quarters = sorted(df["quarter"].unique())
    for cat in ("foreign", "local"):
        if cat not in df or df[cat].isna().all():
            continue
        per_q = []
        for q in quarters:
            c = df[df["quarter"] == q].set_index("stock_id")
            lab = sort_assign(c[cat], n_buckets)
            if lab.empty:
                continue
            per_q.append(c.loc[lab.index, "turnover"].groupby(lab).mean().reindex(range(1, n_buckets + 1)))
        if not per_q:
            continue
        P = pd.DataFrame(per_q)
        prov = f"turnover_by_ownership({cat}; quintile)"
        for b in range(1, n_buckets + 1):
            row = "Lo" if b == 1 else "Hi" if b == n_buckets else str(b)
            t.add("A: Turnover by ownership quintile", row, cat, 100 * P[b].mean(), provenance=prov)
        d = (P[n_buckets] - P[1]).dropna().to_numpy()
        t.add("A: Turnover by ownership quintile", "Hi-Lo", cat, 100 * d.mean(), one_sample_t(d), prov)

    w_to, hp = {}, {}
    for cat in ("foreign", "local"):
        if cat not in df or df[cat].isna().all():
            continue
        g = df.dropna(subset=[cat])
        num = (g[cat] * g["turnover"]).groupby(g["quarter"]).sum()
        den = g[cat].groupby(g["quarter"]).sum()
        w_to[cat] = num / den
        hp[cat] = 1.0 / w_to[cat]
        prov = f"turnover_by_ownership({cat}; weighted)"
        t.add("B: Ownership-weighted turnover", "Turnover (%)", cat, 100 * w_to[cat].mean(), provenance=prov)
        t.add("B: Ownership-weighted turnover", "Holding period (days)", cat, hp[cat].mean(), provenance=prov)
    if len(w_to) == 2:
        d1 = (w_to["foreign"] - w_to["local"]).dropna().to_numpy()
        d2 = (hp["foreign"] - hp["local"]).dropna().to_numpy()
        prov = "turnover_by_ownership(foreign-local; weighted)"
        t.add("B: Ownership-weighted turnover", "Turnover (%)", "foreign-local", 100 * d1.mean(), one_sample_t(d1), prov)
        t.add("B: Ownership-weighted turnover", "Holding period (days)", "foreign-local", d2.mean(), one_sample_t(d2), prov)

    if "index_member" in df and df["index_member"].any() and (~df["index_member"]).any():
        to = df.groupby(["quarter", "index_member"])["turnover"].mean().unstack()
        to = to.dropna()
        hold = 1.0 / to
        prov = "turnover_by_ownership(index)"
        for key, col in ((True, "index"), (False, "non-index")):
            t.add("C: Index membership", "Turnover (%)", col, 100 * to[key].mean(), provenance=prov)
            t.add("C: Index membership", "Holding period (days)", col, hold[key].mean(), provenance=prov)
        d1 = (to[True] - to[False]).to_numpy()
        d2 = (hold[True] - hold[False]).to_numpy()
        t.add("C: Index membership", "Turnover (%)", "diff", 100 * d1.mean(), one_sample_t(d1), prov)
        t.add("C: Index membership", "Holding period (days)", "diff", d2.mean(), one_sample_t(d2), prov)
    t._flush()
    return t


# ---------------------------------------------------------------------------
# Fama-MacBeth regressions


def fm_regression(df: pd.DataFrame, dependent: str, regressors, lags: int = 2, max_skip_fraction: float = 0.2):
    """Quarterly cross-sectional OLS of ``dependent`` on an intercept and
    ``regressors`` followed by time-series averaging with NW(``lags``)
    t-statistics. Rows with missing values are dropped per quarter."""
    cols = [dependent, *regressors]
    d = df.dropna(subset=cols)
    sections, periods = [], []
    for q, g in d.groupby("quarter", sort=True):
        X = np.column_stack([np.ones(len(g)), g[list(regressors)].to_numpy(dtype=float)])
        sections.append((g[dependent].to_numpy(dtype=float), X))
        periods.append(int(q))
    return fama_macbeth(
        sections, lags=lags, names=("const", *regressors), periods=periods, max_skip_fraction=max_skip_fraction
    )


def fm_beta_on_ownership(
    betas: pd.DataFrame,
    models,
    dependent: str = "beta_L",
    groups=("all", "large", "mid", "small"),
    name: str = "table5",
    title: str = "Fama-MacBeth regressions of liquidity beta on ownership",
    panel: str = "",
    lags: int = 2,
    table: ReportTable | None = None,
) -> ReportTable:
    """Fama-MacBeth regressions of a firm-quarter dependent variable on
    lagged characteristics, one column per model and size group.

    A model whose quarterly regressions fail (for example a constant
    ownership column) is skipped; its cells are NaN with the reason in the
    provenance column.
    """
    t = table or ReportTable(name, title)
    df = _sample(betas)
    for g in groups:
        gdf = _group_frame(df, g)
        for i, regs in enumerate(models, start=1):
            col = f"[{i}]"
            pnl = panel if len(groups) == 1 else GROUP_NAMES[g]
            prov = f"fm_regression({dependent}~{'+'.join(regs)}; {g})"
            try:
                res = fm_regression(gdf, dependent, regs, lags=lags)
            except (FamaMacBethError, InsufficientDataError) as exc:
                log.info("%s: %s skipped: %s", t.name, prov, exc)
                for nm in ("const", *regs):
                    t.add(pnl, REGRESSOR_LABELS.get(nm, nm), col, np.nan, np.nan, f"{prov}; skipped: {exc}")
                continue
            for nm, b, ts in zip(res.names, res.mean_coefficients, res.nw_t_stats):
                t.add(pnl, REGRESSOR_LABELS.get(nm, nm), col, b, ts, prov)
    t._flush()
    return t


OWNERSHIP_MODELS = (
    ("institution",),
    ("institution", "log_size", "illiq_lag"),
    ("foreign", "log_size", "illiq_lag"),
    ("local", "log_size", "illiq_lag"),
    ("foreign", "local", "log_size", "illiq_lag"),
)


def _with_control(models, old: str, new):
    new = (new,) if isinstance(new, str) else tuple(new)
    out = []
    for m in models:
        if old in m:
            i = m.index(old)
            out.append(m[:i] + new + m[i + 1 :])
    return tuple(out)


# ---------------------------------------------------------------------------
# beta spread regression


def group_spreads(betas: pd.DataFrame, value: str = "beta_L", columns=("institution", "foreign", "local", "log_size", "illiq_lag")) -> pd.DataFrame:
    """Quarterly large-minus-small differences of mean ``value`` and of the
    mean lagged characteristics."""
    df = _sample(betas).dropna(subset=["size_group"])
    out = {}
    for c in (value, *columns):
        if c not in df:
            continue
        m = df.groupby(["quarter", "size_group"])[c].mean().unstack()
        if "large" in m and "small" in m:
            out[c] = m["large"] - m["small"]
    return pd.DataFrame(out).sort_index()


SPREAD_MODELS = (
    ("institution",),
    ("institution", "log_size", "illiq_lag"),
    ("foreign",),
    ("foreign", "log_size", "illiq_lag"),
    ("local",),
    ("local", "log_size", "illiq_lag"),
    ("foreign", "local", "log_size", "illiq_lag"),
)


def spread_regression(
    spreads: pd.DataFrame, regressors, value: str = "beta_L", lags: int = 2, min_periods: int = 8
) -> RegressionResult:
    """Time-series OLS of the large-minus-small beta spread on an intercept,
    a quarter index ``1..T`` and the listed spread regressors, with NW(lags)
    covariance."""
    d = spreads.dropna(subset=[value, *regressors])
    if len(d) < min_periods:
        raise InsufficientDataError(f"{len(d)} quarters < {min_periods}")
    trend = np.arange(1, len(d) + 1, dtype=float)
    X = np.column_stack([np.ones(len(d)), trend, d[list(regressors)].to_numpy(dtype=float)])
    return ols_fit(d[value].to_numpy(dtype=float), X, lags=lags, names=("const", "trend", *regressors))


def spread_table(betas: pd.DataFrame, models=SPREAD_MODELS, lags: int = 2) -> ReportTable:
    t = ReportTable("table6", "Large-minus-small beta spread on ownership differences")
    s = group_spreads(betas)
    for i, regs in enumerate(models, start=1):
        prov = f"spread_regression(beta_L~trend+{'+'.join(regs)})"
        names = ("const", "trend", *regs)
        try:
            res = spread_regression(s, regs, lags=lags)
            vals, ts = res.coefficients, res.t_stats
        except (InsufficientDataError, SingularDesignError) as exc:
            log.info("table6: model %d skipped: %s", i, exc)
            vals, ts = np.full(len(names), np.nan), np.full(len(names), np.nan)
            prov = f"{prov}; skipped: {exc}"
        for nm, b, tt in zip(names, vals, ts):
            label = "Time Trend" if nm == "trend" else REGRESSOR_LABELS.get(nm, nm) + ("" if nm == "const" else " Spread")
            t.add("", label, f"[{i}]", b, tt, prov)
    t._flush()
    return t


# ---------------------------------------------------------------------------
# high-ownership beta sorts


def _sorted_means(df: pd.DataFrame, value: str, by: str, n_buckets: int, outer: str | None = None) -> dict:
    """Quarterly mean of ``value`` per bucket of ``by`` (optionally within
    ``outer`` groups). Returns {outer label: DataFrame quarters x buckets}."""
    res = {}
    d = df.dropna(subset=[value, by])
    for q, g in d.groupby("quarter", sort=True):
        g = g.set_index("stock_id")
        parts = [("all", g)] if outer is None else [(k, x) for k, x in g.groupby(outer, sort=True)]
        for key, x in parts:
            lab = sort_assign(x[by], n_buckets)
            if lab.empty:
                continue
            m = x.loc[lab.index, value].groupby(lab).mean().reindex(range(1, n_buckets + 1))
            res.setdefault(key, {})[int(q)] = m
    return {k: pd.DataFrame(v).T.sort_index() for k, v in res.items()}


def _hi_lo(P: pd.DataFrame, n: int, lags: int):
    d = (P[n] - P[1]).dropna().to_numpy()
    if d.size <= lags + 1:
        return (d.mean() if d.size else np.nan), np.nan
    se = mean_nw_se(d, lags)
    return d.mean(), d.mean() / se if se > 0 else np.nan


def hi_beta_sorts(betas: pd.DataFrame, by: str = "foreign", n_buckets: int = 5, lags: int = 2) -> ReportTable:
    """Mean high-ownership beta by ownership quintile, one-way (panel A) and
    within size terciles (panel B); Hi-Lo t-statistics use NW(lags) on the
    quarterly difference series."""
    t = ReportTable("table7", f"High-ownership beta by {by} ownership quintile")
    df = _sample(betas)
    labels = ["Lo", *[str(i) for i in range(2, n_buckets)], "Hi"]
    for panel, outer in (("A: One-way sort", None), ("B: Size and ownership", "size_group")):
        res = _sorted_means(df, "beta_HI", by, n_buckets, outer)
        keys = ["all"] if outer is None else [g for g in ("large", "mid", "small") if g in res]
        for k in keys:
            P = res[k]
            prov = f"hi_beta_sorts({by}; {k})"
            for b, lab in zip(range(1, n_buckets + 1), labels):
                t.add(panel, GROUP_NAMES[k], lab, P[b].mean(), provenance=prov)
            hl, ts = _hi_lo(P, n_buckets, lags)
            t.add(panel, GROUP_NAMES[k], "Hi-Lo", hl, ts, prov)
    t._flush()
    return t


# ---------------------------------------------------------------------------
# correlated-trading proxies


def correlated_trading_stats(betas: pd.DataFrame) -> ReportTable:
    """Pooled distribution of beta_L, beta_TO, dollar volume ($K), turnover
    (%) and return autocorrelation (%) for index members, all firms,
    non-members, and the upper and lower halves of non-members by lagged
    cap."""
    t = ReportTable("table9", "Correlated-trading proxies by index membership")
    df = _sample(betas).copy()
    df["index_member"] = df["index_member"].fillna(False).astype(bool)
    non = df[~df["index_member"]]
    half = pd.Series(index=non.index, dtype=object)
    for _, g in non.dropna(subset=["lagged_market_cap"]).groupby("quarter"):
        lab = sort_assign(g.set_index("stock_id")["lagged_market_cap"], 2)
        half.loc[g.index] = np.where(lab.loc[g["stock_id"]].to_numpy() == 2, "medium", "small")
    groups = {
        "Index": df[df["index_member"]],
        "All": df,
        "Non-index": non,
        "Non-index medium": non[half == "medium"],
        "Non-index small": non[half == "small"],
    }
    variables = {
        "beta_L": ("beta_L", 1.0),
        "beta_TO": ("beta_TO", 1.0),
        "Dollar Volume ($K)": ("dollar_volume", 1e-3),
        "Turnover (%)": ("turnover", 100.0),
        "Autocorrelation (%)": ("autocorr", 100.0),
    }
    for gname, g in groups.items():
        for label, (col, scale) in variables.items():
            if col not in g:
                continue
            d = _dist(g[col].to_numpy(dtype=float) * scale)
            for k in ("mean", "median", "min", "p25", "p75", "max", "std"):
                t.add(gname, label, k, d[k], provenance=f"correlated_trading_stats({col}; {gname})")
    t._flush()
    return t


# ---------------------------------------------------------------------------
# figure series


def figure_series(market: pd.DataFrame, betas: pd.DataFrame) -> dict[str, pd.DataFrame]:
    """Quarterly series: standard deviation of the market illiquidity change
    (fig1), mean beta_L of large and small firms and their spread (fig2),
    mean beta_HI and the percentage positive (fig3)."""
    m = market.dropna(subset=["delta_illiq_mkt"])
    fig1 = m.groupby("quarter", sort=True)["delta_illiq_mkt"].std(ddof=1).rename("sd_delta_illiq_mkt").reset_index()
    g = quarterly_group_means(betas)
    fig2 = pd.DataFrame(
        {"quarter": g.index.to_numpy(), "beta_L_large": g["large"].to_numpy(), "beta_L_small": g["small"].to_numpy(), "spread": g["spread"].to_numpy()}
    )
    b = _sample(betas).dropna(subset=["beta_HI"])
    grp = b.groupby("quarter", sort=True)["beta_HI"]
    fig3 = pd.DataFrame({"beta_HI_mean": grp.mean(), "pct_positive": grp.apply(lambda s: 100.0 * (s > 0).mean())}).reset_index()
    for f in (fig1, fig2, fig3):
        f["quarter"] = [quarter_label(q) for q in f["quarter"]]
    return {"fig1": fig1, "fig2": fig2, "fig3": fig3}


# ---------------------------------------------------------------------------
# full report set

TABLE_NAMES = (
    "table1",
    "table2",
    "table3",
    "table4",
    "table5",
    "table6",
    "table7",
    "table8",
    "table9",
    "tableA1",
    "tableA2",
    "tableA3",
    "tableA4",
    "tableA5",
)
FIGURE_NAMES = ("fig1", "fig2", "fig3")
REPORT_NAMES = TABLE_NAMES + FIGURE_NAMES

# robustness runs that need their own estimation pass
VARIANT_RUNS = {
    "tableA1": {"equal": {"weighting": "equal"}},
    "tableA2": {
        "A: 2 cents minimum price": {"min_price": 0.02},
        "B: 5 cents minimum price": {"min_price": 0.05},
        "C: Minimum 40 observations": {"min_obs_per_quarter": 40},
    },
}

HI_MODELS_ALL = (("foreign",), ("foreign", "log_size", "illiq_lag"))
EXTRA_CONTROLS = ("bm", "dy", "stdret_lag", "re_lag")
AUTOCORR_MODELS = (
    ("foreign",),
    ("foreign", "log_size"),
    ("foreign", "log_size", "illiq_lag"),
    ("foreign", "log_size", "illiq_lag", "local"),
)


def build_reports(
    betas: pd.DataFrame,
    market: pd.DataFrame,
    variants: dict | None = None,
    select=REPORT_NAMES,
    lags: int = 2,
) -> dict:
    """Every requested table (:class:`ReportTable`) and figure series
    (DataFrame) keyed by report name.

    ``variants`` maps a robustness table name to ``{panel: beta panel}``
    from the extra estimation runs listed in ``VARIANT_RUNS``.
    """
    variants = variants or {}
    out = {}
    want = set(select)
    if "table1" in want:
        out["table1"] = summary_stats(betas)
    if "table2" in want:
        out["table2"] = annual_beta_table(betas)
    if "table3" in want:
        out["table3"] = unit_root_table(betas, lags=lags)
    if "table4" in want:
        out["table4"] = turnover_by_ownership(betas)
    if "table5" in want:
        out["table5"] = fm_beta_on_ownership(betas, OWNERSHIP_MODELS, lags=lags)
    if "table6" in want:
        out["table6"] = spread_table(betas, lags=lags)
    if "table7" in want:
        out["table7"] = hi_beta_sorts(betas, lags=lags)
    if "table8" in want:
        out["table8"] = fm_beta_on_ownership(
            betas,
            HI_MODELS_ALL,
            dependent="beta_HI",
            name="table8",
            title="Fama-MacBeth regressions of high-ownership beta on foreign ownership",
            lags=lags,
        )
    if "table9" in want:
        out["table9"] = correlated_trading_stats(betas)
    for name, runs in VARIANT_RUNS.items():
        if name not in want:
            continue
        t = ReportTable(name, "Liquidity beta on ownership, robustness run")
        for panel in runs:
            panel_betas = variants.get(name, {}).get(panel)
            if panel_betas is None:
                log.warning("%s: variant run %r missing", name, panel)
                continue
            fm_beta_on_ownership(panel_betas, OWNERSHIP_MODELS, groups=("all",), panel=panel if len(runs) > 1 else "", lags=lags, table=t)
        out[name] = t
    if "tableA3" in want:
        t = ReportTable("tableA3", "Liquidity beta on ownership with alternative illiquidity controls")
        base = OWNERSHIP_MODELS[1:]
        for panel, ctrl in (("A: Pastor-Stambaugh illiquidity", "ps_lag"), ("B: Percentage spread", "spread_lag")):
            fm_beta_on_ownership(betas, _with_control(base, "illiq_lag", ctrl), groups=("all",), panel=panel, lags=lags, table=t)
        out["tableA3"] = t
    if "tableA4" in want:
        models = tuple(m + EXTRA_CONTROLS for m in OWNERSHIP_MODELS[1:])
        out["tableA4"] = fm_beta_on_ownership(
            betas, models, groups=("all",), name="tableA4", title="Liquidity beta on ownership with additional controls", lags=lags
        )
    if "tableA5" in want:
        out["tableA5"] = fm_beta_on_ownership(
            betas,
            AUTOCORR_MODELS,
            dependent="autocorr",
            groups=("all",),
            name="tableA5",
            title="Return autocorrelation on foreign ownership",
            lags=lags,
        )
    if want & set(FIGURE_NAMES):
        figs = figure_series(market, betas)
        out.update({k: v for k, v in figs.items() if k in want})
    return out
