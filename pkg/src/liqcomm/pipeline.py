"""From loaded bars and ownership to the firm-quarter beta panel and the
lagged characteristics used by the report tables."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .analytics import size_groups
from .commonality import QuarterInputs, estimate_all, turnover_change
from .illiq import hi_portfolio_loo, leave_one_out_mean, pct_change_loo, to_dense, top_fraction_members, weighted_mean
from .ingest import FilterConfig, FirmQuarterPanel, TickSchedule, attach_fractions, build_firm_quarters, quarter_code

log = logging.getLogger(__name__)

OWNERSHIP_COLUMNS = {"institution": "institution", "foreign": "foreign_institution", "local": "local_institution"}


@dataclass(frozen=True)
class EstimationConfig:
    filters: FilterConfig = field(default_factory=FilterConfig)
    schedule: TickSchedule = field(default_factory=TickSchedule)
    weighting: str = "value"
    hi_category: str = "foreign"
    hi_top_fraction: float = 0.1
    leave_one_out: bool = True
    exclude_from_hi: bool = True
    controls: bool = True
    max_workers: int = 1

    def __post_init__(self):
        if self.weighting not in ("value", "equal"):
            raise ValueError(f"weighting must be 'value' or 'equal', got {self.weighting!r}")
        if self.hi_category not in OWNERSHIP_COLUMNS:
            raise ValueError(f"hi_category must be one of {sorted(OWNERSHIP_COLUMNS)}")
        if not 0 < self.hi_top_fraction <= 1:
            raise ValueError("hi_top_fraction must lie in (0, 1]")


@dataclass
class PipelineResult:
    panel: FirmQuarterPanel
    market: pd.DataFrame
    betas: pd.DataFrame
    characteristics: pd.DataFrame
    ownership_lags: pd.DataFrame
    config: EstimationConfig


def ownership_lags(ownership: pd.DataFrame) -> pd.DataFrame:
    """Fractions per stock at the end of the previous quarter.

    Uses the latest snapshot dated inside quarter ``q - 1``; row ``quarter``
    is the quarter in which the lagged value is used.
    """
    cols = ["stock_id", "quarter", *OWNERSHIP_COLUMNS]
    if ownership is None or ownership.empty:
        return pd.DataFrame(columns=cols)
    o = ownership.assign(quarter=quarter_code(ownership["date"]) + 1)
    o = o.sort_values(["stock_id", "quarter", "date"], kind="mergesort")
    last = o.groupby(["stock_id", "quarter"], sort=True)["date"].transform("max")
    o = o[o["date"] == last]
    wide = o.pivot_table(index=["stock_id", "quarter"], columns="category", values="fraction", aggfunc="last")
    out = pd.DataFrame(index=wide.index)
    for short, cat in OWNERSHIP_COLUMNS.items():
        out[short] = wide[cat] if cat in wide.columns else np.nan
    return out.reset_index()[cols]


def _quarter_rows(dates: pd.DatetimeIndex):
    qc = quarter_code(dates)
    out = {}
    for q in np.unique(qc):
        idx = np.flatnonzero(qc == q)
        out[int(q)] = (idx[0], idx[-1] + 1)
    return out


def run_pipeline(
    bars: pd.DataFrame,
    ownership: pd.DataFrame | None,
    index_members=None,
    config: EstimationConfig | None = None,
) -> PipelineResult:
    cfg = config or EstimationConfig()
    panel = build_firm_quarters(bars, cfg.filters, cfg.schedule)
    b = panel.bars
    equal = cfg.weighting == "equal"
    dates = pd.DatetimeIndex(np.sort(b["date"].unique()))
    stocks = np.sort(b["stock_id"].unique())

    if ownership is not None and len(ownership) and "fraction" not in ownership.columns:
        ownership = attach_fractions(ownership, b)
    own = ownership_lags(ownership)

    days = panel.days.assign(weight=panel.days["prev_cap"])
    dy = to_dense(days, ["delta_illiq", "weight", "ret"], dates, stocks)
    y, wy = dy["delta_illiq"], dy["weight"]
    ret_sq = dy["ret"] ** 2
    db = to_dense(b, ["ret", "prev_cap", "turnover", "illiq"], dates, stocks)
    ret, pcap = db["ret"], db["prev_cap"]

    if cfg.leave_one_out:
        mkt = leave_one_out_mean(y, wy, equal=equal)
        rmkt = leave_one_out_mean(ret, pcap, equal=equal)
        _, tmkt = pct_change_loo(db["turnover"], pcap, equal=equal)
    else:
        mkt = np.repeat(weighted_mean(y, wy, equal=equal)[:, None], len(stocks), axis=1)
        rmkt = np.repeat(weighted_mean(ret, pcap, equal=equal)[:, None], len(stocks), axis=1)
        tfull, _ = pct_change_loo(db["turnover"], pcap, equal=equal)
        tmkt = np.repeat(tfull[:, None], len(stocks), axis=1)
    tchg = turnover_change(db["turnover"])

    rows = _quarter_rows(dates)
    own_by_q = {q: g.set_index("stock_id")[cfg.hi_category] for q, g in own.groupby("quarter")}
    hi_full = np.full(len(dates), np.nan)
    hi_members = {}
    sample_q = set(int(q) for q in panel.days["quarter"].unique())
    quarters = []
    for q, (r0, r1) in rows.items():
        hi = None
        frac = own_by_q.get(q)
        if frac is not None and frac.notna().any():
            members = top_fraction_members(frac, cfg.hi_top_fraction)
            hi_members[q] = members
            mask = np.isin(stocks, members)
            lo = max(r0 - 1, 0)
            full, loo = hi_portfolio_loo(db["illiq"][lo:r1], pcap[lo:r1], mask)
            if r0 == 0:
                full = np.concatenate([[np.nan], full])
                loo = np.vstack([np.full((1, len(stocks)), np.nan), loo])
            hi_full[r0:r1] = full[1:]
            if cfg.exclude_from_hi:
                hi = loo[1:]
            else:
                hi = np.repeat(full[1:, None], len(stocks), axis=1)
        if q not in sample_q:
            continue
        sl = slice(r0, r1)
        quarters.append(
            QuarterInputs(
                quarter=q,
                stocks=stocks,
                y=y[sl],
                ret_sq=ret_sq[sl],
                mkt=mkt[sl],
                ret_mkt=rmkt[sl],
                hi=hi,
                turnover_chg=tchg[sl],
                turnover_mkt=tmkt[sl],
                returns=ret[sl],
                in_sample=np.isfinite(y[sl]).any(axis=0),
            )
        )
    betas = estimate_all(quarters, cfg.filters.min_obs_per_quarter, cfg.controls, cfg.max_workers)

    market = pd.DataFrame(
        {
            "date": dates,
            "quarter": quarter_code(dates),
            "delta_illiq_mkt": weighted_mean(y, wy, equal=equal),
            "ret_mkt": weighted_mean(ret, pcap, equal=equal),
            "turnover_chg_mkt": pct_change_loo(db["turnover"], pcap, equal=equal)[0],
            "delta_illiq_hi": hi_full,
            "n_stocks": np.isfinite(y).sum(axis=1),
        }
    )
    chars = characteristics(panel, own, index_members)
    betas = betas.merge(chars, on=["stock_id", "quarter"], how="left")
    return PipelineResult(panel, market, betas, chars, own, cfg)


def characteristics(panel: FirmQuarterPanel, own: pd.DataFrame, index_members=None) -> pd.DataFrame:
    """Firm-quarter characteristics; ``*_lag`` values come from the previous
    quarter, sizes from the previous quarter-end cap."""
    b = panel.bars
    g = b.groupby(["stock_id", "quarter"], sort=True)
    logret = np.log1p(b["ret"])
    spread_pct = b["quoted_spread"] / b["close"] if "quoted_spread" in b.columns else pd.Series(np.nan, index=b.index)
    q = pd.DataFrame(
        {
            "illiq_mean": g["illiq"].mean(),
            "ret_std": g["ret"].std(ddof=1),
            "log_ret": logret.groupby([b["stock_id"], b["quarter"]]).sum(),
            "spread_pct": spread_pct.groupby([b["stock_id"], b["quarter"]]).mean(),
            "ps_illiq": g["ps_illiq"].mean() if "ps_illiq" in b.columns else np.nan,
            "turnover": g["turnover"].mean(),
            "price": g["close"].mean(),
            "dollar_volume": g["dollar_volume"].mean(),
            "market_cap": g["market_cap"].mean(),
        }
    ).reset_index()
    lag = q[["stock_id", "quarter", "illiq_mean", "ret_std", "log_ret", "spread_pct", "ps_illiq", "turnover"]].copy()
    lag["quarter"] += 1
    lag = lag.rename(
        columns={
            "illiq_mean": "illiq_lag",
            "ret_std": "stdret_lag",
            "log_ret": "re_lag",
            "spread_pct": "spread_lag",
            "ps_illiq": "ps_lag",
            "turnover": "turnover_lag",
        }
    )
    out = q.merge(lag, on=["stock_id", "quarter"], how="left")
    out = out.merge(panel.quarter_caps, on=["stock_id", "quarter"], how="left")
    out["log_size"] = np.log(out["lagged_market_cap"] / 1e6)

    # book-to-market and dividend yield as of the previous December
    year_end = []
    for col in ("book_to_market", "dividend_yield"):
        if col in b.columns:
            year_end.append(col)
    if year_end:
        dec = b.assign(year=b["date"].dt.year)
        dec = dec[dec["date"].dt.month == 12].groupby(["stock_id", "year"], sort=True)[year_end].last().reset_index()
        dec["year"] += 1
        out["year"] = out["quarter"] // 4
        out = out.merge(dec, on=["stock_id", "year"], how="left").drop(columns="year")
        if "book_to_market" in out:
            out["bm"] = np.log1p(out.pop("book_to_market"))
        if "dividend_yield" in out:
            out["dy"] = out.pop("dividend_yield")
    for c in ("bm", "dy"):
        if c not in out:
            out[c] = np.nan

    out = out.merge(own, on=["stock_id", "quarter"], how="left")
    members = set(index_members) if index_members is not None else set()
    out["index_member"] = out["stock_id"].isin(members)

    # size terciles among sample firm-quarters with a lagged cap
    sample = panel.days[["stock_id", "quarter"]].drop_duplicates()
    s = sample.merge(out[["stock_id", "quarter", "lagged_market_cap"]], on=["stock_id", "quarter"], how="left")
    s = s.dropna(subset=["lagged_market_cap"])
    labels = []
    for qq, grp in s.groupby("quarter", sort=True):
        lab = size_groups(grp.set_index("stock_id")["lagged_market_cap"])
        labels.append(pd.DataFrame({"stock_id": lab.index, "quarter": qq, "size_group": lab.to_numpy()}))
    if labels:
        out = out.merge(pd.concat(labels, ignore_index=True), on=["stock_id", "quarter"], how="left")
    else:
        out["size_group"] = np.nan
    out["in_sample"] = pd.MultiIndex.from_frame(out[["stock_id", "quarter"]]).isin(
        pd.MultiIndex.from_frame(sample)
    )
    return out.sort_values(["stock_id", "quarter"], kind="mergesort").reset_index(drop=True)
