"""Loading, validation and sample filters for daily bar and ownership panels.

Filter order inside :func:`build_firm_quarters` is fixed:

1. tick-regime crossing filter
2. minimum close price
3. daily Amihud measure and its log change (undefined days dropped)
4. removal of the extreme log changes (both tails)
5. minimum valid observations per firm-quarter
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from datetime import date as Date
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

CATEGORIES = ("institution", "foreign_institution", "local_institution")
CATEGORY_ALIASES = {
    "institution": "institution",
    "institutions": "institution",
    "foreign": "foreign_institution",
    "foreign_institution": "foreign_institution",
    "local": "local_institution",
    "local_institution": "local_institution",
}

BAR_REQUIRED = ("stock_id", "date", "close", "dollar_volume", "shares_outstanding")
BAR_OPTIONAL = (
    "ret",
    "quoted_spread",
    "high",
    "low",
    "volume",
    "ps_illiq",
    "book_to_market",
    "dividend_yield",
)
OWNERSHIP_REQUIRED = ("stock_id", "date", "category", "shares_held")

# Row-level reason codes. Loader rejections and pipeline drops share one namespace.
MISSING_VALUE = "MISSING_VALUE"
BAD_NUMBER = "BAD_NUMBER"
BAD_DATE = "BAD_DATE"
NONPOSITIVE_CLOSE = "NONPOSITIVE_CLOSE"
NONPOSITIVE_SHARES = "NONPOSITIVE_SHARES"
NEGATIVE_VOLUME = "NEGATIVE_VOLUME"
NEGATIVE_SPREAD = "NEGATIVE_SPREAD"
DUPLICATE_KEY = "DUPLICATE_KEY"
BAD_CATEGORY = "BAD_CATEGORY"
NEGATIVE_HOLDING = "NEGATIVE_HOLDING"
FRACTION_ABOVE_ONE = "FRACTION_ABOVE_ONE"
CATEGORY_SUM_EXCEEDS_PARENT = "CATEGORY_SUM_EXCEEDS_PARENT"

TICK_CROSS = "TICK_CROSS"
BELOW_MIN_PRICE = "BELOW_MIN_PRICE"
ILLIQ_UNDEFINED = "ILLIQ_UNDEFINED"
NO_PREDECESSOR = "NO_PREDECESSOR"
CHAIN_BREAK = "CHAIN_BREAK"
WINSORIZED = "WINSORIZED"
MIN_OBS = "MIN_OBS"


class SchemaError(ValueError):
    pass


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DailyBar:
    stock_id: str
    date: Date
    close: float
    ret: float
    dollar_volume: float
    shares_outstanding: float
    quoted_spread: float | None = None
    high: float | None = None
    low: float | None = None

    def __post_init__(self):
        if not self.close > 0:
            raise ValueError("close must be positive")
        if not self.shares_outstanding > 0:
            raise ValueError("shares_outstanding must be positive")
        if not self.dollar_volume >= 0:
            raise ValueError("dollar_volume must be non-negative")
        if self.quoted_spread is not None and not self.quoted_spread >= 0:
            raise ValueError("quoted_spread must be non-negative")

    @property
    def market_cap(self) -> float:
        return self.close * self.shares_outstanding


@dataclass(frozen=True)
class OwnershipSnapshot:
    stock_id: str
    date: Date
    category: str
    shares_held: float

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if not self.shares_held >= 0:
            raise ValueError("shares_held must be non-negative")

    def fraction(self, shares_outstanding: float) -> float:
        return self.shares_held / shares_outstanding


@dataclass(frozen=True)
class TickSchedule:
    """Price bands as ``(upper_bound, tick_size)`` pairs; the last band is
    open-ended (``upper_bound = inf``)."""

    bands: tuple[tuple[float, float], ...] = ((0.10, 0.001), (2.00, 0.005), (math.inf, 0.01))

    def __post_init__(self):
        bounds = [b for b, _ in self.bands]
        if not bounds or any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise ValueError("tick schedule bounds must be strictly increasing")
        if bounds[-1] != math.inf:
            raise ValueError("tick schedule must cover all positive prices")
        if any(not t > 0 for _, t in self.bands):
            raise ValueError("tick sizes must be positive")

    @classmethod
    def from_pairs(cls, pairs) -> "TickSchedule":
        bands = tuple((math.inf if b is None else float(b), float(t)) for b, t in pairs)
        return cls(bands)

    def regime(self, price):
        """Index of the band containing ``price`` (bands are [lo, hi))."""
        edges = np.array([b for b, _ in self.bands[:-1]])
        return np.searchsorted(edges, np.asarray(price, dtype=float), side="right")

    def tick_size(self, price) -> np.ndarray:
        ticks = np.array([t for _, t in self.bands])
        return ticks[self.regime(price)]


@dataclass(frozen=True)
class FilterConfig:
    min_price: float = 0.01
    min_obs_per_quarter: int = 25
    winsor_fraction: float = 0.01
    winsor_scope: str = "pooled_full_sample"
    tick_filter_enabled: bool = True
    chain: str = "reconnect"

    def __post_init__(self):
        if not 0 <= self.winsor_fraction < 0.5:
            raise ValueError("winsor_fraction must lie in [0, 0.5)")
        if self.min_obs_per_quarter < 2:
            raise ValueError("min_obs_per_quarter must be >= 2")
        if self.winsor_scope not in ("pooled_full_sample", "per_quarter"):
            raise ValueError(f"unknown winsor_scope {self.winsor_scope!r}")
        if self.chain not in ("reconnect", "break"):
            raise ValueError(f"unknown chain mode {self.chain!r}")


@dataclass
class LoadResult:
    frame: pd.DataFrame
    rejections: pd.DataFrame

    @property
    def n_rows(self) -> int:
        return len(self.frame) + self.rejections["line"].nunique()


@dataclass
class FirmQuarterSeries:
    stock_id: str
    quarter: int
    days: pd.DataFrame
    lagged_market_cap: float | None


@dataclass
class FirmQuarterPanel:
    """Output of :func:`build_firm_quarters`.

    ``days`` holds the surviving firm-days, ``drops`` one row per removed
    firm-day with its reason code, ``bars`` the full enriched input (used for
    market returns, turnover and portfolio levels), and ``quarter_caps`` the
    previous-quarter-end market cap per firm-quarter.
    """

    days: pd.DataFrame
    drops: pd.DataFrame
    bars: pd.DataFrame
    quarter_caps: pd.DataFrame
    filters: FilterConfig
    flags: dict = field(default_factory=dict)

    def firm_quarters(self) -> Iterator[FirmQuarterSeries]:
        caps = self.quarter_caps.set_index(["stock_id", "quarter"])["lagged_market_cap"]
        for (sid, q), grp in self.days.groupby(["stock_id", "quarter"], sort=True):
            cap = caps.get((sid, q), np.nan)
            yield FirmQuarterSeries(sid, int(q), grp.reset_index(drop=True), None if pd.isna(cap) else float(cap))


# ---------------------------------------------------------------------------
# quarters
# ---------------------------------------------------------------------------


def quarter_code(dates) -> np.ndarray:
    d = pd.DatetimeIndex(dates)
    return (d.year * 4 + (d.month - 1) // 3).to_numpy(dtype=np.int64)


def quarter_label(code: int) -> str:
    code = int(code)
    return f"{code // 4}Q{code % 4 + 1}"


def parse_quarter(label: str) -> int:
    year, q = str(label).upper().split("Q")
    return int(year) * 4 + int(q) - 1


# ---------------------------------------------------------------------------
# loaders
# ---------------------------------------------------------------------------


def _rejections(rows) -> pd.DataFrame:
    df = pd.DataFrame(rows, columns=["line", "reason_code", "detail"])
    return df.sort_values(["line", "reason_code"], kind="mergesort").reset_index(drop=True)


def _read(path, schema: Mapping[str, str] | None, required, optional) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    schema = dict(schema or {})
    rename = {}
    for canon in (*required, *optional):
        src = schema.get(canon, canon)
        if src in raw.columns:
            rename[src] = canon
    missing = [c for c in required if schema.get(c, c) not in raw.columns]
    if missing:
        raise SchemaError(f"{path.name}: missing required column(s) {missing}")
    df = raw[list(rename)].rename(columns=rename)
    df.index = np.arange(2, len(df) + 2)  # file line numbers (header is line 1)
    return df


def _parse_numeric(df, cols, required, rejects):
    bad = pd.Series(False, index=df.index)
    out = {}
    for c in cols:
        if c not in df.columns:
            continue
        s = df[c].str.strip()
        empty = s.eq("") | s.str.lower().isin(["na", "nan", "null", "none"])
        num = pd.to_numeric(s.where(~empty), errors="coerce")
        unparseable = num.isna() & ~empty
        # to_numeric's fast parser can be off by one ulp; reparse exactly
        ok = num.notna()
        num = num.astype(float)
        num[ok] = s[ok].astype(float)
        if c in required:
            for line in df.index[empty & ~bad]:
                rejects.append((int(line), MISSING_VALUE, c))
            bad |= empty
        for line in df.index[unparseable & ~bad]:
            rejects.append((int(line), BAD_NUMBER, f"{c}={df.at[line, c]!r}"))
        bad |= unparseable
        out[c] = num
    return out, bad


def _parse_dates(df, rejects, bad):
    s = df["date"].str.strip()
    parsed = pd.to_datetime(s, format="%Y-%m-%d", errors="coerce")
    badd = parsed.isna() & ~bad
    for line in df.index[badd]:
        rejects.append((int(line), BAD_DATE, repr(df.at[line, "date"])))
    return parsed, bad | badd


def _reject_duplicates(frame, keys, rejects, strict):
    dup_all = frame.duplicated(keys, keep=False)
    if not dup_all.any():
        return frame
    if strict:
        drop = dup_all
    else:
        drop = frame.duplicated(keys, keep="first")
    for line in frame.index[drop]:
        detail = "/".join(str(frame.at[line, k].date() if k == "date" else frame.at[line, k]) for k in keys)
        rejects.append((int(line), DUPLICATE_KEY, detail))
    log.warning("%d duplicate-key rows rejected (strict=%s)", int(drop.sum()), strict)
    return frame[~drop]


def load_daily_bars(path, schema: Mapping[str, str] | None = None, strict: bool = True) -> LoadResult:
    """Parse a bar CSV into a validated frame plus a rejection report.

    Every data line ends up either in ``frame`` or in ``rejections`` (with its
    file line number). Duplicate ``(stock_id, date)`` keys: strict mode rejects
    all copies, lenient mode keeps the first.
    """
    df = _read(path, schema, BAR_REQUIRED, BAR_OPTIONAL)
    rejects: list = []
    sid = df["stock_id"].str.strip()
    bad = sid.eq("")
    for line in df.index[bad]:
        rejects.append((int(line), MISSING_VALUE, "stock_id"))
    numeric_cols = [c for c in ("close", "dollar_volume", "shares_outstanding", *BAR_OPTIONAL) if c in df.columns]
    nums, bad_num = _parse_numeric(df, numeric_cols, BAR_REQUIRED, rejects)
    bad_num &= ~bad
    bad |= bad_num
    dates, bad = _parse_dates(df, rejects, bad)

    checks = [
        (NONPOSITIVE_CLOSE, ~(nums["close"] > 0), "close"),
        (NONPOSITIVE_SHARES, ~(nums["shares_outstanding"] > 0), "shares_outstanding"),
        (NEGATIVE_VOLUME, ~(nums["dollar_volume"] >= 0), "dollar_volume"),
    ]
    if "quoted_spread" in nums:
        checks.append((NEGATIVE_SPREAD, nums["quoted_spread"] < 0, "quoted_spread"))
    for code, mask, col in checks:
        hit = mask & ~bad
        for line in df.index[hit]:
            rejects.append((int(line), code, f"{col}={df.at[line, col]}"))
        bad |= hit

    frame = pd.DataFrame({"stock_id": sid, "date": dates})
    for c, s in nums.items():
        frame[c] = s.astype(float)
    frame = frame[~bad]
    frame = _reject_duplicates(frame, ["stock_id", "date"], rejects, strict)
    frame = frame.sort_values(["stock_id", "date"], kind="mergesort")
    frame = frame.reset_index(names="line")
    if "ret" not in frame.columns:
        frame["ret"] = np.nan
    missing_ret = frame["ret"].isna()
    if missing_ret.any():
        # close-to-close simple return; dividend adjustment is the supplier's job
        prev = frame.groupby("stock_id", sort=False)["close"].shift(1)
        frame.loc[missing_ret, "ret"] = (frame["close"] / prev - 1.0)[missing_ret]
    return LoadResult(frame, _rejections(rejects))


def load_ownership(
    path,
    schema: Mapping[str, str] | None = None,
    bars: pd.DataFrame | None = None,
    strict: bool = True,
) -> LoadResult:
    """Parse an ownership CSV (long format: one row per stock/date/category).

    With ``bars`` supplied the snapshot is joined to the latest bar on or
    before its date, ``fraction`` is added, and fractions above one are
    rejected. Foreign plus local holdings above the institution total (by more
    than one share) reject all rows of that stock-date.
    """
    df = _read(path, schema, OWNERSHIP_REQUIRED, ())
    rejects: list = []
    sid = df["stock_id"].str.strip()
    bad = sid.eq("")
    for line in df.index[bad]:
        rejects.append((int(line), MISSING_VALUE, "stock_id"))
    cat = df["category"].str.strip().str.lower().map(CATEGORY_ALIASES)
    badc = cat.isna() & ~bad
    for line in df.index[badc]:
        rejects.append((int(line), BAD_CATEGORY, repr(df.at[line, "category"])))
    bad |= badc
    nums, bad_num = _parse_numeric(df, ["shares_held"], ["shares_held"], rejects)
    bad |= bad_num & ~bad
    dates, bad = _parse_dates(df, rejects, bad)
    neg = (nums["shares_held"] < 0) & ~bad
    for line in df.index[neg]:
        rejects.append((int(line), NEGATIVE_HOLDING, f"shares_held={df.at[line, 'shares_held']}"))
    bad |= neg

    frame = pd.DataFrame({"stock_id": sid, "date": dates, "category": cat, "shares_held": nums["shares_held"]})
    frame = frame[~bad]
    frame = _reject_duplicates(frame, ["stock_id", "date", "category"], rejects, strict)

    wide = frame.pivot(index=["stock_id", "date"], columns="category", values="shares_held")
    if {"institution", "foreign_institution", "local_institution"} <= set(wide.columns):
        excess = wide["foreign_institution"] + wide["local_institution"] - wide["institution"]
        inconsistent = excess[excess > 1.0].index
        if len(inconsistent):
            keys = pd.MultiIndex.from_frame(frame[["stock_id", "date"]])
            hit = keys.isin(inconsistent)
            for line in frame.index[hit]:
                rejects.append((int(line), CATEGORY_SUM_EXCEEDS_PARENT, f"{frame.at[line, 'stock_id']}"))
            frame = frame[~hit]

    if bars is not None:
        frame = attach_fractions(frame, bars)
        over = frame["fraction"] > 1.0
        for line in frame.index[over]:
            rejects.append((int(line), FRACTION_ABOVE_ONE, f"fraction={frame.at[line, 'fraction']:.6g}"))
        frame = frame[~over]

    frame = frame.sort_values(["stock_id", "date", "category"], kind="mergesort").reset_index(names="line")
    return LoadResult(frame, _rejections(rejects))


def attach_fractions(ownership: pd.DataFrame, bars: pd.DataFrame) -> pd.DataFrame:
    """Add ``shares_outstanding``, ``close`` and ``fraction`` from the latest bar
    on or before each snapshot date."""
    own = ownership.copy()
    own["_line"] = own.index
    left = own.sort_values("date", kind="mergesort")
    right = bars[["stock_id", "date", "shares_outstanding", "close"]].sort_values("date", kind="mergesort")
    merged = pd.merge_asof(left, right, on="date", by="stock_id", direction="backward")
    merged.index = merged.pop("_line")
    merged = merged.loc[own.index]
    merged["fraction"] = merged["shares_held"] / merged["shares_outstanding"]
    return merged


def load_index_members(path) -> frozenset[str]:
    df = pd.read_csv(path, dtype=str)
    if "stock_id" not in df.columns:
        raise SchemaError("index file needs a stock_id column")
    return frozenset(df["stock_id"].str.strip())


# ---------------------------------------------------------------------------
# filters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TickDecision:
    keep: bool
    unfilterable: bool = False


def tick_cross(prev_close, close, schedule: TickSchedule, high=None, low=None) -> np.ndarray:
    """Vectorised crossing test. Close-only: regimes of consecutive closes
    differ. With intraday high/low, the span from the previous close through
    the day's low/high/close is tested instead."""
    prev_close = np.asarray(prev_close, dtype=float)
    close = np.asarray(close, dtype=float)
    cross = schedule.regime(prev_close) != schedule.regime(close)
    if high is not None and low is not None:
        high = np.asarray(high, dtype=float)
        low = np.asarray(low, dtype=float)
        ok = np.isfinite(high) & np.isfinite(low)
        lo = np.fmin(np.fmin(low, prev_close), close)
        hi = np.fmax(np.fmax(high, prev_close), close)
        intraday = schedule.regime(lo) != schedule.regime(hi)
        cross = np.where(ok, intraday | cross, cross)
    return cross & np.isfinite(prev_close)


def tick_filter(prev_bar, bar, schedule: TickSchedule | None = None) -> TickDecision:
    """Keep/drop decision for ``bar`` given the stock's previous bar.

    Bars may be :class:`DailyBar` instances or mappings with ``close`` (and
    optionally ``high``/``low``). No predecessor: kept, flagged unfilterable.
    """
    schedule = schedule or TickSchedule()
    if prev_bar is None:
        return TickDecision(True, True)

    def get(obj, name):
        return obj.get(name) if isinstance(obj, Mapping) else getattr(obj, name, None)

    hi, lo = get(bar, "high"), get(bar, "low")
    cross = tick_cross(
        [get(prev_bar, "close")],
        [get(bar, "close")],
        schedule,
        None if hi is None else [hi],
        None if lo is None else [lo],
    )
    return TickDecision(not bool(cross[0]))


def _tail_count(fraction: float, n: int) -> int:
    return math.ceil(fraction * n - 1e-9)


def winsorize_delta_illiq(observations: pd.DataFrame, config: FilterConfig) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Remove the ``ceil(f*N)`` largest and smallest ``delta_illiq`` values.

    Ties are broken by the stable (stock_id, date) order. ``N`` is the pooled
    count, or the per-quarter count under ``per_quarter`` scope. When
    ``N < 1/f`` a warning is issued since each tail still loses one value.
    Returns ``(kept, removed)``.
    """
    if observations.empty:
        raise ValueError("no observations to winsorize")
    obs = observations.sort_values(["stock_id", "date"], kind="mergesort")
    f = config.winsor_fraction
    if f == 0:
        return obs, obs.iloc[:0]
    if config.winsor_scope == "per_quarter":
        groups = [g for _, g in obs.groupby("quarter", sort=True)]
    else:
        groups = [obs]
    removed_idx = []
    for g in groups:
        n = len(g)
        if n < 1.0 / f:
            warnings.warn(f"small winsorization sample: N={n} < 1/f={1.0 / f:g}", RuntimeWarning, stacklevel=2)
        k = min(_tail_count(f, n), n // 2)
        order = np.argsort(g["delta_illiq"].to_numpy(), kind="stable")
        pos = np.concatenate([order[:k], order[n - k :]])
        removed_idx.append(g.index[pos])
    if not removed_idx:
        return obs, obs.iloc[:0]
    rm = np.concatenate(removed_idx)
    mask = obs.index.isin(rm)
    return obs[~mask], obs[mask]


def _enrich(bars: pd.DataFrame) -> pd.DataFrame:
    b = bars.sort_values(["stock_id", "date"], kind="mergesort").reset_index(drop=True)
    g = b.groupby("stock_id", sort=False)
    b["quarter"] = quarter_code(b["date"])
    b["market_cap"] = b["close"] * b["shares_outstanding"]
    b["prev_close"] = g["close"].shift(1)
    b["prev_cap"] = g["market_cap"].shift(1)
    if "volume" in b.columns:
        vol = b["volume"].where(b["volume"].notna(), b["dollar_volume"] / b["close"])
    else:
        vol = b["dollar_volume"] / b["close"]
    b["turnover"] = vol / b["shares_outstanding"]
    return b


def build_firm_quarters(
    bars: pd.DataFrame,
    filters: FilterConfig | None = None,
    schedule: TickSchedule | None = None,
) -> FirmQuarterPanel:
    """Apply the sample filters and return surviving firm-days grouped by
    calendar quarter, with a reason code for every removed bar."""
    filters = filters or FilterConfig()
    schedule = schedule or TickSchedule()
    b = _enrich(bars)
    n_in = len(b)
    reason = np.full(n_in, "", dtype=object)

    first = b["prev_close"].isna().to_numpy()
    if filters.tick_filter_enabled:
        hl = ("high" in b.columns) and ("low" in b.columns)
        cross = tick_cross(
            b["prev_close"].to_numpy(),
            b["close"].to_numpy(),
            schedule,
            b["high"].to_numpy() if hl else None,
            b["low"].to_numpy() if hl else None,
        )
    else:
        cross = np.zeros(n_in, dtype=bool)
    b["tick_cross"] = cross
    b["tick_unfilterable"] = first
    reason[cross] = TICK_CROSS

    low_price = (b["close"] < filters.min_price).to_numpy()
    reason[(reason == "") & low_price] = BELOW_MIN_PRICE
    b["price_ok"] = reason == ""

    ret = b["ret"].to_numpy()
    dvol = b["dollar_volume"].to_numpy()
    with np.errstate(divide="ignore", invalid="ignore"):
        illiq = np.abs(ret) / dvol
    defined = np.isfinite(illiq) & (illiq > 0)
    b["illiq"] = np.where(b["price_ok"] & defined, illiq, np.nan)
    reason[(reason == "") & ~defined] = ILLIQ_UNDEFINED

    # log-change chain over the stock's defined, surviving days
    cand = reason == ""
    c = b.loc[cand, ["stock_id", "illiq"]]
    pos = np.flatnonzero(cand)
    same = c["stock_id"].to_numpy()[1:] == c["stock_id"].to_numpy()[:-1]
    prev_pos = np.full(len(c), -1)
    prev_pos[1:] = np.where(same, pos[:-1], -1)
    logil = np.log(c["illiq"].to_numpy())
    delta = np.full(len(c), np.nan)
    has_prev = prev_pos >= 0
    prev_log = np.full(len(c), np.nan)
    prev_log[1:] = logil[:-1]
    delta[has_prev] = logil[has_prev] - prev_log[has_prev]
    gap = has_prev & (prev_pos != pos - 1)
    b["delta_illiq"] = np.nan
    b["gap"] = False
    col_d = b.columns.get_loc("delta_illiq")
    col_g = b.columns.get_loc("gap")
    b.iloc[pos, col_d] = delta
    b.iloc[pos, col_g] = gap
    no_pred = pos[~has_prev]
    reason[no_pred] = NO_PREDECESSOR
    if filters.chain == "break":
        broken = pos[gap]
        reason[broken] = CHAIN_BREAK
        b.iloc[broken, col_d] = np.nan

    valid = reason == ""
    obs = b.loc[valid, ["stock_id", "date", "quarter", "delta_illiq"]]
    flags = {"unfilterable_first_days": int(first.sum()), "undefined_illiq_days": int((reason == ILLIQ_UNDEFINED).sum())}
    if len(obs):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            _, removed = winsorize_delta_illiq(obs, filters)
        for w in caught:
            log.warning(str(w.message))
            flags.setdefault("warnings", []).append(str(w.message))
        reason[removed.index.to_numpy()] = WINSORIZED

    valid = reason == ""
    counts = b.loc[valid].groupby(["stock_id", "quarter"], sort=False)["date"].transform("size")
    short = counts.index[counts.to_numpy() < filters.min_obs_per_quarter]
    reason[short.to_numpy()] = MIN_OBS

    b["reason"] = reason
    keep = reason == ""
    days = b.loc[
        keep,
        ["stock_id", "date", "quarter", "delta_illiq", "illiq", "ret", "dollar_volume", "turnover", "close", "prev_cap", "gap"],
    ].copy()
    days["ret_sq"] = days["ret"] ** 2
    days = days.reset_index(drop=True)
    drops = b.loc[~keep, ["stock_id", "date", "reason"]].reset_index(drop=True)

    qc = quarter_caps(b)
    flags["no_prior_quarter_cap"] = int(
        days[["stock_id", "quarter"]]
        .drop_duplicates()
        .merge(qc, on=["stock_id", "quarter"], how="left")["lagged_market_cap"]
        .isna()
        .sum()
    )
    flags["gap_days"] = int(days["gap"].sum())
    assert len(days) + len(drops) == n_in
    return FirmQuarterPanel(days=days, drops=drops, bars=b, quarter_caps=qc, filters=filters, flags=flags)


def quarter_caps(enriched: pd.DataFrame) -> pd.DataFrame:
    """Market cap on each stock's last trading day of the previous quarter."""
    last = enriched.groupby(["stock_id", "quarter"], sort=True)["market_cap"].last().reset_index()
    last["quarter"] = last["quarter"] + 1
    last = last.rename(columns={"market_cap": "lagged_market_cap"})
    return last


def survivors_refilter(days: pd.DataFrame, bars: pd.DataFrame, filters: FilterConfig, schedule: TickSchedule | None = None):
    """Re-evaluate the predicate filters (tick, price, min-obs) on surviving
    firm-days, using each day's recorded predecessor close. Returns the
    surviving subset; used to check idempotence of the rule-based stages."""
    schedule = schedule or TickSchedule()
    keyed = days.merge(bars[["stock_id", "date", "prev_close"]], on=["stock_id", "date"], how="left")
    keep = np.ones(len(keyed), dtype=bool)
    if filters.tick_filter_enabled:
        keep &= ~tick_cross(keyed["prev_close"].to_numpy(), keyed["close"].to_numpy(), schedule)
    keep &= (keyed["close"] >= filters.min_price).to_numpy()
    k = keyed[keep]
    n = k.groupby(["stock_id", "quarter"])["date"].transform("size")
    return k[n >= filters.min_obs_per_quarter].reset_index(drop=True)
