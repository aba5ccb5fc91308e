import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from liqcomm import ingest
from liqcomm.ingest import (
    DailyBar,
    FilterConfig,
    OwnershipSnapshot,
    SchemaError,
    TickSchedule,
    build_firm_quarters,
    load_daily_bars,
    load_ownership,
    quarter_caps,
    quarter_code,
    survivors_refilter,
    tick_cross,
    tick_filter,
    winsorize_delta_illiq,
)

BAR_HEADER = "stock_id,date,close,dollar_volume,shares_outstanding,ret\n"


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def make_bars(n_stocks=3, n_days=70, seed=0, start="2010-01-04", price=5.0):
    rng = np.random.default_rng(seed)
    dates = pd.bdate_range(start, periods=n_days)
    rows = []
    for i in range(n_stocks):
        close = price * np.exp(np.cumsum(rng.normal(0, 0.01, n_days)))
        ret = np.r_[np.nan, close[1:] / close[:-1] - 1]
        ret[0] = rng.normal(0, 0.01)
        dvol = np.exp(rng.normal(13, 0.5, n_days))
        for d, c, r, v in zip(dates, close, ret, dvol):
            rows.append((f"S{i}", d, c, r, v, 1e6))
    return pd.DataFrame(rows, columns=["stock_id", "date", "close", "ret", "dollar_volume", "shares_outstanding"])


class TestDomainTypes:
    def test_daily_bar_cap(self):
        b = DailyBar("A", pd.Timestamp("2010-01-04").date(), 2.0, 0.01, 100.0, 50.0)
        assert b.market_cap == 100.0

    @pytest.mark.parametrize("field,value", [("close", 0.0), ("shares_outstanding", -1.0), ("dollar_volume", -1.0)])
    def test_daily_bar_invariants(self, field, value):
        kw = dict(stock_id="A", date=None, close=1.0, ret=0.0, dollar_volume=1.0, shares_outstanding=1.0)
        kw[field] = value
        with pytest.raises(ValueError):
            DailyBar(**kw)

    def test_snapshot_fraction(self):
        s = OwnershipSnapshot("A", None, "institution", 50)
        assert s.fraction(100) == 0.5
        with pytest.raises(ValueError):
            OwnershipSnapshot("A", None, "retail", 1)

    def test_tick_schedule_validation(self):
        with pytest.raises(ValueError):
            TickSchedule(((2.0, 0.01), (1.0, 0.005), (math.inf, 0.01)))
        with pytest.raises(ValueError):
            TickSchedule(((1.0, 0.01), (2.0, 0.02)))
        with pytest.raises(ValueError):
            TickSchedule(((1.0, 0.0), (math.inf, 0.01)))

    def test_filter_config_validation(self):
        with pytest.raises(ValueError):
            FilterConfig(winsor_fraction=0.5)
        with pytest.raises(ValueError):
            FilterConfig(min_obs_per_quarter=1)
        with pytest.raises(ValueError):
            FilterConfig(winsor_scope="yearly")

    def test_quarter_code(self):
        q = quarter_code(pd.Series(pd.to_datetime(["2010-03-31", "2010-04-01", "2010-12-31"])))
        assert list(q) == [2010 * 4, 2010 * 4 + 1, 2010 * 4 + 3]
        assert ingest.quarter_label(2010 * 4 + 1) == "2010Q2"
        assert ingest.parse_quarter("2010Q2") == 2010 * 4 + 1


class TestLoadBars:
    def test_clean_file(self, tmp_path):
        p = write(tmp_path, "b.csv", BAR_HEADER + "A,2010-01-04,1.0,100,10,0.01\nA,2010-01-05,1.1,100,10,0.1\nB,2010-01-04,2.0,50,5,0.0\n")
        res = load_daily_bars(p)
        assert len(res.frame) == 3
        assert res.rejections.empty

    def test_negative_close_rejected(self, tmp_path):
        p = write(tmp_path, "b.csv", BAR_HEADER + "A,2010-01-04,-1,100,10,0.01\nA,2010-01-05,1.1,100,10,0.1\n")
        res = load_daily_bars(p)
        assert len(res.frame) == 1
        assert list(res.rejections["reason_code"]) == [ingest.NONPOSITIVE_CLOSE]
        assert list(res.rejections["line"]) == [2]

    def test_bad_number_and_date(self, tmp_path):
        p = write(tmp_path, "b.csv", BAR_HEADER + "A,2010-01-04,abc,100,10,0.01\nA,2010-13-05,1.1,100,10,0.1\nA,2010-01-06,1.1,,10,0.1\n")
        res = load_daily_bars(p)
        assert res.frame.empty
        assert sorted(res.rejections["reason_code"]) == sorted([ingest.BAD_NUMBER, ingest.BAD_DATE, ingest.MISSING_VALUE])

    def test_duplicates_strict_rejects_both(self, tmp_path):
        p = write(tmp_path, "b.csv", BAR_HEADER + "A,2010-01-04,1,100,10,0.01\nA,2010-01-04,1.2,100,10,0.01\n")
        res = load_daily_bars(p)
        assert res.frame.empty
        assert list(res.rejections["reason_code"]) == [ingest.DUPLICATE_KEY] * 2

    def test_duplicates_lenient_keeps_first(self, tmp_path):
        p = write(tmp_path, "b.csv", BAR_HEADER + "A,2010-01-04,1,100,10,0.01\nA,2010-01-04,1.2,100,10,0.01\n")
        res = load_daily_bars(p, strict=False)
        assert list(res.frame["close"]) == [1.0]
        assert list(res.rejections["line"]) == [3]

    def test_missing_column(self, tmp_path):
        p = write(tmp_path, "b.csv", "stock_id,date,close\nA,2010-01-04,1\n")
        with pytest.raises(SchemaError):
            load_daily_bars(p)

    def test_schema_mapping(self, tmp_path):
        p = write(tmp_path, "b.csv", "id,day,px,dv,so\nA,2010-01-04,1,100,10\nA,2010-01-05,1.5,100,10\n")
        res = load_daily_bars(p, {"stock_id": "id", "date": "day", "close": "px", "dollar_volume": "dv", "shares_outstanding": "so"})
        assert len(res.frame) == 2
        # missing return column: close-to-close
        assert np.isnan(res.frame["ret"].iloc[0])
        assert res.frame["ret"].iloc[1] == pytest.approx(0.5)

    def test_row_accounting(self, tmp_path):
        p = write(tmp_path, "b.csv", BAR_HEADER + "A,2010-01-04,1,100,10,0.01\nA,2010-01-04,1,100,10,0.01\nA,2010-01-05,0,1,1,0\nB,x,1,1,1,0\nB,2010-01-05,1,1,1,0\n")
        res = load_daily_bars(p)
        assert res.n_rows == 5


class TestLoadOwnership:
    def bars(self, tmp_path):
        p = write(tmp_path, "b.csv", BAR_HEADER + "A,2010-03-31,1,100,100,0\nB,2010-03-31,1,100,100,0\n")
        return load_daily_bars(p).frame

    def test_fraction(self, tmp_path):
        p = write(tmp_path, "o.csv", "stock_id,date,category,shares_held\nA,2010-03-31,institution,50\n")
        res = load_ownership(p, bars=self.bars(tmp_path))
        assert res.frame["fraction"].iloc[0] == 0.5

    def test_fraction_above_one(self, tmp_path):
        p = write(tmp_path, "o.csv", "stock_id,date,category,shares_held\nA,2010-03-31,institution,150\n")
        res = load_ownership(p, bars=self.bars(tmp_path))
        assert res.frame.empty
        assert list(res.rejections["reason_code"]) == [ingest.FRACTION_ABOVE_ONE]

    def test_category_sum_exceeds_parent(self, tmp_path):
        text = (
            "stock_id,date,category,shares_held\n"
            "A,2010-03-31,institution,55\nA,2010-03-31,foreign_institution,30\nA,2010-03-31,local_institution,30\n"
            "B,2010-03-31,institution,60\nB,2010-03-31,foreign_institution,30\nB,2010-03-31,local_institution,30\n"
        )
        res = load_ownership(write(tmp_path, "o.csv", text), bars=self.bars(tmp_path))
        assert set(res.frame["stock_id"]) == {"B"}
        assert (res.rejections["reason_code"] == ingest.CATEGORY_SUM_EXCEEDS_PARENT).sum() == 3

    def test_bad_rows(self, tmp_path):
        text = "stock_id,date,category,shares_held\nA,2010-03-31,retail,5\nA,2010-03-31,institution,-5\n"
        res = load_ownership(write(tmp_path, "o.csv", text))
        assert sorted(res.rejections["reason_code"]) == [ingest.BAD_CATEGORY, ingest.NEGATIVE_HOLDING]


class TestTickFilter:
    @pytest.mark.parametrize(
        "prev,cur,keep",
        [(0.095, 0.12, False), (1.50, 1.80, True), (1.99, 2.01, False), (2.01, 1.99, False), (0.10, 0.11, True)],
    )
    def test_examples(self, prev, cur, keep):
        assert tick_filter({"close": prev}, {"close": cur}).keep is keep

    def test_no_predecessor(self):
        d = tick_filter(None, {"close": 1.0})
        assert d.keep and d.unfilterable

    def test_boundary_belongs_to_upper_band(self):
        s = TickSchedule()
        assert list(s.regime([0.0999, 0.10, 1.999, 2.0])) == [0, 1, 1, 2]
        assert list(s.tick_size([0.05, 1.0, 5.0])) == [0.001, 0.005, 0.01]

    def test_intraday_refinement(self):
        s = TickSchedule()
        # closes in the same regime, but the day traded through $2.00
        assert not tick_cross([1.9], [1.95], s)[0]
        assert tick_cross([1.9], [1.95], s, high=[2.05], low=[1.9])[0]
        # missing high/low falls back to closes
        assert not tick_cross([1.9], [1.95], s, high=[np.nan], low=[np.nan])[0]


class TestWinsorize:
    def obs(self, values):
        n = len(values)
        return pd.DataFrame(
            {
                "stock_id": [f"S{i:03d}" for i in range(n)],
                "date": pd.Timestamp("2010-01-04"),
                "quarter": 8040,
                "delta_illiq": values,
            }
        )

    def test_200_values(self):
        kept, removed = winsorize_delta_illiq(self.obs(np.arange(200.0)), FilterConfig())
        assert len(kept) == 196
        assert sorted(removed["delta_illiq"]) == [0.0, 1.0, 198.0, 199.0]

    def test_ties_use_stable_order(self):
        kept, removed = winsorize_delta_illiq(self.obs(np.zeros(200)), FilterConfig())
        assert len(kept) == 196
        assert list(removed["stock_id"]) == ["S000", "S001", "S198", "S199"]

    def test_50_values_warns_and_removes_one_per_tail(self):
        with pytest.warns(RuntimeWarning):
            kept, removed = winsorize_delta_illiq(self.obs(np.arange(50.0)), FilterConfig())
        assert len(kept) == 48
        assert sorted(removed["delta_illiq"]) == [0.0, 49.0]

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            winsorize_delta_illiq(self.obs([]), FilterConfig())

    def test_per_quarter_scope(self):
        o = pd.concat([self.obs(np.arange(100.0)), self.obs(np.arange(100.0)).assign(quarter=8041)], ignore_index=True)
        kept, removed = winsorize_delta_illiq(o, FilterConfig(winsor_scope="per_quarter"))
        assert len(removed) == 4
        assert removed.groupby("quarter").size().tolist() == [2, 2]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 400), st.sampled_from([0.01, 0.02, 0.05]))
    def test_removal_count(self, n, f):
        values = np.random.default_rng(n).normal(size=n)
        cfg = FilterConfig(winsor_fraction=f)
        with _maybe_warn(n < 1 / f):
            kept, removed = winsorize_delta_illiq(self.obs(values), cfg)
        k = min(math.ceil(f * n - 1e-9), n // 2)
        assert len(removed) == 2 * k
        assert len(kept) + len(removed) == n
        if k and len(kept):
            assert removed["delta_illiq"].min() <= kept["delta_illiq"].min()
            assert removed["delta_illiq"].max() >= kept["delta_illiq"].max()


class _maybe_warn:
    def __init__(self, expect):
        self.expect = expect

    def __enter__(self):
        import warnings

        self._cm = warnings.catch_warnings(record=True)
        self.caught = self._cm.__enter__()
        warnings.simplefilter("always")
        return self

    def __exit__(self, *exc):
        self._cm.__exit__(*exc)
        got = any(issubclass(w.category, RuntimeWarning) for w in self.caught)
        assert got == self.expect
        return False


class TestBuildFirmQuarters:
    def test_conservation_and_reasons(self):
        bars = make_bars()
        panel = build_firm_quarters(bars)
        assert len(panel.days) + len(panel.drops) == len(bars)
        assert set(panel.drops["reason"]) <= {
            ingest.NO_PREDECESSOR,
            ingest.WINSORIZED,
            ingest.MIN_OBS,
            ingest.TICK_CROSS,
            ingest.ILLIQ_UNDEFINED,
        }
        assert np.isfinite(panel.days["delta_illiq"]).all()

    def test_days_sorted(self):
        panel = build_firm_quarters(make_bars())
        d = panel.days
        assert d.equals(d.sort_values(["stock_id", "date"], kind="mergesort"))
        for fq in panel.firm_quarters():
            assert fq.days["date"].is_monotonic_increasing
            assert len(fq.days) >= 25

    def test_min_obs_variant(self):
        bars = make_bars(n_days=40)  # 2010-01-04 + 40 business days stays in Q1
        base = build_firm_quarters(bars, FilterConfig(winsor_fraction=0.0))
        assert base.days.groupby("stock_id").size().min() >= 30
        strict = build_firm_quarters(bars, FilterConfig(winsor_fraction=0.0, min_obs_per_quarter=40))
        assert strict.days.empty

    def test_winsorization_before_min_obs(self):
        # one stock with exactly 25 valid changes, two of them extreme
        bars = make_bars(n_stocks=1, n_days=26, seed=3)
        bars.loc[10, "dollar_volume"] *= 1e6
        bars = pd.concat([bars, make_bars(n_stocks=4, n_days=26, seed=4).assign(stock_id=lambda x: "T" + x["stock_id"])])
        panel = build_firm_quarters(bars, FilterConfig(winsor_fraction=0.01))
        assert "S0" not in set(panel.days["stock_id"])
        s0 = panel.drops[panel.drops["stock_id"] == "S0"]["reason"]
        assert (s0 == ingest.WINSORIZED).any() and (s0 == ingest.MIN_OBS).any()

    def test_min_price_and_undefined(self):
        bars = make_bars(n_stocks=1, n_days=30, price=0.5)
        bars.loc[5, "close"] = 0.005
        bars.loc[6, "close"] = 0.005
        bars.loc[12, "ret"] = 0.0
        panel = build_firm_quarters(bars, FilterConfig(winsor_fraction=0, min_obs_per_quarter=2, tick_filter_enabled=False))
        reasons = panel.drops.set_index("date")["reason"]
        assert reasons.loc[bars.loc[5, "date"]] == ingest.BELOW_MIN_PRICE
        assert reasons.loc[bars.loc[12, "date"]] == ingest.ILLIQ_UNDEFINED

    def test_chain_reconnects_or_breaks(self):
        bars = make_bars(n_stocks=1, n_days=30)
        bars.loc[10, "ret"] = 0.0
        cfg = dict(winsor_fraction=0, min_obs_per_quarter=2)
        rec = build_firm_quarters(bars, FilterConfig(**cfg))
        day11 = rec.days[rec.days["date"] == bars.loc[11, "date"]].iloc[0]
        il = (bars["ret"].abs() / bars["dollar_volume"]).to_numpy()
        assert day11["delta_illiq"] == pytest.approx(np.log(il[11] / il[9]))
        assert day11["gap"]
        brk = build_firm_quarters(bars, FilterConfig(chain="break", **cfg))
        assert bars.loc[11, "date"] not in set(brk.days["date"])
        assert ingest.CHAIN_BREAK in set(brk.drops["reason"])

    def test_lagged_cap_from_last_day_of_previous_quarter(self):
        bars = make_bars(n_stocks=1, n_days=130)
        enriched = ingest._enrich(bars)
        qc = quarter_caps(enriched)
        q1_last = enriched[enriched["quarter"] == 8040].iloc[-1]
        row = qc[qc["quarter"] == 8041].iloc[0]
        assert row["lagged_market_cap"] == q1_last["close"] * q1_last["shares_outstanding"]

    def test_idempotent_predicates(self):
        bars = make_bars(n_stocks=5, n_days=130, price=2.0, seed=9)
        cfg = FilterConfig()
        panel = build_firm_quarters(bars, cfg)
        again = survivors_refilter(panel.days, panel.bars, cfg)
        assert len(again) == len(panel.days)

    def test_deterministic(self):
        bars = make_bars(n_stocks=4, n_days=100, seed=2)
        a = build_firm_quarters(bars)
        b = build_firm_quarters(bars.sample(frac=1.0, random_state=1))
        pd.testing.assert_frame_equal(a.days, b.days)
        pd.testing.assert_frame_equal(a.drops, b.drops)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(3, 90), st.integers(0, 10_000), st.floats(0.05, 3.0))
    def test_every_row_accounted_for(self, n_stocks, n_days, seed, price):
        bars = make_bars(n_stocks=n_stocks, n_days=n_days, seed=seed, price=price)
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            panel = build_firm_quarters(bars, FilterConfig(min_obs_per_quarter=5))
        assert len(panel.days) + len(panel.drops) == len(bars)
        assert (panel.drops["reason"] != "").all()
        n = panel.days.groupby(["stock_id", "quarter"]).size()
        assert (n >= 5).all()
