import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from liqcomm.commonality import (
    QuarterInputs,
    annual_beta_means,
    autocorrelations,
    estimate_all,
    estimate_high_ownership_beta,
    estimate_liquidity_beta,
    estimate_quarter,
    estimate_volume_beta,
    liquidity_design,
    return_autocorrelation,
    turnover_change,
)
from liqcomm.econ import InsufficientDataError, SingularDesignError
from liqcomm.illiq import leave_one_out_mean

from .oracles import normal_equations


def market_inputs(rng, T):
    mkt = rng.normal(0, 0.3, T)
    ret_mkt = rng.normal(0, 0.01, T)
    return mkt, ret_mkt


def quarter_panel(rng, T, N, beta_mkt, beta_hi=0.0, noise=0.3):
    """Common regressors for all firms; y loads on them with the given betas."""
    mkt, ret_mkt = market_inputs(rng, T)
    hi = rng.normal(0, 0.3, T)
    y = beta_mkt * mkt[:, None] + beta_hi * hi[:, None] + rng.normal(0, noise, (T, N))
    ret = rng.normal(0, 0.02, (T, N))
    tile = lambda v: np.tile(v[:, None], (1, N))
    return QuarterInputs(
        quarter=8040,
        stocks=np.array([f"S{i:04d}" for i in range(N)]),
        y=y,
        ret_sq=ret**2,
        mkt=tile(mkt),
        ret_mkt=tile(ret_mkt),
        hi=tile(hi),
        returns=ret,
    )


class TestLiquidityBeta:
    def test_exact_copy(self):
        rng = np.random.default_rng(0)
        mkt, ret_mkt = market_inputs(rng, 60)
        ret_sq = rng.uniform(0, 1e-3, 60)
        res = estimate_liquidity_beta(mkt, mkt, ret_mkt, ret_sq)
        assert res.coef("dilliq_mkt") == pytest.approx(1.0, abs=1e-10)
        assert res.r_squared == pytest.approx(1.0, abs=1e-10)

    def test_matches_normal_equations(self):
        rng = np.random.default_rng(1)
        mkt, ret_mkt = market_inputs(rng, 63)
        ret_sq = rng.uniform(0, 1e-3, 63)
        y = 0.5 * mkt + rng.normal(0, 0.3, 63)
        res = estimate_liquidity_beta(y, mkt, ret_mkt, ret_sq)
        yy, X, names, _ = liquidity_design(y, mkt, ret_mkt, ret_sq)
        np.testing.assert_allclose(res.coefficients, normal_equations(yy, X), rtol=1e-9, atol=1e-12)
        assert names == res.names

    def test_design_columns_align_lead_and_lag(self):
        x = np.arange(10.0)
        yy, X, names, rows = liquidity_design(x, x * 10, x * 100, x * 1000)
        assert list(rows) == list(range(1, 9))
        r = X[0]
        assert dict(zip(names, r)) == {
            "const": 1.0,
            "dilliq_mkt": 10.0,
            "dilliq_mkt_lead": 20.0,
            "dilliq_mkt_lag": 0.0,
            "ret_mkt": 100.0,
            "ret_mkt_lead": 200.0,
            "ret_mkt_lag": 0.0,
            "ret_sq": 1000.0,
        }

    def test_n_obs_drops_first_and_last_day(self):
        rng = np.random.default_rng(2)
        T = 40
        mkt, ret_mkt = market_inputs(rng, T)
        y = rng.normal(size=T)
        res = estimate_liquidity_beta(y, mkt, ret_mkt, rng.uniform(size=T))
        assert res.n_obs == T - 2
        y[5] = np.nan  # drops one row; lead/lag of the firm's own series are not used
        res = estimate_liquidity_beta(y, mkt, ret_mkt, rng.uniform(size=T))
        assert res.n_obs == T - 3
        mkt[5] = np.nan  # row 5 as regressor, row 4 as lead, row 6 as lag
        res = estimate_liquidity_beta(y, mkt, ret_mkt, rng.uniform(size=T))
        assert res.n_obs == T - 5

    def test_insufficient_obs(self):
        rng = np.random.default_rng(3)
        mkt, ret_mkt = market_inputs(rng, 26)
        with pytest.raises(InsufficientDataError):
            estimate_liquidity_beta(mkt, mkt, ret_mkt, ret_mkt**2, min_obs=25)

    def test_constant_market_is_singular(self):
        rng = np.random.default_rng(4)
        _, ret_mkt = market_inputs(rng, 60)
        with pytest.raises(SingularDesignError):
            estimate_liquidity_beta(rng.normal(size=60), np.full(60, 0.1), ret_mkt, ret_mkt**2)

    def test_known_beta_averaged_over_500_firms(self):
        rng = np.random.default_rng(5)
        q = quarter_panel(rng, 62, 500, beta_mkt=0.7, noise=0.05)
        q.hi = None
        est = estimate_quarter(q)
        assert est["beta_L"].notna().all()
        assert abs(est["beta_L"].mean() - 0.7) < 0.05

    @pytest.mark.slow
    def test_null_coverage(self):
        rng = np.random.default_rng(6)
        hits = 0
        reps = 400
        for _ in range(reps):
            mkt, ret_mkt = market_inputs(rng, 250)
            y = rng.normal(0, 0.3, 250)
            res = estimate_liquidity_beta(y, mkt, ret_mkt, rng.uniform(0, 1e-3, 250))
            k = res.index("dilliq_mkt")
            hits += abs(res.coefficients[k]) <= 2 * res.classical_std_errors[k]
        assert 0.92 <= hits / reps <= 0.98

    def test_controls_robustness(self):
        # controls with zero true coefficients barely move the beta
        rng = np.random.default_rng(7)
        ok = 0
        reps = 200
        for _ in range(reps):
            mkt, ret_mkt = market_inputs(rng, 120)
            ret_sq = rng.uniform(0, 1e-3, 120)
            y = 0.4 * mkt + rng.normal(0, 0.3, 120)
            full = estimate_liquidity_beta(y, mkt, ret_mkt, ret_sq)
            bare = estimate_liquidity_beta(y, mkt, ret_mkt, ret_sq, controls=False)
            k = full.index("dilliq_mkt")
            ok += abs(full.coefficients[k] - bare.coef("dilliq_mkt")) < 2 * full.classical_std_errors[k]
        assert ok / reps >= 0.9

    def test_leave_one_out_injection(self):
        # a dominant firm with pure-noise changes: its own series must not
        # leak into its market regressor
        rng = np.random.default_rng(8)
        T, N = 120, 30
        factor = rng.normal(0, 0.3, T)
        y = factor[:, None] + rng.normal(0, 0.1, (T, N))
        y[:, 0] = rng.normal(0, 0.3, T)
        w = np.ones((T, N))
        w[:, 0] = 1e6
        ret_mkt = rng.normal(0, 0.01, T)
        ret_sq = rng.uniform(0, 1e-3, T)
        loo = leave_one_out_mean(y, w)
        b = estimate_liquidity_beta(y[:, 0], loo[:, 0], ret_mkt, ret_sq).coef("dilliq_mkt")
        assert abs(b) < 0.2
        full = (w * y).sum(axis=1) / w.sum(axis=1)
        b_leak = estimate_liquidity_beta(y[:, 0], full, ret_mkt, ret_sq).coef("dilliq_mkt")
        assert b_leak > 0.9


class TestHighOwnershipBeta:
    def test_two_factor_simulation(self):
        rng = np.random.default_rng(9)
        q = quarter_panel(rng, 62, 500, beta_mkt=0.0, beta_hi=0.4, noise=0.05)
        est = estimate_quarter(q)
        assert abs(est["beta_HI"].mean() - 0.4) < 0.05
        # market coefficient within the two-factor regression
        bl = np.array(
            [
                estimate_high_ownership_beta(q.y[:, i], q.mkt[:, i], q.hi[:, i], q.ret_mkt[:, i], q.ret_sq[:, i]).coef(
                    "dilliq_mkt"
                )
                for i in range(q.y.shape[1])
            ]
        )
        assert abs(bl.mean()) < 2 * bl.std(ddof=1) / np.sqrt(len(bl))

    def test_hi_equal_to_market_is_singular(self):
        rng = np.random.default_rng(10)
        mkt, ret_mkt = market_inputs(rng, 60)
        with pytest.raises(SingularDesignError):
            estimate_high_ownership_beta(rng.normal(size=60), mkt, mkt.copy(), ret_mkt, ret_mkt**2)

    def test_zero_noise_copy(self):
        rng = np.random.default_rng(11)
        mkt, ret_mkt = market_inputs(rng, 60)
        hi = rng.normal(0, 0.3, 60)
        res = estimate_high_ownership_beta(hi, mkt, hi, ret_mkt, rng.uniform(size=60))
        assert res.coef("dilliq_hi") == pytest.approx(1.0, abs=1e-10)
        assert res.coef("dilliq_mkt") == pytest.approx(0.0, abs=1e-10)


class TestVolumeBeta:
    def test_copy_and_double(self):
        rng = np.random.default_rng(12)
        m = rng.normal(0, 0.2, 60)
        assert estimate_volume_beta(m, m).coef("turnover_mkt") == pytest.approx(1.0, abs=1e-12)
        assert estimate_volume_beta(2 * m, m).coef("turnover_mkt") == pytest.approx(2.0, abs=1e-12)

    def test_independent(self):
        rng = np.random.default_rng(13)
        hits = 0
        for _ in range(200):
            res = estimate_volume_beta(rng.normal(size=100), rng.normal(size=100))
            hits += abs(res.coefficients[1]) <= 2 * res.classical_std_errors[1]
        assert hits / 200 >= 0.9

    def test_turnover_change(self):
        out = turnover_change(np.array([1.0, 2.0, 0.0, 3.0, 3.0]))
        assert np.isnan(out[0])
        assert out[1] == 1.0 and out[2] == -1.0
        assert np.isnan(out[3])  # zero prior turnover
        assert out[4] == 0.0

    def test_insufficient(self):
        with pytest.raises(InsufficientDataError):
            estimate_volume_beta(np.arange(10.0), np.arange(10.0))


class TestAutocorrelation:
    def test_alternating(self):
        assert return_autocorrelation(np.tile([0.01, -0.01], 30)) == pytest.approx(-1.0)

    def test_constant_is_undefined(self):
        assert np.isnan(return_autocorrelation(np.full(60, 0.01)))

    def test_small_sample_bias(self):
        rng = np.random.default_rng(14)
        r = rng.normal(size=(60, 1000))
        rho = autocorrelations(r)
        assert abs(rho.mean() - (-1.0 / 59)) < 0.01

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(4, 80))
    def test_batched_matches_single_and_bounded(self, seed, T):
        rng = np.random.default_rng(seed)
        r = rng.normal(size=(T, 3))
        r[rng.uniform(size=r.shape) < 0.1] = np.nan
        batch = autocorrelations(r)
        for j in range(3):
            single = return_autocorrelation(r[:, j])
            if np.isnan(single):
                assert np.isnan(batch[j])
            else:
                assert batch[j] == pytest.approx(single, abs=1e-12)
                assert -1 <= batch[j] <= 1


class TestBatched:
    def test_batched_matches_single_firm(self):
        rng = np.random.default_rng(15)
        q = quarter_panel(rng, 50, 12, beta_mkt=0.6, beta_hi=0.2)
        q.y[rng.uniform(size=q.y.shape) < 0.1] = np.nan
        q.y[:, 3] = np.nan
        q.y[:28, 4] = np.nan
        est = estimate_quarter(q).set_index("stock_id")
        for i, s in enumerate(q.stocks):
            try:
                r = estimate_liquidity_beta(q.y[:, i], q.mkt[:, i], q.ret_mkt[:, i], q.ret_sq[:, i])
            except InsufficientDataError:
                if s in est.index:
                    assert np.isnan(est.loc[s, "beta_L"])
                    assert est.loc[s, "skip_L"] == "insufficient_obs"
                continue
            assert est.loc[s, "beta_L"] == pytest.approx(r.coef("dilliq_mkt"), rel=1e-8, abs=1e-10)
            assert est.loc[s, "n_obs"] == r.n_obs
            h = estimate_high_ownership_beta(q.y[:, i], q.mkt[:, i], q.hi[:, i], q.ret_mkt[:, i], q.ret_sq[:, i])
            assert est.loc[s, "beta_HI"] == pytest.approx(h.coef("dilliq_hi"), rel=1e-8, abs=1e-10)

    def test_singular_recorded_not_raised(self):
        rng = np.random.default_rng(16)
        q = quarter_panel(rng, 40, 3, beta_mkt=0.5)
        q.mkt[:, 1] = 0.2
        est = estimate_quarter(q).set_index("stock_id")
        assert np.isnan(est.loc["S0001", "beta_L"])
        assert est.loc["S0001", "skip_L"].startswith("singular")
        assert np.isfinite(est.loc["S0000", "beta_L"])

    def test_estimate_all_order_independent_of_workers(self):
        rng = np.random.default_rng(17)
        qs = []
        for k in range(4):
            q = quarter_panel(rng, 45, 6, beta_mkt=0.5)
            q.quarter = 8040 + k
            qs.append(q)
        a = estimate_all(qs, max_workers=1)
        b = estimate_all(list(reversed(qs)), max_workers=3)
        pd.testing.assert_frame_equal(a, b)
        assert list(a["stock_id"]) == sorted(a["stock_id"])


class TestAnnualMeans:
    def frame(self, rows):
        return pd.DataFrame(rows, columns=["stock_id", "quarter", "beta_L", "size_group"])

    def test_firm_year_mean(self):
        e = self.frame([("A", 8040 + k, b, "large") for k, b in enumerate([0.1, 0.2, 0.3, 0.4])])
        out = annual_beta_means(e).set_index("group")
        assert out.loc["all", "mean"] == pytest.approx(0.25)
        assert out.loc["all", "pct_positive"] == 100.0
        assert out.loc["all", "n"] == 1
        assert "small" not in out.index and "large-small" not in out.index

    def test_difference_row(self):
        rng = np.random.default_rng(18)
        rows = []
        for i in range(200):
            g, mu = ("large", 0.5) if i < 100 else ("small", 0.1)
            for k in range(4):
                rows.append((f"S{i}", 8040 + k, mu + rng.normal(0, 0.2), g))
        out = annual_beta_means(self.frame(rows)).set_index("group")
        d = out.loc["large-small"]
        assert abs(d["mean"] - 0.4) < 3 * 0.2 / np.sqrt(400) * np.sqrt(2)
        assert d["t_stat"] > 10
        assert out.loc["large", "n"] == 100

    def test_years_split_and_pct_positive(self):
        e = self.frame([("A", 8040, -1.0, "small"), ("B", 8040, 1.0, "small"), ("A", 8044, 2.0, "small")])
        out = annual_beta_means(e)
        y0 = out[(out["year"] == 2010) & (out["group"] == "all")].iloc[0]
        assert y0["pct_positive"] == 50.0
        assert set(out["year"]) == {2010, 2011}

    def test_empty(self):
        assert annual_beta_means(self.frame([])).empty
