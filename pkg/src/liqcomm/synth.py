"""Synthetic daily market and ownership panels with known liquidity betas.

Model, per stock ``i`` and market day ``d`` in quarter ``q``::

    log illiq[d, i] = mu[q, i] + lam[q, i] * phi[d] + kap[q, i] * gam[d] + u[d, i]

with ``phi`` (market illiquidity shock), ``gam`` (high-ownership shock,
loading ``hi_loading_slope * (F - cap-weighted mean F)`` on lagged foreign
ownership ``F``) and
``u`` independent white noise apart from a configurable ``phi``/``gam``
correlation. Inside a quarter the daily log change is therefore the
difference of white noise for every component, so all series share one
spectral shape and the lead/lag terms of the market-model regression have
zero population coefficients.

The loadings ``lam`` are solved so that the population coefficient of a
stock's illiq change on the cap-weighted market change *excluding that
stock* equals the target beta exactly. Dollar volume is back-solved as
``|ret| / illiq``, so Amihud's measure computed from the bars reproduces the
latent illiq.

Random numbers: PCG64 (O'Neill 2014; 128-bit LCG, multiplier
0x2360ED051FC65DA44385DF649FCCF645, XSL-RR output) seeded through numpy's
``SeedSequence(seed, spawn_key=(stream,))``. Uniforms are the top 53 bits of
each 64-bit output scaled by 2**-53; normals use the Box-Muller transform on
consecutive uniform pairs. Any language with a PCG64 and SeedSequence port
reproduces the panels bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import optimize

from .csvio import write_csv
from .analytics import SIZE_LABELS, size_groups
from .illiq import top_fraction_members

STREAMS = {
    "initial": 1,
    "returns": 2,
    "factors": 3,
    "idio": 4,
    "ownership": 5,
    "betas": 6,
    "controls": 7,
    "volume": 8,
    "jumps": 9,
}

DEFAULT_NOISE = {
    "market_illiq": 0.25,
    "hi_illiq": 0.25,
    "idio_illiq": 0.30,
    "abs_return": 0.5,
    "volume_factor": 0.3,
    "ownership": 0.05,
    "ownership_walk": 0.01,
    "jump": 3.0,
}


@dataclass
class SynthConfig:
    n_stocks: int = 500
    n_years: int = 8
    seed: int = 0
    start_year: int = 2007
    trading_days_per_quarter: int = 63
    group_betas: dict = field(default_factory=lambda: {"small": 0.1, "mid": 0.3, "large": 0.5})
    group_beta_trends: dict = field(default_factory=dict)
    ownership_beta_slope: float = 0.0
    hi_loading_slope: float = 0.0
    beta_dispersion: float = 0.0
    turnover_base: float = 0.002
    turnover_ownership_slope: float = 0.002
    index_turnover_boost: float = 0.001
    index_fraction: float = 0.2
    factor_correlation: float = 0.0
    foreign_means: dict = field(default_factory=lambda: {"small": 0.10, "mid": 0.20, "large": 0.42})
    local_means: dict = field(default_factory=lambda: {"small": 0.08, "mid": 0.12, "large": 0.18})
    noise_scales: dict = field(default_factory=dict)
    price_median: float = 10.0
    price_dispersion: float = 0.6
    cap_median: float = 2e8
    cap_dispersion: float = 1.5
    equal_caps: bool = False
    return_scale: float = 0.012
    market_return_correlation: float = 0.4
    volume_beta_base: float = 1.0
    volume_beta_slope: float = 0.0
    jump_probability: float = 0.01

    def __post_init__(self):
        self.noise_scales = {**DEFAULT_NOISE, **(self.noise_scales or {})}
        if self.n_stocks < 3:
            raise ValueError("n_stocks must be at least 3")
        if self.n_years < 1 or self.trading_days_per_quarter < 3:
            raise ValueError("need at least one year and three days per quarter")
        for k, v in self.noise_scales.items():
            if k not in DEFAULT_NOISE:
                raise ValueError(f"unknown noise channel {k!r}")
            if v < 0:
                raise ValueError(f"noise scale {k!r} must be non-negative")
        if not 0 <= self.jump_probability < 0.5:
            raise ValueError("jump_probability must lie in [0, 0.5)")
        if not -1 < self.market_return_correlation < 1:
            raise ValueError("market_return_correlation must lie in (-1, 1)")
        if not self.return_scale > 0:
            raise ValueError("return_scale must be positive")
        if not -1 < self.factor_correlation < 1:
            raise ValueError("factor_correlation must lie in (-1, 1)")
        for g in SIZE_LABELS:
            for m in (self.group_betas, self.foreign_means, self.local_means):
                if g not in m:
                    raise ValueError(f"missing size group {g!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown synth settings {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruth:
    stocks: pd.DataFrame
    quarterly: pd.DataFrame
    latent_illiq: pd.DataFrame = field(repr=False)
    config: SynthConfig = None


@dataclass
class SyntheticPanel:
    bars: pd.DataFrame
    ownership: pd.DataFrame
    index_members: pd.DataFrame
    truth: GroundTruth

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "bars": out / "bars.csv",
            "ownership": out / "ownership.csv",
            "index": out / "index.csv",
            "ground_truth": out / "ground_truth.csv",
            "ground_truth_quarterly": out / "ground_truth_quarterly.csv",
        }
        write_csv(self.bars, paths["bars"])
        write_csv(self.ownership, paths["ownership"])
        write_csv(self.index_members, paths["index"])
        write_csv(ground_truth_report(self.truth), paths["ground_truth"])
        write_csv(self.truth.quarterly, paths["ground_truth_quarterly"])
        return paths




# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------


class Stream:
    """Portable uniform and normal draws from one PCG64 stream."""

    def __init__(self, seed: int, stream: int):
        self._bg = np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream,)))

    def uniform(self, n: int) -> np.ndarray:
        raw = self._bg.random_raw(n)
        return (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[0::2]  # (0, 1]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:n].reshape(shape)


# ---------------------------------------------------------------------------
# calendar and loadings
# ---------------------------------------------------------------------------


def trading_calendar(start_year: int, n_quarters: int, days_per_quarter: int):
    """First ``days_per_quarter`` weekdays of each calendar quarter, or all
    calendar days when the quarter has too few weekdays."""
    dates, qidx = [], []
    for q in range(n_quarters):
        year = start_year + q // 4
        month = 3 * (q % 4) + 1
        start = pd.Timestamp(year=year, month=month, day=1)
        end = start + pd.offsets.QuarterEnd(startingMonth=3)
        days = pd.bdate_range(start, end)
        if len(days) < days_per_quarter:
            days = pd.date_range(start, end)
        if len(days) < days_per_quarter:
            raise ValueError(f"quarter {year}Q{q % 4 + 1} has only {len(days)} calendar days")
        dates.append(days[:days_per_quarter])
        qidx.append(np.full(days_per_quarter, q))
    return pd.DatetimeIndex(np.concatenate([d.values for d in dates])), np.concatenate(qidx)


def solve_market_loadings(beta, kappa, weights, idio_var, sig_phi, sig_gam, rho):
    """Loadings on the market shock giving leave-one-out population betas
    equal to ``beta``.

    The leave-one-out market change for stock ``i`` is
    ``L_i dphi + K_i dgam + sum_{j != i} w_j du_j / (1 - w_i)``; the
    population coefficient of stock ``i``'s change on it is
    ``cov / var`` with the factor covariance ``[[sp^2, r sp sg], [r sp sg, sg^2]]``.
    """
    beta = np.asarray(beta, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    s2 = np.asarray(idio_var, dtype=float) * np.ones_like(w)
    c = rho * sig_phi * sig_gam
    one_minus = 1.0 - w
    V = ((w**2 * s2).sum() - w**2 * s2) / one_minus**2
    K = ((w * kappa).sum() - w * kappa) / one_minus
    if np.all(beta == 0) and np.all(kappa == 0):
        return np.zeros_like(beta)
    if sig_phi == 0:
        raise ValueError("nonzero target betas need a positive market_illiq noise scale")

    def loadings_given(Lfull):
        # Unknown per stock: its leave-one-out aggregate Lm. Substituting
        # lam = (Lfull - (1 - w) Lm) / w gives a quadratic in Lm; the branch
        # that tends to Lfull as w -> 0 is the consistent one.
        a2 = -(sig_phi**2) * (one_minus + w * beta)
        a1 = Lfull * sig_phi**2 - one_minus * c * K - 2 * w * beta * c * K + w * kappa * c
        a0 = Lfull * c * K - w * beta * (K**2 * sig_gam**2 + V) + w * kappa * sig_gam**2 * K
        disc = a1**2 - 4 * a2 * a0
        if np.any(disc < 0):
            return None
        q = -0.5 * (a1 + np.where(a1 >= 0, 1.0, -1.0) * np.sqrt(disc))
        with np.errstate(divide="ignore", invalid="ignore"):
            r1 = q / a2
            r2 = np.where(q != 0, a0 / q, r1)
        Lm = np.where(np.abs(r1 - Lfull) <= np.abs(r2 - Lfull), r1, r2)
        den = Lm**2 * sig_phi**2 + K**2 * sig_gam**2 + 2 * Lm * K * c + V
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (beta * den - kappa * (c * Lm + sig_gam**2 * K)) / (sig_phi**2 * Lm + c * K)
        return lam if np.all(np.isfinite(lam)) else None

    def gap(Lfull):
        lam = loadings_given(Lfull)
        return np.nan if lam is None else float(w @ lam - Lfull)

    lam = None
    for sign in (1.0, -1.0):
        grid = sign * np.logspace(-6, 2, 161)
        vals = np.array([gap(x) for x in grid])
        for j in range(len(grid) - 1):
            a, b = vals[j], vals[j + 1]
            if np.isfinite(a) and np.isfinite(b) and a * b <= 0:
                root = optimize.brentq(gap, grid[j], grid[j + 1], xtol=1e-15, rtol=4 * np.finfo(float).eps)
                lam = loadings_given(root)
                break
        if lam is not None:
            break

    def implied(lam):
        L = ((w * lam).sum() - w * lam) / one_minus
        den = L**2 * sig_phi**2 + K**2 * sig_gam**2 + 2 * L * K * c + V
        return (lam * (sig_phi**2 * L + c * K) + kappa * (c * L + sig_gam**2 * K)) / den, den

    if lam is None:
        # the branch choice above assumes small weights; with a few dominant
        # firms fall back to solving the full system directly
        start = np.where(beta != 0, beta, 1.0)
        sol = optimize.root(lambda x: implied(x)[0] - beta, start, method="lm", options={"xtol": 1e-15, "ftol": 1e-15})
        if not sol.success:
            raise ValueError("target betas are not attainable (no consistent market loading)")
        lam = sol.x
    got, den = implied(lam)
    if np.any(den <= 0):
        raise ValueError("config implies a non-positive market variance")
    if not np.allclose(got, beta, rtol=1e-8, atol=1e-10):
        raise ValueError("target betas are not attainable (loading solve did not converge)")
    return lam


def _population_hi_beta(lam, kappa, w, v, s2, sig_phi, sig_gam, rho):
    """Population coefficients on (market, high-ownership) changes, both
    excluding stock ``i``. ``v`` are linearised portfolio weights (zero for
    non-members). Returns the high-ownership coefficient per stock."""
    c = rho * sig_phi * sig_gam
    S = np.array([[sig_phi**2, c], [c, sig_gam**2]])
    n = len(lam)
    out = np.full(n, np.nan)
    vsum = v.sum()
    for i in range(n):
        wm = w / (1 - w[i])
        wm_i = wm.copy()
        wm_i[i] = 0.0
        if vsum - v[i] <= 0:
            continue
        vh = v / (vsum - v[i])
        vh[i] = 0.0
        m = np.array([wm_i @ lam, wm_i @ kappa])
        h = np.array([vh @ lam, vh @ kappa])
        a = np.array([lam[i], kappa[i]])
        C = np.array(
            [
                [m @ S @ m + (wm_i**2 * s2).sum(), m @ S @ h + (wm_i * vh * s2).sum()],
                [m @ S @ h + (wm_i * vh * s2).sum(), h @ S @ h + (vh**2 * s2).sum()],
            ]
        )
        rhs = np.array([a @ S @ m, a @ S @ h])
        try:
            out[i] = np.linalg.solve(C, rhs)[1]
        except np.linalg.LinAlgError:
            pass
    return out


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------


def generate_panel(config: SynthConfig) -> SyntheticPanel:
    cfg = config
    ns = cfg.noise_scales
    N = cfg.n_stocks
    Q = 4 * cfg.n_years
    dates, qidx = trading_calendar(cfg.start_year, Q, cfg.trading_days_per_quarter)
    D = len(dates)
    sids = np.array([f"S{i:04d}" for i in range(N)])
    rs = {k: Stream(cfg.seed, v) for k, v in STREAMS.items()}

    # initial prices and caps
    init = rs["initial"].normal((2, N))
    price0 = cfg.price_median * np.exp(cfg.price_dispersion * init[0])
    cap0 = cfg.cap_median * np.exp(cfg.cap_dispersion * init[1])
    if cfg.equal_caps:
        cap0 = np.full(N, cfg.cap_median)

    # ownership: group means, then a quarterly random walk
    zo = rs["ownership"].normal((2 * (Q + 1), N))
    g0 = size_groups(pd.Series(cap0, index=sids)).loc[sids].to_numpy()
    fmean = np.array([cfg.foreign_means[g] for g in g0])
    lmean = np.array([cfg.local_means[g] for g in g0])
    F = np.empty((Q + 1, N))
    Lo = np.empty((Q + 1, N))
    F[0] = np.clip(fmean + ns["ownership"] * zo[0], 0.01, 0.95)
    Lo[0] = np.clip(lmean + ns["ownership"] * zo[1], 0.01, 0.95)
    for q in range(1, Q + 1):
        F[q] = np.clip(F[q - 1] + ns["ownership_walk"] * zo[2 * q], 0.01, 0.95)
        Lo[q] = np.clip(Lo[q - 1] + ns["ownership_walk"] * zo[2 * q + 1], 0.01, 0.95)
    Lo = np.minimum(Lo, np.maximum(0.98 - F, 0.0))
    # returns: lognormal magnitude with a market volume factor, sign with a
    # market component; magnitudes are independent of the illiquidity shocks
    psi = cfg.volume_beta_base + cfg.volume_beta_slope * (F[0] - F[0].mean())
    sa, sx = ns["abs_return"], ns["volume_factor"]
    chi = sx * rs["volume"].normal(D)
    za = rs["returns"].normal((D, N))
    zm = rs["returns"].normal(D)
    ze = rs["returns"].normal((D, N))
    rho_r = cfg.market_return_correlation
    direction = rho_r * zm[:, None] + math.sqrt(1 - rho_r**2) * ze
    magnitude = np.minimum(cfg.return_scale * np.exp(psi[None, :] * chi[:, None] + sa * za), 0.5)
    shrink = np.ones((D, N))
    if cfg.jump_probability > 0 and ns["jump"] > 0:
        # rare days with an unusually small price move on ordinary volume;
        # they are illiquidity outliers that the sample filter should remove
        hit = rs["jumps"].uniform(D * N).reshape(D, N) < cfg.jump_probability
        size = ns["jump"] * (1.0 + np.abs(rs["jumps"].normal((D, N))))
        shrink = np.exp(-np.where(hit, size, 0.0))
    ret = np.where(direction >= 0, 1.0, -1.0) * magnitude * shrink
    close = price0[None, :] * np.cumprod(1.0 + ret, axis=0)
    if cfg.equal_caps:
        shares = cap0[None, :] / close
    else:
        shares = np.broadcast_to(np.round(cap0 / price0), (D, N)).copy()
    cap = close * shares

    # quarter bookkeeping
    last_day = np.array([np.flatnonzero(qidx == q)[-1] for q in range(Q)])
    cap_end = cap[last_day]  # (Q, N)
    cap_lag = np.vstack([cap0[None, :], cap_end[:-1]])
    groups = np.empty((Q, N), dtype=object)
    for q in range(Q):
        groups[q] = size_groups(pd.Series(cap_lag[q], index=sids)).loc[sids].to_numpy()

    # index membership: top fraction by initial cap
    n_idx = int(math.floor(cfg.index_fraction * N + 1e-9))
    index_ids = top_fraction_members(pd.Series(cap0, index=sids), n_idx / N) if n_idx else np.array([], dtype=object)
    is_index = np.isin(sids, index_ids)

    # emitted quarter-end holdings (row q + 1 is the end of quarter q)
    sh_end = shares[last_day]
    f_sh = np.round(F[1:] * sh_end)
    l_sh = np.round(Lo[1:] * sh_end)
    F_emit = np.vstack([F[:1], f_sh / sh_end])
    L_emit = np.vstack([Lo[:1], l_sh / sh_end])

    # true betas and loadings per quarter
    zb = rs["betas"].normal((Q, N))
    sp, sg, rho = ns["market_illiq"], ns["hi_illiq"], cfg.factor_correlation
    su2 = ns["idio_illiq"] ** 2
    beta = np.empty((Q, N))
    kap = np.empty((Q, N))
    lam = np.empty((Q, N))
    beta_hi = np.empty((Q, N))
    mu = np.empty((Q, N))
    tau = np.empty((Q, N))
    er = cfg.return_scale * np.exp(0.5 * (psi**2 * sx**2 + sa**2))
    for q in range(Q):
        flag = F_emit[q]
        gb = np.array([cfg.group_betas[g] + cfg.group_beta_trends.get(g, 0.0) * q for g in groups[q]])
        beta[q] = gb + cfg.ownership_beta_slope * flag + cfg.beta_dispersion * zb[q]
        w = cap_lag[q] / cap_lag[q].sum()
        # centred on the cap-weighted mean so the market carries no net HI exposure
        kap[q] = cfg.hi_loading_slope * (flag - w @ flag)
        lam[q] = solve_market_loadings(beta[q], kap[q], w, su2, sp, sg, rho)
        tau[q] = cfg.turnover_base + cfg.turnover_ownership_slope * flag + cfg.index_turnover_boost * is_index
        s2 = lam[q] ** 2 * sp**2 + kap[q] ** 2 * sg**2 + 2 * lam[q] * kap[q] * rho * sp * sg + su2
        mu[q] = np.log(er / (tau[q] * cap_lag[q])) + 0.5 * s2
        members = np.isin(sids, top_fraction_members(pd.Series(flag, index=sids), 0.1))
        v = np.where(members, cap_lag[q] * np.exp(mu[q]), 0.0)
        beta_hi[q] = _population_hi_beta(lam[q], kap[q], w, v, np.full(N, su2), sp, sg, rho)

    # latent illiquidity and back-solved volume
    zf = rs["factors"].normal((2, D))
    phi = sp * zf[0]
    gam = sg * (rho * zf[0] + math.sqrt(1 - rho**2) * zf[1])
    u = ns["idio_illiq"] * rs["idio"].normal((D, N))
    log_il = mu[qidx] + lam[qidx] * phi[:, None] + kap[qidx] * gam[:, None] + u
    dvol = magnitude / np.exp(log_il)
    log_il = log_il + np.log(shrink)
    illiq = np.exp(log_il)

    # controls
    zc = rs["controls"].normal((Q + 2 * cfg.n_years + 2, N))
    spread = close * 0.002 * np.exp(0.25 * (log_il - mu[qidx]))
    ps = 0.01 * zc[:Q][qidx]
    years = qidx // 4
    bm = np.exp(-0.5 + 0.4 * zc[Q : Q + cfg.n_years])[years]
    dy = 0.03 * np.exp(0.3 * zc[Q + cfg.n_years : Q + 2 * cfg.n_years])[years]

    def flat(a):
        return np.asarray(a).T.reshape(-1)

    bars = pd.DataFrame(
        {
            "stock_id": np.repeat(sids, D),
            "date": np.tile(dates.values, N),
            "close": flat(close),
            "ret": flat(ret),
            "dollar_volume": flat(dvol),
            "shares_outstanding": flat(shares),
            "quoted_spread": flat(spread),
            "ps_illiq": flat(ps),
            "book_to_market": flat(bm),
            "dividend_yield": flat(dy),
        }
    )

    own_rows = []
    snap_dates = dates[last_day]
    for cat, held in (("foreign_institution", f_sh), ("local_institution", l_sh), ("institution", f_sh + l_sh)):
        own_rows.append(
            pd.DataFrame(
                {
                    "stock_id": np.repeat(sids, Q),
                    "date": np.tile(snap_dates.values, N),
                    "category": cat,
                    "shares_held": flat(held).astype(np.int64),
                }
            )
        )
    cat_order = {"institution": 0, "foreign_institution": 1, "local_institution": 2}
    ownership = pd.concat(own_rows, ignore_index=True)
    ownership = (
        ownership.assign(_k=ownership["category"].map(cat_order))
        .sort_values(["stock_id", "date", "_k"], kind="mergesort")
        .drop(columns="_k")
        .reset_index(drop=True)
    )
    index_members = pd.DataFrame({"stock_id": np.sort(index_ids)})

    qcode = (cfg.start_year * 4 + np.arange(Q))[:, None] * np.ones((1, N), dtype=int)
    quarterly = pd.DataFrame(
        {
            "stock_id": np.repeat(sids, Q),
            "quarter": flat(qcode).astype(int),
            "size_group": flat(groups),
            "beta_L_true": flat(beta),
            "hi_loading": flat(kap),
            "beta_HI_true": flat(beta_hi),
            "market_loading": flat(lam),
            "foreign_lag": flat(F_emit[:Q]),
            "local_lag": flat(L_emit[:Q]),
            "turnover_target": flat(tau),
            "lagged_cap": flat(cap_lag),
        }
    )
    stocks = pd.DataFrame(
        {
            "stock_id": sids,
            "beta_L_true": beta.mean(axis=0),
            "beta_HI_true": beta_hi.mean(axis=0),
            "foreign": F_emit[1:].mean(axis=0),
            "local": L_emit[1:].mean(axis=0),
            "institution": (F_emit[1:] + L_emit[1:]).mean(axis=0),
            "initial_group": g0,
            "index_member": is_index,
        }
    )
    latent = pd.DataFrame({"stock_id": bars["stock_id"], "date": bars["date"], "illiq": flat(illiq)})
    truth = GroundTruth(stocks=stocks, quarterly=quarterly, latent_illiq=latent, config=cfg)
    return SyntheticPanel(bars=bars, ownership=ownership, index_members=index_members, truth=truth)


def ground_truth_report(truth: GroundTruth) -> pd.DataFrame:
    """Per-stock true parameters, average ownership and group labels."""
    return truth.stocks.copy()
