"""Synthetic option-market panels.

A panel is a run of trading days.  Each day has an underlier snapshot and a
lattice of quoted European options.  Two generators share one contract
schedule:

* geometric Brownian motion, where every quote is a Black-Scholes price at
  the true vol.  This is the null model: the Black-Scholes delta is already
  (nearly) the minimum-variance hedge.
* Heston stochastic volatility, with quotes priced by the Fourier pricer and
  their implied vols and Greeks backed out through Black-Scholes.  With
  ``rho < 0`` the minimum-variance hedge differs from the Black-Scholes delta.

Contract schedule: each expiry tenor is a slot holding one live series of
strikes, ``round(moneyness * spot)`` at listing.  When a series expires, the
slot lists a fresh series with the same tenor that day.  Every day therefore
quotes ``tenors x strikes x 2`` contracts.  Tenors are counted in trading
months of 21 days.  Time to maturity is ``trading days left / 252`` years,
and ``ttm_days`` is the same quantity in calendar days (times 365).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np
import pandas as pd

from . import bs
from .errors import ConfigError, DomainError
from .heston import HestonParams, heston_call_put

TRADING_DAYS = 252
CALENDAR_DAYS = 365
DAYS_PER_MONTH = 21
VIX_TENOR_DAYS = 30  # calendar days

QUOTE_COLUMNS = [
    "date_index", "contract_id", "kind", "spot", "strike", "ttm_days", "mid", "implied_vol",
    "delta_bs", "gamma_bs", "vega_bs", "theta_bs", "vix_proxy", "index_return",
]


@dataclass(frozen=True)
class GbmParams:
    s0: float = 100.0
    drift: float = 0.02
    vol: float = 0.2
    rate: float = 0.02

    def __post_init__(self):
        if not (self.s0 > 0 and self.vol > 0):
            raise DomainError("s0 and vol must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Lattice:
    moneyness: tuple = tuple(round(0.80 + 0.05 * i, 2) for i in range(9))
    tenor_months: tuple = (1, 2, 3, 6, 12, 24)

    def __post_init__(self):
        if not self.moneyness or not self.tenor_months:
            raise ConfigError("strike/expiry lattice must be nonempty")
        if any(m <= 0 for m in self.moneyness) or any(t <= 0 for t in self.tenor_months):
            raise ConfigError("lattice moneyness and tenors must be positive")

    @property
    def tenor_days(self) -> list[int]:
        return [int(m) * DAYS_PER_MONTH for m in self.tenor_months]

    @property
    def size(self) -> int:
        """Contracts quoted per day (both kinds), assuming distinct rounded strikes."""
        return len(self.moneyness) * len(self.tenor_months) * 2

    def to_dict(self) -> dict:
        return {"moneyness": list(self.moneyness), "tenor_months": list(self.tenor_months)}


@dataclass(frozen=True)
class OptionQuote:
    contract_id: str
    date_index: int
    spot: float
    strike: float
    ttm_days: float
    kind: str
    mid_price: float
    implied_vol: float
    delta_bs: float
    gamma_bs: float
    vega_bs: float
    theta_bs: float

    @property
    def ttm(self) -> float:
        return self.ttm_days / CALENDAR_DAYS


@dataclass(frozen=True)
class MarketSnapshot:
    date_index: int
    spot: float
    instantaneous_vol: float
    vix_proxy: float
    index_return: float
    quotes: tuple = ()


@dataclass
class MarketPanel:
    """Quotes (canonical columns) plus one row of underlier state per trading day."""
    quotes: pd.DataFrame
    snapshots: pd.DataFrame
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.snapshots)

    def iter_snapshots(self) -> Iterator[MarketSnapshot]:
        groups = dict(tuple(self.quotes.groupby("date_index", sort=True)))
        for row in self.snapshots.itertuples(index=False):
            day = groups.get(row.date_index)
            quotes = () if day is None else tuple(quotes_from_frame(day))
            yield MarketSnapshot(int(row.date_index), float(row.spot), float(row.instantaneous_vol),
                                 float(row.vix_proxy), float(row.index_return), quotes)


def quotes_from_frame(df: pd.DataFrame) -> Iterator[OptionQuote]:
    for row in df.itertuples(index=False):
        yield OptionQuote(
            contract_id=row.contract_id, date_index=int(row.date_index), spot=row.spot,
            strike=row.strike, ttm_days=row.ttm_days, kind=row.kind, mid_price=row.mid,
            implied_vol=row.implied_vol, delta_bs=row.delta_bs, gamma_bs=row.gamma_bs,
            vega_bs=row.vega_bs, theta_bs=row.theta_bs)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator: reproducible and independent of thread layout."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def simulate_gbm_paths(params: GbmParams, n_days: int, n_paths: int, rng: np.random.Generator) -> np.ndarray:
    """Daily spot paths with exact lognormal increments; shape ``(n_paths, n_days)``, column 0 is ``s0``."""
    dt = 1.0 / TRADING_DAYS
    z = rng.standard_normal((n_paths, n_days - 1))
    steps = (params.drift - 0.5 * params.vol**2) * dt + params.vol * np.sqrt(dt) * z
    logs = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(steps, axis=1)], axis=1)
    return params.s0 * np.exp(logs)


def simulate_heston_path(params: HestonParams, n_days: int, rng: np.random.Generator, substeps: int = 8):
    """Full-truncation Euler with ``substeps`` per trading day.

    Returns daily ``(spot, variance)`` arrays of length ``n_days``.  The spot
    drifts at the risk-free rate.  The variance stays non-negative because
    negative values are truncated to zero in both drift and diffusion and
    the reported variance is ``max(v, 0)``.
    """
    dt = 1.0 / (TRADING_DAYS * substeps)
    sq = np.sqrt(dt)
    rho_c = np.sqrt(1.0 - params.rho**2)
    z = rng.standard_normal((n_days - 1, substeps, 2))
    spot = np.empty(n_days)
    var = np.empty(n_days)
    x, v = np.log(params.s0), params.v0
    spot[0], var[0] = params.s0, params.v0
    for day in range(1, n_days):
        for j in range(substeps):
            z1, z3 = z[day - 1, j]
            vp = v if v > 0.0 else 0.0
            sv = np.sqrt(vp) * sq
            x += (params.rate - 0.5 * vp) * dt + sv * z1
            v += params.kappa * (params.theta_bar - vp) * dt + params.xi * sv * (params.rho * z1 + rho_c * z3)
        spot[day] = np.exp(x)
        var[day] = max(v, 0.0)
    return spot, var


def contract_schedule(spots: np.ndarray, lattice: Lattice) -> pd.DataFrame:
    """Every (day, contract) pair quoted under the slot-rolling lattice."""
    n_days = len(spots)
    days = np.arange(n_days)
    frames = []
    for slot, tenor in enumerate(lattice.tenor_days):
        for listed in range(0, n_days, tenor):
            expiry = listed + tenor
            strikes = np.unique(np.round(np.asarray(lattice.moneyness) * spots[listed]))
            strikes = strikes[strikes > 0]
            live = days[listed:min(expiry, n_days)]
            d, k = np.meshgrid(live, strikes, indexing="ij")
            frames.append(pd.DataFrame({
                "date_index": d.ravel(), "slot": slot, "strike": k.ravel(),
                "expiry": expiry, "listed": listed}))
    sched = pd.concat(frames, ignore_index=True)
    sched = sched.sort_values(["date_index", "slot", "strike"], kind="stable").reset_index(drop=True)
    return sched


def _expand_kinds(sched: pd.DataFrame, spots: np.ndarray) -> pd.DataFrame:
    both = pd.concat([sched.assign(kind=bs.CALL), sched.assign(kind=bs.PUT)], ignore_index=True)
    both = both.sort_values(["date_index", "slot", "strike", "kind"], kind="stable").reset_index(drop=True)
    both["spot"] = spots[both["date_index"].to_numpy()]
    both["ttm_days"] = (both["expiry"] - both["date_index"]).to_numpy() * (CALENDAR_DAYS / TRADING_DAYS)
    both["contract_id"] = [
        f"{'C' if kd == bs.CALL else 'P'}{int(e)}-K{k:g}-L{int(l)}"
        for kd, e, k, l in zip(both["kind"], both["expiry"], both["strike"], both["listed"])]
    return both


def _log_returns(spots: np.ndarray) -> np.ndarray:
    out = np.zeros_like(spots)
    out[1:] = np.diff(np.log(spots))
    return out


def _finish(rows: pd.DataFrame) -> pd.DataFrame:
    rows = rows.copy()
    rows["date_index"] = rows["date_index"].astype(np.int64)
    return rows[QUOTE_COLUMNS].reset_index(drop=True)


def simulate_gbm_panel(params: GbmParams, calendar: int, lattice: Optional[Lattice] = None,
                       seed: int = 0) -> MarketPanel:
    """Panel under constant-vol GBM; every quote's implied vol is exactly ``params.vol``."""
    if calendar < 2:
        raise ConfigError("calendar must span at least 2 trading days")
    lattice = lattice or Lattice()
    spots = simulate_gbm_paths(params, calendar, 1, make_rng(seed))[0]
    rows = _expand_kinds(contract_schedule(spots, lattice), spots)
    ttm = rows["ttm_days"].to_numpy() / CALENDAR_DAYS
    g = bs.black_scholes(rows["spot"].to_numpy(), rows["strike"].to_numpy(), ttm, params.rate,
                         params.vol, rows["kind"].to_numpy())
    rets = _log_returns(spots)
    rows = rows.assign(mid=g.price, implied_vol=params.vol, delta_bs=g.delta, gamma_bs=g.gamma,
                       vega_bs=g.vega, theta_bs=g.theta, vix_proxy=params.vol,
                       index_return=rets[rows["date_index"].to_numpy()])
    snapshots = pd.DataFrame({"date_index": np.arange(calendar), "spot": spots,
                              "instantaneous_vol": params.vol, "vix_proxy": params.vol,
                              "index_return": rets})
    meta = {"model": "gbm", "params": params.to_dict(), "lattice": lattice.to_dict(),
            "calendar": calendar, "seed": seed, "rate": params.rate, "dropped_quotes": 0}
    return MarketPanel(_finish(rows), snapshots, meta)


def simulate_heston_panel(params: HestonParams, calendar: int, lattice: Optional[Lattice] = None,
                          seed: int = 0, substeps: int = 8, min_otm_value: float = 1e-10) -> MarketPanel:
    """Panel under Heston dynamics.

    Quotes whose out-of-the-money value is below ``min_otm_value * spot`` are
    dropped.  At that size the price is indistinguishable from intrinsic, so no
    meaningful implied vol exists, and such contracts have |delta| far outside
    any hedging filter.  The number dropped is recorded in the metadata.
    """
    if calendar < 2:
        raise ConfigError("calendar must span at least 2 trading days")
    lattice = lattice or Lattice()
    spots, var = simulate_heston_path(params, calendar, make_rng(seed), substeps)
    sched = contract_schedule(spots, lattice)
    r = params.rate

    S = spots[sched["date_index"].to_numpy()]
    K = sched["strike"].to_numpy()
    ttm = (sched["expiry"] - sched["date_index"]).to_numpy() / TRADING_DAYS
    v = var[sched["date_index"].to_numpy()]
    call, put = heston_call_put(S, K, ttm, params, variance=v)
    kd = K * np.exp(-r * ttm)
    otm_call = S <= kd
    otm_price = np.where(otm_call, call, put)
    usable = otm_price >= min_otm_value * S
    iv = np.full(S.shape, np.nan)
    iv[usable] = bs.implied_vol(otm_price[usable], S[usable], K[usable], ttm[usable], r,
                                otm_call[usable], errors="nan")
    usable &= np.isfinite(iv)

    days = np.arange(calendar)
    atm_call, _ = heston_call_put(spots, spots, VIX_TENOR_DAYS / CALENDAR_DAYS, params, variance=var)
    vix = bs.implied_vol(atm_call, spots, spots, VIX_TENOR_DAYS / CALENDAR_DAYS, r, bs.CALL)
    rets = _log_returns(spots)

    sched = sched.assign(call=call, put=put, iv=iv)[usable]
    rows = _expand_kinds(sched.drop(columns=["call", "put", "iv"]), spots)
    # _expand_kinds keeps the (date, slot, strike) order with call before put
    rows["mid"] = np.column_stack([sched["call"], sched["put"]]).ravel()
    rows["implied_vol"] = np.repeat(sched["iv"].to_numpy(), 2)
    g = bs.black_scholes(rows["spot"].to_numpy(), rows["strike"].to_numpy(),
                         rows["ttm_days"].to_numpy() / CALENDAR_DAYS, r,
                         rows["implied_vol"].to_numpy(), rows["kind"].to_numpy())
    di = rows["date_index"].to_numpy()
    rows = rows.assign(delta_bs=g.delta, gamma_bs=g.gamma, vega_bs=g.vega, theta_bs=g.theta,
                       vix_proxy=vix[di], index_return=rets[di])
    snapshots = pd.DataFrame({"date_index": days, "spot": spots, "instantaneous_vol": np.sqrt(var),
                              "vix_proxy": vix, "index_return": rets})
    meta = {"model": "heston", "params": params.to_dict(), "lattice": lattice.to_dict(),
            "calendar": calendar, "seed": seed, "substeps": substeps, "rate": r,
            "dropped_quotes": int(2 * (~usable).sum())}
    return MarketPanel(_finish(rows), snapshots, meta)
