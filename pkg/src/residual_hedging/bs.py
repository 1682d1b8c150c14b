"""Closed-form Black-Scholes analytics for European options (no dividends).

All functions broadcast over numpy arrays.  Conventions:

* ``ttm`` is a year fraction (ACT/365) and ``vol`` an annualized volatility.
* ``vega`` is per unit of volatility (not per vol point).
* ``theta`` is the derivative of the price with respect to calendar time,
  per year.  It is usually negative for a long option.  Vendors often quote
  theta per day or with the opposite sign, so map units when ingesting.

Zero total volatility (``vol == 0`` or ``ttm == 0``) returns the
discounted-forward intrinsic value and a step-function delta: 1 above the
discounted strike, 0 below and 0.5 exactly at it.  Gamma and vega are 0 there.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import ndtr

from .errors import ConvergenceError, DomainError, OutOfBoundsError

ArrayLike = Union[float, np.ndarray]

CALL = "call"
PUT = "put"
_SQRT_2PI = np.sqrt(2.0 * np.pi)

IV_LOWER = 1e-6
IV_UPPER = 5.0
IV_INITIAL = 0.2
IV_MAX_ITER = 100


def norm_pdf(x):
    return np.exp(-0.5 * np.square(x)) / _SQRT_2PI


def norm_cdf(x):
    """Standard normal CDF (Cephes ``ndtr``; accurate far into both tails)."""
    return ndtr(x)


def is_call_mask(kind) -> np.ndarray:
    """Map ``"call"``/``"put"`` strings (or booleans) to a boolean call mask."""
    arr = np.asarray(kind)
    if arr.dtype == bool:
        return arr
    lowered = np.char.lower(arr.astype(str))
    ok = (lowered == CALL) | (lowered == PUT)
    if not np.all(ok):
        raise DomainError(f"option kind must be 'call' or 'put', got {kind!r}")
    return lowered == CALL


@dataclass(frozen=True)
class EuroOptionTerms:
    spot: float
    strike: float
    ttm: float
    rate: float = 0.0
    vol: float = 0.2
    kind: str = CALL

    def __post_init__(self):
        _check_domain(self.spot, self.strike, self.ttm, self.rate, self.vol)
        is_call_mask(self.kind)


@dataclass(frozen=True)
class GreekSet:
    price: ArrayLike
    delta: ArrayLike
    gamma: ArrayLike
    vega: ArrayLike
    theta: ArrayLike


def _check_domain(spot, strike, ttm, rate, vol):
    spot, strike, ttm, rate, vol = (np.asarray(a, dtype=float) for a in (spot, strike, ttm, rate, vol))
    for name, arr in (("spot", spot), ("strike", strike), ("ttm", ttm), ("rate", rate), ("vol", vol)):
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"{name} must be finite")
    if np.any(spot <= 0) or np.any(strike <= 0):
        raise DomainError("spot and strike must be positive")
    if np.any(ttm < 0) or np.any(vol < 0):
        raise DomainError("ttm and vol must be non-negative")


def black_scholes(spot, strike, ttm, rate=0.0, vol=0.2, kind=CALL) -> GreekSet:
    """Price and Greeks for calls/puts; every argument broadcasts."""
    _check_domain(spot, strike, ttm, rate, vol)
    is_call = is_call_mask(kind)
    S, K, T, r, sig, is_call = np.broadcast_arrays(
        np.asarray(spot, float), np.asarray(strike, float), np.asarray(ttm, float),
        np.asarray(rate, float), np.asarray(vol, float), is_call)

    disc = np.exp(-r * T)
    kd = K * disc
    sqrt_t = np.sqrt(T)
    total = sig * sqrt_t
    live = total > 0

    with np.errstate(divide="ignore", invalid="ignore"):
        safe_total = np.where(live, total, 1.0)
        d1 = (np.log(S / K) + (r + 0.5 * sig * sig) * T) / safe_total
        d2 = d1 - safe_total
        pdf = norm_pdf(d1)
        call_price = S * norm_cdf(d1) - kd * norm_cdf(d2)
        put_price = kd * norm_cdf(-d2) - S * norm_cdf(-d1)
        gamma = pdf / (S * safe_total)
        vega = S * pdf * sqrt_t
        decay = -S * pdf * sig / (2.0 * np.where(live, sqrt_t, 1.0))
        call_theta = decay - r * kd * norm_cdf(d2)
        put_theta = decay + r * kd * norm_cdf(-d2)

    price = np.where(is_call, call_price, put_price)
    delta = np.where(is_call, norm_cdf(d1), -norm_cdf(-d1))
    theta = np.where(is_call, call_theta, put_theta)

    if not np.all(live):
        itm_call = np.where(S > kd, 1.0, np.where(S < kd, 0.0, 0.5))
        lim_price = np.where(is_call, np.maximum(S - kd, 0.0), np.maximum(kd - S, 0.0))
        lim_delta = np.where(is_call, itm_call, itm_call - 1.0)
        lim_theta = np.where(is_call, -r * kd * itm_call, r * kd * (1.0 - itm_call))
        price = np.where(live, price, lim_price)
        delta = np.where(live, delta, lim_delta)
        gamma = np.where(live, gamma, 0.0)
        vega = np.where(live, vega, 0.0)
        theta = np.where(live, theta, lim_theta)

    return GreekSet(price=price, delta=delta, gamma=gamma, vega=vega, theta=theta)


def bs_price(spot, strike, ttm, rate=0.0, vol=0.2, kind=CALL):
    return black_scholes(spot, strike, ttm, rate, vol, kind).price


def bs_price_greeks(terms: EuroOptionTerms) -> GreekSet:
    """Scalar price and Greeks for one set of option terms."""
    g = black_scholes(terms.spot, terms.strike, terms.ttm, terms.rate, terms.vol, terms.kind)
    return GreekSet(*(float(v) for v in (g.price, g.delta, g.gamma, g.vega, g.theta)))


def price_bounds(spot, strike, ttm, rate=0.0, kind=CALL):
    """No-arbitrage (lower, upper) price bounds."""
    is_call = is_call_mask(kind)
    kd = np.asarray(strike, float) * np.exp(-np.asarray(rate, float) * np.asarray(ttm, float))
    spot = np.asarray(spot, float)
    lower = np.where(is_call, np.maximum(spot - kd, 0.0), np.maximum(kd - spot, 0.0))
    upper = np.where(is_call, spot, kd)
    return lower, upper


def implied_vol(target_price, spot, strike, ttm, rate=0.0, kind=CALL, *,
                tol=1e-10, max_iter=IV_MAX_ITER, errors="raise"):
    """Invert the Black-Scholes price for volatility.

    Newton's method on the log of the out-of-the-money price (calls above the
    discounted strike are converted to puts via parity and vice versa),
    starting at 0.2 and falling back to bisection on ``[1e-6, 5]`` whenever
    a Newton step leaves the current bracket.

    The result satisfies ``|bs_price(vol) - target| <= tol * max(1, target)``.
    Iteration continues past that point until the step is at rounding level,
    so well-conditioned inputs recover vol to near machine precision.

    ``errors="raise"`` raises :class:`OutOfBoundsError` for prices outside
    the no-arbitrage bounds and :class:`ConvergenceError` when the iteration
    cap is hit.  ``errors="nan"`` returns NaN for those entries instead.
    """
    if errors not in ("raise", "nan"):
        raise ValueError("errors must be 'raise' or 'nan'")
    _check_domain(spot, strike, ttm, rate, 0.0)
    is_call = is_call_mask(kind)
    t, S, K, T, r, is_call = np.broadcast_arrays(
        np.asarray(target_price, float), np.asarray(spot, float), np.asarray(strike, float),
        np.asarray(ttm, float), np.asarray(rate, float), is_call)
    shape = t.shape
    t, S, K, T, r, is_call = (np.array(a).ravel() for a in (t, S, K, T, r, is_call))

    kd = K * np.exp(-r * T)
    lower, upper = price_bounds(S, K, T, r, is_call)
    # out-of-the-money side: calls with S <= K e^{-rT}, puts otherwise.
    # A subnormal OTM value carries too few bits to pin down a vol.
    otm_call = S <= kd
    otm_target = np.where(is_call == otm_call, t, t - np.where(is_call, S - kd, kd - S))
    oob = ~((t > lower) & (t < upper) & (T > 0) & (otm_target >= np.finfo(float).tiny))
    if np.any(oob) and errors == "raise":
        i = int(np.flatnonzero(oob)[0])
        raise OutOfBoundsError(
            f"target price {t[i]!r} outside no-arbitrage bounds ({lower[i]!r}, {upper[i]!r})")

    sigma = np.full(t.shape, IV_INITIAL)
    lo = np.full(t.shape, IV_LOWER)
    hi = np.full(t.shape, IV_UPPER)
    active = ~oob
    done = np.zeros(t.shape, bool)
    log_target = np.log(np.where(active, otm_target, 1.0))

    for _ in range(max_iter):
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        g = black_scholes(S[idx], K[idx], T[idx], r[idx], sigma[idx], otm_call[idx])
        p = g.price
        f = p - otm_target[idx]
        lo[idx] = np.where(f < 0, sigma[idx], lo[idx])
        hi[idx] = np.where(f > 0, sigma[idx], hi[idx])
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            step = (np.log(p) - log_target[idx]) * p / g.vega
            newton = sigma[idx] - step
        ok = np.isfinite(newton) & (newton > lo[idx]) & (newton < hi[idx])
        new_sigma = np.where(ok, newton, 0.5 * (lo[idx] + hi[idx]))
        price_ok = np.abs(f) <= tol * np.maximum(1.0, t[idx])
        moved = np.abs(new_sigma - sigma[idx])
        settled = (moved <= 4e-16 * sigma[idx]) | (hi[idx] - lo[idx] <= 4e-16 * hi[idx]) | (f == 0)
        finished = price_ok & settled
        sigma[idx] = np.where(finished, sigma[idx], new_sigma)
        done[idx[finished]] = True
        active[idx[finished]] = False

    if np.any(active):
        # accept entries meeting the price tolerance even if the step did not settle
        idx = np.flatnonzero(active)
        p = bs_price(S[idx], K[idx], T[idx], r[idx], sigma[idx], otm_call[idx])
        meets = np.abs(p - otm_target[idx]) <= tol * np.maximum(1.0, t[idx])
        done[idx[meets]] = True
        failed = idx[~meets]
        if failed.size and errors == "raise":
            i = int(failed[0])
            raise ConvergenceError(
                f"implied vol did not converge in {max_iter} iterations for target {t[i]!r} "
                f"(spot={S[i]!r}, strike={K[i]!r}, ttm={T[i]!r})")

    out = np.where(done, sigma, np.nan)
    return float(out[0]) if shape == () else out.reshape(shape)
