"""Heston stochastic-volatility pricing.

European prices come from a single Fourier integral (Lewis' formula) with a
Black-Scholes control variate.  The integrand is the difference between the
Black-Scholes and Heston characteristic functions, so it vanishes as the
vol-of-vol goes to zero and the result degrades gracefully to the
Black-Scholes price.  The integral is taken on ``[0, inf)`` mapped to
``[0, 1)`` with an adaptive Gauss-Legendre rule whose panels are shared by a
whole batch of options.

A full-truncation Euler Monte-Carlo pricer is included as an independent
check of the Fourier pricer.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import bs
from .errors import ConvergenceError, DomainError


@dataclass(frozen=True)
class HestonParams:
    """Heston dynamics.  ``theta_bar`` is the long-run variance, ``xi`` the vol-of-vol.

    Defaults are synthetic, not calibrated to any market: 20% long-run vol,
    a mean-reversion half-life of about seven weeks, and a Feller ratio just
    above 1 so the variance stays away from zero.
    """
    s0: float = 100.0
    v0: float = 0.04
    kappa: float = 5.0
    theta_bar: float = 0.04
    xi: float = 0.6
    rho: float = -0.7
    rate: float = 0.02

    def __post_init__(self):
        if not (self.s0 > 0 and self.v0 > 0 and self.kappa > 0 and self.theta_bar > 0 and self.xi > 0):
            raise DomainError("s0, v0, kappa, theta_bar and xi must be positive")
        if not -1.0 < self.rho < 1.0:
            raise DomainError("rho must lie in (-1, 1)")

    @property
    def feller_ratio(self) -> float:
        return 2.0 * self.kappa * self.theta_bar / self.xi**2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feller_ratio"] = self.feller_ratio
        return d


def heston_log_cf(w, ttm, v0, kappa, theta_bar, xi, rho):
    """Log of E[exp(i w X)] for X = ln(S_T / S_0) - r T, evaluated for complex ``w``.

    Uses the rotation-free ("little trap") form.  Every division by ``xi**2`` is
    cancelled algebraically, so the expression stays accurate as ``xi -> 0``.
    """
    w = np.asarray(w, dtype=complex)
    a = w * w + 1j * w
    beta = kappa - rho * xi * 1j * w
    d = np.sqrt(beta * beta + xi * xi * a)
    bpd = beta + d
    q = -a / bpd                              # (beta - d) / xi^2
    g = xi * xi * q / bpd                     # (beta - d) / (beta + d)
    e = np.exp(-d * ttm)
    z = g * (1.0 - e) / (1.0 - g)
    # log((1 - g e) / (1 - g)) / xi^2, with the xi^2 cancelled when z is small
    small = np.abs(z) < 1e-3
    zeta = q * (1.0 - e) / (bpd * (1.0 - g))  # z / xi^2
    series = zeta * (1 - z * (1 / 2 - z * (1 / 3 - z * (1 / 4 - z * (1 / 5 - z / 6)))))
    with np.errstate(invalid="ignore", divide="ignore"):
        direct = np.log(1.0 + z) / (xi * xi)
    log_ratio = np.where(small, series, direct)
    A = kappa * theta_bar * (q * ttm - 2.0 * log_ratio)
    B = q * (1.0 - e) / (1.0 - g * e)
    return A + B * v0


def average_variance(ttm, v0, kappa, theta_bar):
    """Expected average variance over [0, ttm]; used as the control-variate vol."""
    kt = kappa * np.asarray(ttm, float)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(kt > 1e-8, -np.expm1(-kt) / kt, 1.0 - 0.5 * kt)
    return theta_bar + (v0 - theta_bar) * frac


def adaptive_gauss_legendre(func, a, b, tol, *, order=16, initial_panels=8, max_panels=20000):
    """Integrate a batch of functions over ``[a, b]`` on a shared adaptive panel set.

    ``func(x)`` receives a 1-D array of abscissae and must return values of
    shape ``(batch, len(x))``.  A panel is accepted once, for every batch
    member, the ``order``-point rule on the panel and on its two halves agree
    to within ``tol * width / (b - a)``.  ``tol`` may be a scalar or a
    per-member array.  The accepted value is the two-half estimate.
    """
    x, wts = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, initial_panels + 1)
    lo, hi = edges[:-1], edges[1:]
    tol = np.asarray(tol, float)
    total = None
    used = 0
    while lo.size:
        used += lo.size
        if used > max_panels:
            raise ConvergenceError(f"adaptive quadrature exceeded {max_panels} panels")
        mid = 0.5 * (lo + hi)
        los = np.concatenate([lo, lo, mid])
        his = np.concatenate([hi, mid, hi])
        half = 0.5 * (his - los)
        pts = (los + half)[:, None] + half[:, None] * x[None, :]
        vals = func(pts.ravel())
        vals = vals.reshape(vals.shape[0], los.size, order)
        integrals = (vals * wts).sum(axis=2) * half
        n = lo.size
        whole = integrals[:, :n]
        halves = integrals[:, n:2 * n] + integrals[:, 2 * n:]
        if total is None:
            total = np.zeros(vals.shape[0])
        err = np.abs(whole - halves)
        allowed = (tol.reshape(-1, 1) if tol.ndim else tol) * (hi - lo) / (b - a)
        accept = np.all(err <= allowed, axis=0)
        total = total + halves[:, accept].sum(axis=1)
        keep = ~accept
        lo = np.concatenate([lo[keep], mid[keep]])
        hi = np.concatenate([mid[keep], hi[keep]])
    return total


def heston_price(spot, strike, ttm, params: HestonParams, kind="call", *, variance=None,
                 tol=1e-12, chunk=4096):
    """Heston European prices for arrays of (spot, strike, ttm, kind).

    ``variance`` overrides ``params.v0`` as the current instantaneous
    variance (per option), which is how a simulated panel prices each day.
    ``tol`` is the absolute price tolerance relative to spot.
    """
    call, put = heston_call_put(spot, strike, ttm, params, variance=variance, tol=tol, chunk=chunk)
    return np.where(bs.is_call_mask(kind), call, put)[()]


def heston_call_put(spot, strike, ttm, params: HestonParams, *, variance=None, tol=1e-12, chunk=4096):
    """Call and put prices sharing one Fourier integral per option.

    Put-call parity holds to rounding because both prices carry the same
    correction on top of Black-Scholes prices at the same control-variate vol.
    """
    v = params.v0 if variance is None else variance
    S, K, T, v = np.broadcast_arrays(
        np.asarray(spot, float), np.asarray(strike, float), np.asarray(ttm, float), np.asarray(v, float))
    shape = S.shape
    S, K, T, v = (np.ravel(a) for a in (S, K, T, v))
    if np.any(T <= 0) or np.any(v < 0) or np.any(S <= 0) or np.any(K <= 0):
        raise DomainError("spot, strike and ttm must be positive and variance non-negative")
    correction = np.empty(S.size)
    cv_vol = np.sqrt(np.maximum(average_variance(T, v, params.kappa, params.theta_bar), 1e-10))
    # chunks share quadrature panels, so group options with similar integrand widths
    order = np.argsort(cv_vol * np.sqrt(T), kind="stable")
    for start in range(0, S.size, chunk):
        sl = order[start:start + chunk]
        correction[sl] = _fourier_correction(S[sl], K[sl], T[sl], v[sl], cv_vol[sl], params, tol)
    g_call = bs.bs_price(S, K, T, params.rate, cv_vol, bs.CALL)
    g_put = bs.bs_price(S, K, T, params.rate, cv_vol, bs.PUT)
    call = (g_call + correction).reshape(shape)
    put = (g_put + correction).reshape(shape)
    return call[()], put[()]


def _fourier_correction(S, K, T, v, cv_vol, p: HestonParams, tol):
    """Heston price minus the Black-Scholes price at ``cv_vol`` (identical for calls and puts)."""
    cv_var = cv_vol * cv_vol
    kd = K * np.exp(-p.rate * T)
    k = np.log(S / kd)

    # the CF depends only on (ttm, variance): evaluate it once per unique pair
    keys, first, inverse = np.unique(np.stack([T, v]), axis=1, return_index=True, return_inverse=True)
    inverse = np.ravel(inverse)
    gT, gv = keys
    g_var = cv_var[first]
    g_scale = 1.0 / np.sqrt(g_var * gT)  # characteristic width of the integrand in u
    scale = g_scale[inverse]

    def integrand(t):
        # u = scale * t / (1 - t) maps [0, 1) onto [0, inf)
        ug = g_scale[:, None] * (t / (1.0 - t))[None, :]
        log_h = heston_log_cf(ug - 0.5j, gT[:, None], gv[:, None], p.kappa, p.theta_bar, p.xi, p.rho)
        psi_bs = np.exp(-0.5 * (g_var * gT)[:, None] * (ug * ug + 0.25))
        diff = (psi_bs - np.exp(log_h)) / (ug * ug + 0.25)
        phase = ug[inverse] * k[:, None]
        diff = diff[inverse]
        vals = np.cos(phase) * diff.real - np.sin(phase) * diff.imag
        return vals * (scale[:, None] / (1.0 - t)[None, :] ** 2)

    weight = np.sqrt(S * kd) / np.pi
    return weight * adaptive_gauss_legendre(integrand, 0.0, 1.0, tol * S / weight)


def heston_mc_price(params: HestonParams, strike, ttm, *, n_paths=1_000_000, steps_per_year=2016,
                    seed=0, kind="call", chunk=100_000):
    """Monte-Carlo price with antithetic variates; returns ``(price, standard_error)``.

    Full-truncation Euler on the variance, log-Euler on the spot.  ``n_paths``
    counts both members of each antithetic pair.
    """
    is_call = bool(bs.is_call_mask(kind))
    n_steps = max(1, int(round(ttm * steps_per_year)))
    dt = ttm / n_steps
    sq = np.sqrt(dt)
    rho_c = np.sqrt(1.0 - params.rho**2)
    rng = np.random.Generator(np.random.Philox(seed))
    pair_values = []
    n_pairs = n_paths // 2
    for start in range(0, n_pairs, chunk):
        m = min(chunk, n_pairs - start)
        x = np.full((2, m), np.log(params.s0))
        var = np.full((2, m), params.v0)
        for _ in range(n_steps):
            z1 = rng.standard_normal(m)
            z2 = params.rho * z1 + rho_c * rng.standard_normal(m)
            z1 = np.stack([z1, -z1])
            z2 = np.stack([z2, -z2])
            vp = np.maximum(var, 0.0)
            sv = np.sqrt(vp) * sq
            x += (params.rate - 0.5 * vp) * dt + sv * z1
            var += params.kappa * (params.theta_bar - vp) * dt + params.xi * sv * z2
        st = np.exp(x)
        payoff = np.maximum(st - strike, 0.0) if is_call else np.maximum(strike - st, 0.0)
        pair_values.append(0.5 * (payoff[0] + payoff[1]))
    vals = np.concatenate(pair_values) * np.exp(-params.rate * ttm)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.size))
