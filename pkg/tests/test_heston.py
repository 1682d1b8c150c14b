import json
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate

from residual_hedging import bs
from residual_hedging.errors import ConvergenceError, DomainError
from residual_hedging.heston import (HestonParams, adaptive_gauss_legendre, heston_call_put,
                                     heston_log_cf, heston_price)
from residual_hedging.market import Lattice

FIXTURE = Path(__file__).parent / "fixtures" / "heston_mc.json"


def lattice_grid(spot=100.0):
    lat = Lattice()
    K, T = np.meshgrid(np.round(np.asarray(lat.moneyness) * spot), np.asarray(lat.tenor_days) / 252)
    return K.ravel(), T.ravel()


def lewis_quad(spot, strike, ttm, p):
    """Plain Lewis call price with the textbook Heston CF, integrated by scipy's QUADPACK."""
    x = np.log(spot / strike) + p.rate * ttm

    def cf(u):
        # original Heston form (j = 2 measure), written out independently of the package
        b = p.kappa - p.rho * p.xi * 1j * u
        d = np.sqrt(b * b + p.xi**2 * (u * u + 1j * u))
        g = (b - d) / (b + d)
        e = np.exp(-d * ttm)
        C = p.kappa * p.theta_bar / p.xi**2 * ((b - d) * ttm - 2 * np.log((1 - g * e) / (1 - g)))
        D = (b - d) / p.xi**2 * (1 - e) / (1 - g * e)
        return np.exp(C + D * p.v0)

    f = lambda u: (np.exp(1j * u * x) * cf(u - 0.5j)).real / (u * u + 0.25)
    val, _ = integrate.quad(f, 0, np.inf, limit=500, epsabs=1e-13, epsrel=1e-13)
    return spot - np.sqrt(spot * strike) * np.exp(-p.rate * ttm / 2) / np.pi * val


def test_cf_is_one_at_zero_and_martingale():
    p = HestonParams()
    assert abs(heston_log_cf(0.0, 1.0, p.v0, p.kappa, p.theta_bar, p.xi, p.rho)) < 1e-14
    # E[S_T / S_0 e^{-rT}] = 1  <=>  CF at w = -i equals 1
    assert abs(heston_log_cf(-1j, 1.0, p.v0, p.kappa, p.theta_bar, p.xi, p.rho)) < 1e-12


def test_degenerate_limit_matches_black_scholes():
    # with rho = 0 the price differs from BS only at second order in xi
    p = HestonParams(xi=1e-6, rho=0.0, v0=0.04, theta_bar=0.04)
    K, T = lattice_grid()
    for kind in ("call", "put"):
        h = heston_price(100.0, K, T, p, kind)
        b = bs.bs_price(100.0, K, T, p.rate, 0.2, kind)
        np.testing.assert_allclose(h, b, rtol=1e-6, atol=0)


def test_correlated_limit_shrinks_linearly_in_xi():
    # with rho != 0 the gap to BS is first order in xi; it must shrink tenfold per decade
    K, T = lattice_grid()
    gaps = []
    for xi in (1e-5, 1e-6, 1e-7):
        p = HestonParams(xi=xi, rho=-0.7)
        h = heston_price(100.0, K, T, p, "call")
        gaps.append(np.max(np.abs(h / bs.bs_price(100.0, K, T, p.rate, 0.2, "call") - 1)))
    assert gaps[0] / gaps[1] == pytest.approx(10, rel=0.01)
    assert gaps[1] / gaps[2] == pytest.approx(10, rel=0.01)
    assert gaps[2] < 1e-6


def test_matches_monte_carlo_fixture():
    ref = json.loads(FIXTURE.read_text())
    p = HestonParams(**{k: ref["params"][k] for k in ("s0", "v0", "kappa", "theta_bar", "xi", "rho", "rate")})
    assert p == HestonParams()   # the fixture is for the default parameter set
    for case in ref["cases"]:
        price = heston_price(p.s0, case["strike"], case["ttm"], p, case["kind"])
        assert abs(price - case["price"]) <= 3 * case["stderr"], case


@pytest.mark.parametrize("params,strike,ttm", [
    (HestonParams(), 100.0, 1.0),
    (HestonParams(), 80.0, 0.25),
    (HestonParams(), 130.0, 2.0),
    (HestonParams(kappa=2.0, xi=0.5), 95.0, 0.5),
    (HestonParams(kappa=1.0, xi=1.0, rho=-0.9, v0=0.09), 110.0, 1.5),
])
def test_matches_independent_quadrature(params, strike, ttm):
    assert heston_price(100.0, strike, ttm, params, "call") == pytest.approx(
        lewis_quad(100.0, strike, ttm, params), abs=1e-9)


def test_put_call_parity():
    p = HestonParams()
    K, T = lattice_grid()
    v = np.linspace(0.005, 0.2, K.size)
    call, put = heston_call_put(100.0, K, T, p, variance=v)
    assert np.max(np.abs(call - put - (100.0 - K * np.exp(-p.rate * T)))) < 1e-7


def test_prices_respect_bounds_and_convexity():
    p = HestonParams()
    K = np.linspace(60, 160, 101)
    c = heston_price(100.0, K, 0.5, p, "call")
    assert np.all(c >= np.maximum(100 - K * np.exp(-p.rate * 0.5), 0) - 1e-10) and np.all(c <= 100)
    assert np.all(np.diff(c) < 0) and np.all(np.diff(c, 2) > -1e-10)


def test_scalar_and_shape():
    p = HestonParams()
    assert isinstance(heston_price(100.0, 100.0, 1.0, p), float)
    assert heston_price(100.0, np.full((2, 3), 100.0), 1.0, p).shape == (2, 3)


def test_domain_errors():
    with pytest.raises(DomainError):
        HestonParams(rho=1.0)
    with pytest.raises(DomainError):
        HestonParams(xi=0.0)
    with pytest.raises(DomainError):
        heston_price(100.0, 100.0, 0.0, HestonParams())


def test_feller_ratio_in_metadata():
    p = HestonParams(kappa=2.0, theta_bar=0.04, xi=0.5)
    assert p.feller_ratio == pytest.approx(0.64)
    assert p.to_dict()["feller_ratio"] == pytest.approx(0.64)


def test_quadrature_panel_cap():
    with pytest.raises(ConvergenceError):
        adaptive_gauss_legendre(lambda x: np.sin(1e4 * x)[None, :], 0.0, 1.0, 1e-14, max_panels=50)


def test_quadrature_exact_for_polynomials():
    got = adaptive_gauss_legendre(lambda x: np.stack([x**5, np.exp(x)]), 0.0, 2.0, 1e-13)
    np.testing.assert_allclose(got, [64 / 6, np.exp(2) - 1], rtol=1e-13)
