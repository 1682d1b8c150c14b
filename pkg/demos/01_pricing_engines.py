"""Black-Scholes and Heston side by side.

Prices a strike ladder under both models, inverts the Heston prices to
implied vols (the skew that negative spot/vol correlation produces), and
shows that Heston collapses to Black-Scholes when the vol of vol vanishes.
"""
import numpy as np

from residual_hedging.bs import black_scholes, bs_price, implied_vol
from residual_hedging.heston import HestonParams, heston_price

S, T = 100.0, 0.5
strikes = np.array([80.0, 90.0, 100.0, 110.0, 120.0])
p = HestonParams()
print(f"Heston params: {p}  (Feller ratio {p.feller_ratio:.2f})")

h = heston_price(S, strikes, T, p, "call")
iv = implied_vol(h, S, strikes, T, p.rate, "call")
g = black_scholes(S, strikes, T, p.rate, iv, "call")
print("\n strike   heston   implied vol   BS delta at that vol")
for K, price, v, d in zip(strikes, h, iv, g.delta):
    print(f"{K:7.1f} {price:9.4f} {v:12.4f} {d:12.4f}")

# vanishing vol of vol: the variance stays at v0 and the model is Black-Scholes
flat = HestonParams(xi=1e-6, rho=0.0)
gap = np.max(np.abs(heston_price(S, strikes, T, flat, "call") / bs_price(S, strikes, T, flat.rate, 0.2) - 1))
print(f"\nmax relative gap to BS(0.2) at xi=1e-6: {gap:.2e}")
