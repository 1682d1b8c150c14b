"""Regenerate heston_mc.json: brute-force Monte-Carlo prices for the Heston oracle test.

Standalone on purpose (numpy only, no package imports) so the reference
values are independent of the Fourier pricer they check.

    python3 tests/fixtures/make_heston_mc.py
"""
import json
from pathlib import Path

import numpy as np

PARAMS = dict(s0=100.0, v0=0.04, kappa=5.0, theta_bar=0.04, xi=0.6, rho=-0.7, rate=0.02)
CASES = [
    dict(kind="call", strike=100.0, ttm=1.0),
    dict(kind="put", strike=90.0, ttm=0.5),
]
N_PATHS = 1_000_000        # antithetic pairs count as two paths
STEPS_PER_YEAR = 2016      # 8 steps per trading day
SEED = 20240601
CHUNK = 50_000


def mc_price(p, kind, strike, ttm, seed):
    n_steps = int(round(ttm * STEPS_PER_YEAR))
    dt = ttm / n_steps
    sq = np.sqrt(dt)
    rho_c = np.sqrt(1.0 - p["rho"] ** 2)
    rng = np.random.Generator(np.random.Philox(seed))
    vals = []
    for start in range(0, N_PATHS // 2, CHUNK):
        m = min(CHUNK, N_PATHS // 2 - start)
        x = np.full((2, m), np.log(p["s0"]))
        v = np.full((2, m), p["v0"])
        for _ in range(n_steps):
            z1 = rng.standard_normal(m)
            z2 = p["rho"] * z1 + rho_c * rng.standard_normal(m)
            z1, z2 = np.stack([z1, -z1]), np.stack([z2, -z2])
            vp = np.maximum(v, 0.0)     # full truncation
            sv = np.sqrt(vp) * sq
            x += (p["rate"] - 0.5 * vp) * dt + sv * z1
            v += p["kappa"] * (p["theta_bar"] - vp) * dt + p["xi"] * sv * z2
        st = np.exp(x)
        pay = np.maximum(st - strike, 0.0) if kind == "call" else np.maximum(strike - st, 0.0)
        vals.append(0.5 * (pay[0] + pay[1]))
    vals = np.concatenate(vals) * np.exp(-p["rate"] * ttm)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.size))


def main():
    out = {"params": PARAMS, "n_paths": N_PATHS, "steps_per_year": STEPS_PER_YEAR,
           "scheme": "full-truncation Euler, log-Euler spot, antithetic pairs", "cases": []}
    for i, case in enumerate(CASES):
        price, se = mc_price(PARAMS, seed=SEED + i, **case)
        out["cases"].append({**case, "seed": SEED + i, "price": price, "stderr": se})
        print(case, price, se, flush=True)
    path = Path(__file__).with_name("heston_mc.json")
    path.write_text(json.dumps(out, indent=2) + "\n")


if __name__ == "__main__":
    main()
