"""Synthetic market series and county yield panel used by the CLI tests.

Run from this directory: python3 gen_fixtures.py
"""
import numpy as np

rng = np.random.default_rng(20190501)
years = np.arange(1990, 2019)
T = len(years)

prod = np.round(7900 + 230 * (years - 1990) + rng.normal(0, 500, T))
stocks = np.round(np.clip(rng.normal(1400, 350, T), 700, 2300))
# 1990s carryover stocks average exactly 1327 million bushels.
stocks[:10] += np.round((13270 - stocks[:10].sum()) / 10)
stocks[9] += 13270 - stocks[:10].sum()
assert stocks[:10].sum() == 13270 and stocks.min() > 500
s_tilde = stocks / np.concatenate([[prod[0]], prod[:-1]])

trend = np.log(2.2) + 0.025 * (years - 1990)
log_p = trend - 2.0 * (s_tilde - s_tilde.mean()) + rng.normal(0, 0.12, T)
price = np.round(np.exp(log_p), 2)
futures = np.round(price * np.exp(rng.normal(0, 0.08, T)), 2)
iv = np.round(np.clip(0.22 + 0.3 * (0.15 - s_tilde) + rng.normal(0, 0.03, T), 0.1, 0.45), 3)
deflator = np.round(0.62 * 1.021 ** (years - 1990), 4)

with open("market.csv", "w") as f:
    f.write("year,harvest_price,feb_futures,implied_vol,stocks,national_production,gdp_deflator\n")
    for i, y in enumerate(years):
        f.write(f"{y},{price[i]:.2f},{futures[i]:.2f},{iv[i]:.3f},{stocks[i]:.0f},{prod[i]:.0f},{deflator[i]:.4f}\n")

with open("yields.csv", "w") as f:
    f.write("year,state,county,yield\n")
    for state, base, slope, beta in [("IA", 118.0, 1.9, -18.0), ("NE", 112.0, 1.7, -10.0)]:
        effects = rng.normal(0, 6, 8)
        for c in range(8):
            for i, y in enumerate(years):
                p_dev = log_p[i] - trend[i]
                v = base + slope * (y - 1990) + effects[c] + beta * p_dev / 0.12 * 0.5 + rng.normal(0, 9)
                f.write(f"{y},{state},{state}{c + 1:02d},{max(v, 0):.1f}\n")
