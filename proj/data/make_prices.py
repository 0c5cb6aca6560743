"""Synthetic cointegrated pair used as the bundled backtest fixture.

Asset 2 follows a geometric random walk; asset 1 tracks alpha_t + beta_t * asset 2
plus a mean-reverting residual, with slowly drifting alpha and beta.
"""
import argparse

import numpy as np
import pandas as pd


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--days", type=int, default=873)
    ap.add_argument("--start", default="2019-08-09")
    ap.add_argument("--seed", type=int, default=20190809)
    ap.add_argument("--out", default="prices.csv")
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    n = args.days
    dates = pd.bdate_range(args.start, periods=n)

    y2 = 90.0 * np.exp(np.cumsum(rng.normal(0.0003, 0.02, n)))
    alpha = 5.0 + np.cumsum(rng.normal(0.0, 0.05, n))
    beta = 0.8 + np.cumsum(rng.normal(0.0, 0.002, n))
    resid = np.zeros(n)
    for t in range(1, n):
        resid[t] = 0.9 * resid[t - 1] + rng.normal(0.0, 1.2)
    y1 = np.maximum(alpha + beta * y2 + resid, 1.0)

    df = pd.DataFrame({"date": dates.strftime("%Y-%m-%d"),
                       "close_1": np.round(y1, 2), "close_2": np.round(y2, 2)})
    df.to_csv(args.out, index=False)


if __name__ == "__main__":
    main()
