"""Log-utility consumption rules for the four agents on the mixture discount."""

import argparse

import numpy as np

from hypermerton import analysis as an
from hypermerton import discount as d
from hypermerton import market as mk


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--T", type=float, default=10.0)
    ap.add_argument("--a", type=float, default=0.0)
    ap.add_argument("--csv", help="optional output path")
    args = ap.parse_args()

    problem = an.ComparisonProblem(d.ExpMixture((0.5, 0.5), (0.05, 0.15)), mk.MarketModel.single(0.03, 0.08, 0.2),
                                   mk.LogUtility(args.a), args.T, constant_rho=0.05)
    report = an.compare_agents(problem, an.CompareConfig(n_grid=11))
    print("t      " + "  ".join(f"{k:>14s}" for k in report.consumption))
    for i, t in enumerate(report.t):
        print(f"{t:5.2f}  " + "  ".join(f"{v[i]:14.10f}" for v in report.consumption.values()))
    print("portfolio share:", {k: np.round(v, 6).tolist() for k, v in report.weights.items()})
    for name, flag in report.flags.items():
        print(f"{name}: {flag}")
    if args.csv:
        report.write_csv(args.csv)


if __name__ == "__main__":
    main()
