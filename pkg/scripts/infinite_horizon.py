"""Stationary propensities to consume for naive, sophisticated and pre-commitment agents."""

import argparse

from hypermerton import analysis as an
from hypermerton import discount as d
from hypermerton import market as mk
from hypermerton import soph_solver as ss


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--gammas", type=float, nargs="+", default=[-3.0, -1.0, 0.25, 0.5])
    ap.add_argument("--check-horizon", type=float, default=0.0,
                    help="also solve the finite-horizon sophisticated problem at this T")
    args = ap.parse_args()
    mix = d.ExpMixture((0.5, 0.5), (0.05, 0.15))
    mkt = mk.MarketModel.single(0.03, 0.08, 0.2)

    log = an.infinite_horizon_propensities(mix, None, mk.LogUtility())
    print(f"log: lambda_N = lambda_S = {log.lambda_N:.10f}, lambda_P(5) = {log.lambda_P(5.0):.10f}")
    print("\n gamma     delta_p    lambda_N    lambda_S   lambda_S(literal)  lambda_P(10)   rho_eff(N)  rho_eff(S)")
    for g in args.gammas:
        u = mk.PowerUtility(g, 1.0)
        ih = an.infinite_horizon_propensities(mix, mkt, u)
        print(f"{g:6.2f}  {ih.delta:10.6f}  {ih.lambda_N:10.6f}  {ih.lambda_S:10.6f}  {ih.lambda_S_literal:14.6f}"
              f"     {ih.lambda_P(10.0):10.6f}  {an.effective_rate_power(ih.lambda_N, mkt, g):10.6f}"
              f"  {an.effective_rate_power(ih.lambda_S, mkt, g):10.6f}")
        if args.check_horizon > 0:
            sol = ss.solve_power_sophisticated(mix, mkt, g, 1.0, args.check_horizon, ss.SolverConfig(time_nodes=2001))
            print(f"        finite horizon T={args.check_horizon:g}: c_S(0)/W = {sol.alpha(0.0) ** (-1 / (1 - g)):.6f}")


if __name__ == "__main__":
    main()
