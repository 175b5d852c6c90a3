"""Discrete-time equilibrium oracle against the continuous-time sophisticated rules."""

import argparse
import time

from hypermerton import analysis as an
from hypermerton import closed_policies as cp
from hypermerton import discount as d
from hypermerton import market as mk
from hypermerton import mpe_oracle as mo

MIX = d.ExpMixture((0.5, 0.5), (0.05, 0.15))
MKT = mk.MarketModel.single(0.03, 0.08, 0.2)


def study(label, utility, T, market, discount, steps):
    t0 = time.perf_counter()
    ref = an.build_policy(utility, cp.SOPHISTICATED, discount, market, T).consumption(1.0, 0.0)
    rows, _ = mo.convergence_study(mo.Problem(discount, market, utility, T), steps, reference=ref)
    print(f"\n{label}: continuous-time c(1, 0) = {ref:.10f}")
    print("     N        c_oracle     rel.error   ratio    Richardson")
    for r in rows:
        print(f"{r['N']:6d}  {r['c0']:.10f}  {r['error']:.3e}  {r.get('ratio', float('nan')):6.3f}  "
              f"{r.get('richardson', float('nan')):.10f}")
    print(f"({time.perf_counter() - t0:.1f}s)")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, nargs="+", default=[32, 64, 128])
    ap.add_argument("--skip-power", action="store_true")
    ap.add_argument("--skip-exponential", action="store_true")
    args = ap.parse_args()
    study("log, mixture, a=1, T=1", mk.LogUtility(1.0), 1.0, MKT, MIX, args.steps)
    if not args.skip_power:
        study("power gamma=0.5, mixture, a=1, T=10", mk.PowerUtility(0.5, 1.0), 10.0, MKT, MIX, args.steps[-2:])
    if not args.skip_exponential:
        study("exponential gamma=1, a=2, BarroExp, T=1", mk.ExponentialUtility(1.0, 2.0), 1.0,
              mk.MarketModel.single(0.05, 0.10, 0.2), d.BarroExp(0.05, 0.05, 1.0), args.steps[:2])


if __name__ == "__main__":
    main()
