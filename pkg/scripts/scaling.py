"""Planner wall-clock versus number of scenarios on the 30-bus case.

Scenarios are Gaussian perturbations of the 5 % stressed load so that every
scenario is congested and the joint QP grows with K.  Prints one line per K
and the fitted log-log slope.
"""

from __future__ import annotations

import argparse

from factsplan import PlanConfig, bundled_case
from factsplan.experiments import K_VALUES, scaling


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--k", type=int, nargs="+", default=list(K_VALUES))
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    net = bundled_case("case30")

    def show(k, r):
        print(f"K={k:3d}  {r.seconds:8.2f} s  {r.summary(net)}", flush=True)

    res = scaling(args.k, PlanConfig(threads=args.threads), args.seed, progress=show)
    if len(args.k) > 1:
        print(f"log-log slope: {res.slope:.3f}")


if __name__ == "__main__":
    main()
