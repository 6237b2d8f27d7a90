"""Reference comparisons on the 30-bus case with every load raised by 5 %.

    single     one plan with the default settings
    dispatch   investment with frozen versus free generator dispatch
    horizon    plan ignoring operating cost versus plan over a multi-year horizon
"""

from __future__ import annotations

import argparse
import logging
from dataclasses import replace

from factsplan.experiments import StressedCase, frozen_vs_free_dispatch, horizon_comparison, single_plan


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0],
                                 formatter_class=argparse.RawDescriptionHelpFormatter, epilog=__doc__)
    ap.add_argument("experiment", choices=["single", "dispatch", "horizon", "all"])
    ap.add_argument("--scale", type=float, default=1.05, help="load multiplier (default 1.05)")
    ap.add_argument("--c-svc", type=float, default=None, help="SVC cost in $/MVAr")
    ap.add_argument("--horizon", type=int, default=10, help="years for the horizon comparison")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    setup = StressedCase(load_scale=args.scale)
    if args.c_svc is not None:
        setup.config = replace(setup.config, c_svc=args.c_svc)
    todo = ["single", "dispatch", "horizon"] if args.experiment == "all" else [args.experiment]

    if "single" in todo:
        net, r = single_plan(setup)
        print("single scenario:", r.summary(net))
    if "dispatch" in todo:
        net, cmp = frozen_vs_free_dispatch(setup)
        print("free dispatch:  ", cmp.free.summary(net))
        print("frozen dispatch:", cmp.frozen.summary(net))
        print(f"investment ratio frozen/free: {cmp.ratio:.2f}")
    if "horizon" in todo:
        net, cmp = horizon_comparison(setup, args.horizon)
        print("n_years=0:      ", cmp.myopic.summary(net))
        print(f"n_years={cmp.horizon}:     ", cmp.long.summary(net))
        print(f"{cmp.horizon}-year totals: {cmp.myopic_total:.2f} $ vs {cmp.long_total:.2f} $ "
              f"(saving {100 * cmp.gap:.2f} %)")


if __name__ == "__main__":
    main()
