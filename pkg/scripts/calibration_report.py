"""Print the calibrated 9-state lattice model of the continuous target for a few run times."""

import argparse

import numpy as np

from olfactory_pursuit.grid import GridSpec
from olfactory_pursuit.target import (
    NINE_STATE,
    ContinuousRTParams,
    calibrated_transition,
    invariant_distribution,
)

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--run-times", type=float, nargs="+", default=[0.5, 1.0, 2.0, 5.0])
ap.add_argument("--steps", type=int, default=10**7)
ap.add_argument("--cache-dir", default="cache")
args = ap.parse_args()

g = GridSpec(51)
for tp in args.run_times:
    P = calibrated_transition(ContinuousRTParams(1.0, tp, 0.1), g, args.steps, cache_dir=args.cache_dir)
    q = invariant_distribution(P)
    print(f"T_p = {tp:g}: P(+e1|+e1) = {P.matrix[0, 0]:.4f}, "
          f"P(rest|rest) = {P.matrix[-1, -1]:.4f}, q = {np.round(q, 4).tolist()}")
    print("  alphabet:", [tuple(int(c) for c in v) for v in NINE_STATE])
