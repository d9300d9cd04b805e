"""Closed-form and simulated stationary spacing errors per platoon.

The one-step closed form is exact; simulated values read the tail of a
cruise run.  Longer horizons have no closed form and always simulate,
which is slow, so they are opt-in.
"""

import argparse

import numpy as np

from platoon_mpc.loop import steady_state_error
from platoon_mpc.presets import PLATOON_NAMES, platoon_preset, weight_preset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--horizons", type=int, nargs="+", default=[1],
                    help="MPC horizons to tabulate (default: 1)")
    ap.add_argument("--speed", type=float, default=25.0)
    args = ap.parse_args()

    print(f"{'platoon':<8}", *(f"p={p:<8}" for p in args.horizons))
    for name in PLATOON_NAMES:
        cfg = platoon_preset(name)
        cells = []
        for p in args.horizons:
            zss, closed = steady_state_error(cfg, weight_preset(name, p),
                                             args.speed)
            tag = "" if closed else "*"
            cells.append(f"{np.max(np.abs(zss)):.4f}{tag:<4}")
        print(f"{name:<8}", *cells)
    if any(p > 1 for p in args.horizons):
        print("* simulated fixed point (200 cruise steps)")


if __name__ == "__main__":
    main()
