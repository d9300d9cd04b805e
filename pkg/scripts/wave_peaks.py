"""First-gap oscillation peaks under the periodic leader, per platoon
and per displayed horizon.

The horizon-5 runs take a minute or two each; expect several minutes
total for the full table.
"""

import argparse
import time

import numpy as np

from platoon_mpc.loop import simulate, wave_scenario
from platoon_mpc.presets import PLATOON_NAMES, platoon_preset, weight_preset

TARGETS = {"small": 0.25, "medium": 0.30, "large": 0.50}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--horizons", type=int, nargs="+", default=[1, 5])
    args = ap.parse_args()

    for name in PLATOON_NAMES:
        cfg = platoon_preset(name)
        peaks = []
        for p in args.horizons:
            t0 = time.perf_counter()
            rec = simulate(cfg, weight_preset(name, p), wave_scenario())
            peak = float(np.max(np.abs(rec.z[:, 0])))
            peaks.append(peak)
            print(f"{name:<8} p={p}  peak {peak:.4f}  "
                  f"({time.perf_counter() - t0:.0f}s)", flush=True)
        worst = max(peaks)
        target = TARGETS[name]
        print(f"{name:<8} max over horizons {worst:.4f}  "
              f"target {target} +-20% "
              f"[{0.8 * target:.2f}, {1.2 * target:.2f}]")


if __name__ == "__main__":
    main()
