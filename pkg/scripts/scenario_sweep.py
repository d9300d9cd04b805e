"""Fan a scenario across the three platoon presets and tabulate the
spacing deviations, steady-state errors and solve times.

Artifacts land in one directory per run; PLATOON_MPC_THREADS caps the
worker count.
"""

import argparse
from pathlib import Path

from platoon_mpc.cli import RunSpec, run_many
from platoon_mpc.presets import PLATOON_NAMES


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default="1",
                    choices=("1", "2", "3", "cruise"))
    ap.add_argument("--horizon", type=int, default=1)
    ap.add_argument("--steps", type=int, default=150)
    ap.add_argument("--out", default="runs")
    args = ap.parse_args()

    specs = [RunSpec(platoon=name, scenario=args.scenario,
                     horizon=args.horizon, steps=args.steps,
                     out=str(Path(args.out)
                             / f"{name}_s{args.scenario}_p{args.horizon}"))
             for name in PLATOON_NAMES]
    results = run_many(specs)

    head = (f"{'platoon':<8} {'max |z|':>9} {'first gap':>10} "
            f"{'|z_ss|':>8} {'med solve':>10}")
    print(head)
    for s in results:
        print(f"{s['platoon']:<8} {s['max_spacing_deviation']:>9.4f} "
              f"{s['max_first_gap_deviation']:>10.4f} "
              f"{s['max_steady_state_error']:>8.4f} "
              f"{s['solve_time_median'] * 1e3:>8.0f} ms")
    print(f"artifacts under {args.out}/")


if __name__ == "__main__":
    main()
