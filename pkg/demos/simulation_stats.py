"""Monte Carlo statistics for the option-calibrated parameter sets.

Prints annualized log-return moments per horizon, the R/S Hurst exponent and
the one-year default frequency.

Usage: ``python3 demos/simulation_stats.py [--paths 20000] [--seed 0]``
"""
from __future__ import annotations

import argparse

from marketron import presets
from marketron.montecarlo import SimConfig, annualized_moments, default_probability, path_hurst, simulate


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--paths", type=int, default=20000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    horizons = presets.STATS_HORIZONS
    for name, make in (("0.425-year set", presets.res_t0_425), ("0.041-year set", presets.res_t0_041)):
        p = make()
        ens = simulate(p, SimConfig(args.paths, max(horizons), seed=args.seed, record_times=horizons))
        print(name)
        print(f"{'horizon':>8} {'mean':>8} {'vol':>8} {'skew':>8} {'ex.kurt':>8}")
        for row in annualized_moments(ens, horizons):
            print(" ".join(f"{v:>8.4f}" for v in row))
        one_year = simulate(p, SimConfig(args.paths, 1.0, seed=args.seed, record_times=[1.0]))
        hurst = path_hurst(simulate(p, SimConfig(200, 3.0, seed=args.seed)))
        print(f"Hurst exponent {hurst:.3f}; one-year default frequency {1e4 * default_probability(one_year):.0f} bp\n")


if __name__ == "__main__":
    main()
