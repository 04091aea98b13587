"""Price the 7x7 spot/strike call sweep with both pricers and compare with Black-Scholes.

Usage: ``python3 demos/price_sweep.py [--n-tau 30]``
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from marketron import presets
from marketron.kernels import KernelContext
from marketron.model import ErfSigmoid, State
from marketron.oracles import black_scholes
from marketron.rbf import build_grid
from marketron.splitting import OptionSpec
from marketron.splitting import price_indifference as split_price
from marketron.volterra import price_indifference as volterra_price


def sweep(params, pricer, n_tau):
    spots, strikes = presets.CALL_SPOTS, presets.CALL_STRIKES
    grid = build_grid(list(spots), params, 20, 5, 5, n_tau, presets.CALL_MATURITY)
    ctx = KernelContext(grid.dtau, grid.eps_rbf, params)
    specs = [OptionSpec(k, "call", s) for s in spots for k in strikes]
    t0 = time.perf_counter()
    res = pricer(grid, ctx, specs, State(0.0, params.y0, params.theta0))
    elapsed = time.perf_counter() - t0
    return np.array([r.price for r in res]).reshape(len(spots), len(strikes)), elapsed


def show(title, matrix):
    print(title)
    print("spot\\strike " + " ".join(f"{k:>8.0f}" for k in presets.CALL_STRIKES))
    for s, row in zip(presets.CALL_SPOTS, matrix):
        print(f"{s:>11.0f} " + " ".join(f"{v:>8.3f}" for v in row))
    print()


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n-tau", type=int, default=30)
    args = parser.parse_args()

    p = presets.calib_params()
    prices, elapsed = sweep(p, split_price, args.n_tau)
    bs = np.array([[black_scholes(s, k, presets.CALL_MATURITY, p.r, p.q, p.sigma) for k in presets.CALL_STRIKES]
                   for s in presets.CALL_SPOTS])
    show(f"Splitting pricer, equity-calibrated parameters ({elapsed:.2f} s)", prices)
    show("Price minus Black-Scholes (dividend yield 0.005)", prices - bs)
    show("Published table", presets.CALL_RES_TABLE)

    # The Volterra pricer needs the error-function signals; swap them in for a cross-check.
    pe = p.replace(signal=ErfSigmoid(b1=1.6819, b2=-1.2102, a1=0.3, a2=-0.4), eta_bar=p.r - 0.5 * p.sigma**2)
    a, ta = sweep(pe, split_price, args.n_tau)
    b, tb = sweep(pe, volterra_price, args.n_tau)
    print(f"Error-function signals: splitting {ta:.2f} s, Volterra {tb:.2f} s, "
          f"max relative difference {np.max(np.abs(a - b) / a):.2e}")


if __name__ == "__main__":
    main()
