"""Command-line front end: ``marketron {price,calibrate,simulate,stats}``.

Every command reads one JSON configuration (``--config``), lets flags override
it, writes its outputs to ``--out`` and records a ``manifest_<command>.json``
with the configuration echo, seeds, package versions and wall time.

Exit status is 0 on success, 2 when some price cells or quotes failed and 1 on
a configuration or runtime error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import platform
import sys
import time
from importlib import metadata
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import presets
from .calibration import (
    PARAM_NAMES,
    CalibrationProblem,
    DEConfig,
    PricerConfig,
    calibrate,
    load_and_filter,
    vector_from_params,
)
from .kernels import KernelContext
from .model import ModelParams, State
from .montecarlo import (
    SimConfig,
    annualized_moments,
    default_probability,
    export_summary_csv,
    mpr_series,
    path_hurst,
    simulate,
)
from .oracles import black_scholes
from .rbf import build_grid
from .splitting import OptionSpec, price_indifference

__all__ = ["main", "load_config", "model_from_config", "price_matrix"]

logger = logging.getLogger("marketron")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2

_DEFAULT_GRID = {"n_x": 20, "n_y": 5, "n_theta": 5, "n_tau": 30}


class ConfigError(ValueError):
    """Invalid run configuration."""


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def model_from_config(cfg: dict) -> ModelParams:
    """``model`` (full parameter object) or ``preset`` (name), then ``model_overrides``."""
    if "model" in cfg:
        params = ModelParams.from_dict(cfg["model"])
    else:
        params = presets.by_name(cfg.get("preset", "calib"))
    overrides = dict(cfg.get("model_overrides", {}))
    if overrides:
        params = params.replace(**{k: (v if k == "regularizer" else float(v)) for k, v in overrides.items()})
    return params


def _fmt(v) -> str:
    return "nan" if not np.isfinite(v) else f"{v:.6g}"


def _write_matrix(path: Path, row_label: str, rows, cols, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([row_label] + [_fmt(c) for c in cols])
        for r, line in zip(rows, values):
            w.writerow([_fmt(r)] + [_fmt(v) for v in line])


def _grid_settings(cfg: dict) -> dict:
    g = dict(_DEFAULT_GRID)
    g.update(cfg.get("grid", {}))
    return {k: int(v) for k, v in g.items()}


def _price_batch(params, spots, strikes, T, kind, grid_cfg, pricer):
    grid = build_grid(spots, params, grid_cfg["n_x"], grid_cfg["n_y"], grid_cfg["n_theta"],
                      grid_cfg["n_tau"], T)
    ctx = KernelContext(grid.dtau, grid.eps_rbf, params)
    specs = [OptionSpec(float(K), kind, float(s)) for s in spots for K in strikes]
    state0 = State(0.0, params.y0, params.theta0)
    if pricer == "volterra":
        from .volterra import price_indifference as volterra_price

        res = volterra_price(grid, ctx, specs, state0)
    else:
        res = price_indifference(grid, ctx, specs, state0)
    return np.array([r.price for r in res]).reshape(len(spots), len(strikes))


def price_matrix(params: ModelParams, spots, strikes, T: float, kind: str = "call",
                 grid: Optional[dict] = None, pricer: str = "splitting"):
    """Indifference prices on the ``spots x strikes`` grid; returns ``(prices, n_failed)``.

    All cells share one march. If it fails, each spot row is retried alone and
    rows that still fail are reported as NaN.
    """
    grid_cfg = dict(_DEFAULT_GRID) if grid is None else grid
    try:
        return _price_batch(params, spots, strikes, T, kind, grid_cfg, pricer), 0
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        logger.error("batch pricing failed (%s); retrying per spot", exc)
    out = np.full((len(spots), len(strikes)), np.nan)
    for i, s in enumerate(spots):
        try:
            out[i] = _price_batch(params, [s], strikes, T, kind, grid_cfg, pricer)[0]
        except (ValueError, ArithmeticError, RuntimeError) as exc:
            logger.error("pricing failed for spot %g: %s", s, exc)
    return out, int(np.count_nonzero(~np.isfinite(out)))


# Commands --------------------------------------------------------------------------

def cmd_price(cfg: dict, args, out: Path) -> tuple[int, dict]:
    params = model_from_config(cfg)
    pc = cfg.get("price", {})
    spots = [float(s) for s in pc.get("spots", presets.CALL_SPOTS)]
    strikes = [float(k) for k in pc.get("strikes", presets.CALL_STRIKES)]
    T = float(pc.get("maturity", presets.CALL_MATURITY))
    kind = pc.get("kind", "call")
    if kind not in ("call", "put"):
        raise ConfigError("price.kind must be 'call' or 'put'")
    prices, failed = price_matrix(params, spots, strikes, T, kind, _grid_settings(cfg), args.pricer)
    bs = np.array([[black_scholes(s, K, T, params.r, params.q, params.sigma, kind) for K in strikes]
                   for s in spots])
    _write_matrix(out / "prices.csv", "spot\\strike", spots, strikes, prices)
    _write_matrix(out / "bs_difference.csv", "spot\\strike", spots, strikes, prices - bs)
    results = {"failed_cells": failed, "n_cells": prices.size, "outputs": ["prices.csv", "bs_difference.csv"]}
    return (EXIT_PARTIAL if failed else EXIT_OK), results


def _calibration_problem(cfg: dict, args) -> CalibrationProblem:
    cc = cfg.get("calib", {})
    params = model_from_config(cfg)
    quotes_path = cc.get("quotes")
    if quotes_path is None:
        raise ConfigError("calib.quotes (path to the quotes CSV) is required")
    quotes = load_and_filter(quotes_path, float(cc.get("spot_band", 1.05)))
    if not quotes:
        raise ConfigError("no quotes left after filtering")
    free = tuple(cc.get("free_params", PARAM_NAMES))
    if "bounds" in cc:
        bounds = {k: tuple(map(float, v)) for k, v in cc["bounds"].items()}
    else:
        rel = float(cc.get("relative_bounds", 0.1))
        base = dict(zip(PARAM_NAMES, vector_from_params(params)))
        bounds = {}
        for n in free:
            v = base[n]
            half = abs(v) * rel if v != 0.0 else rel
            bounds[n] = (v - half, v + half)
    de_kwargs = dict(cc.get("de", {}))
    if args.seed is not None:
        de_kwargs["seed"] = args.seed
    grid_cfg = dict(cc.get("grid", _grid_settings(cfg)))
    pricer = PricerConfig(pricer=args.pricer, **{k: int(v) for k, v in grid_cfg.items()})
    return CalibrationProblem(
        quotes=quotes, free_params=free, bounds=bounds, base_params=params,
        r_bar=float(cc.get("r_bar", 0.02)), x_hat_offset=float(cc.get("x_hat_offset", -2.0)),
        x0=float(cc.get("x0", 0.0)), de=DEConfig(**de_kwargs), pricer=pricer,
        link_eta_bar=bool(cc.get("link_eta_bar", True)),
    )


def cmd_calibrate(cfg: dict, args, out: Path) -> tuple[int, dict]:
    problem = _calibration_problem(cfg, args)
    report = calibrate(problem)
    with open(out / "calibration_report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    failed = sum(1 for r in report["residuals"] if not math.isfinite(r["model"]))
    results = {"fitness": report["fitness"], "generations": report["generations"],
               "failed_quotes": failed, "seed": report["seed"], "outputs": ["calibration_report.json"]}
    return (EXIT_PARTIAL if failed else EXIT_OK), results


def _sim_config(cfg: dict, args, record_times=None, **overrides) -> SimConfig:
    sc = dict(cfg.get("sim", {}))
    sc.setdefault("n_paths", 10000)
    sc.setdefault("horizon", 1.0)
    if args.seed is not None:
        sc["seed"] = args.seed
    if record_times is not None:
        sc["record_times"] = record_times
    sc.update(overrides)
    try:
        return SimConfig(**sc)
    except TypeError as exc:
        raise ConfigError(f"invalid sim section: {exc}") from None


def _monthly(horizon: float):
    n = int(math.floor(horizon * 12 + 1e-9))
    return [i / 12.0 for i in range(n + 1)] + [horizon]


def cmd_simulate(cfg: dict, args, out: Path) -> tuple[int, dict]:
    params = model_from_config(cfg)
    sc = _sim_config(cfg, args)
    if sc.record_times is None:
        sc = dataclasses.replace(sc, record_times=_monthly(sc.horizon))
    ens = simulate(params, sc)
    export_summary_csv(out / "ensemble_summary.csv", ens, params)
    results = {"seed": sc.seed, "n_paths": sc.n_paths, "default_probability": default_probability(ens),
               "diverged": int(ens.diverged.sum()), "outputs": ["ensemble_summary.csv"]}
    return EXIT_OK, results


def cmd_stats(cfg: dict, args, out: Path) -> tuple[int, dict]:
    params = model_from_config(cfg)
    st = cfg.get("stats", {})
    horizons = [float(h) for h in st.get("horizons", presets.STATS_HORIZONS)]
    base = _sim_config(cfg, args)
    horizon = max(base.horizon, max(horizons))
    times = sorted(set(horizons) | set(_monthly(horizon)))
    sc = dataclasses.replace(base, horizon=horizon, record_times=times)
    ens = simulate(params, sc)
    table = annualized_moments(ens, horizons)
    with open(out / "stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["horizon", "mean", "volatility", "skewness", "excess_kurtosis"])
        for row in table:
            w.writerow([_fmt(v) for v in row])
    n_samples = int(st.get("mpr_samples", 5))
    mean, samples = mpr_series(ens, params, n_samples)
    with open(out / "mpr.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "mpr_mean"] + [f"path_{j + 1}" for j in range(samples.shape[1])])
        for i, t in enumerate(ens.times):
            w.writerow([_fmt(t), _fmt(mean[i])] + [_fmt(v) for v in samples[i]])
    # Hurst exponent from a smaller ensemble that keeps every step.
    n_h = int(st.get("hurst_paths", 200))
    hc = dataclasses.replace(base, n_paths=n_h, horizon=float(st.get("hurst_horizon", 3.0)),
                             record_times=None)
    hurst = path_hurst(simulate(params, hc), max_paths=n_h)
    results = {"seed": sc.seed, "n_paths": sc.n_paths, "hurst": hurst,
               "default_probability": default_probability(ens), "outputs": ["stats.csv", "mpr.csv"]}
    return EXIT_OK, results


_COMMANDS = {"price": cmd_price, "calibrate": cmd_calibrate, "simulate": cmd_simulate, "stats": cmd_stats}


def _versions() -> dict:
    out = {"python": platform.python_version(), "numpy": np.__version__}
    for dist in ("scipy", "artifact"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marketron", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("price", "S x K indifference price matrix and Black-Scholes differences"),
                            ("calibrate", "differential-evolution calibration to a quotes CSV"),
                            ("simulate", "Monte Carlo ensemble summary"),
                            ("stats", "annualized log-return statistics and market price of risk")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--pricer", choices=("volterra", "splitting"), default=None)
        p.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed")
        p.add_argument("--out", default=None, help="output directory (default: io.out or '.')")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    status = EXIT_ERROR
    results: dict = {}
    cfg: dict = {}
    out = Path(args.out or ".")
    try:
        cfg = load_config(args.config)
        out = Path(args.out or cfg.get("io", {}).get("out", "."))
        out.mkdir(parents=True, exist_ok=True)
        if args.pricer is None:
            args.pricer = cfg.get("pricer", "splitting")
        if args.pricer not in ("volterra", "splitting"):
            raise ConfigError("pricer must be 'volterra' or 'splitting'")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        status, results = _COMMANDS[args.command](cfg, args, out)
    except (ConfigError, ValueError, OSError, RuntimeError, ArithmeticError) as exc:
        logger.error("%s", exc)
        results = {"error": str(exc)}
        status = EXIT_ERROR
    manifest = {
        "command": args.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "config": cfg,
        "pricer": args.pricer,
        "seed": args.seed,
        "versions": _versions(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "wall_time_s": round(time.time() - started, 3),
        "exit_status": status,
        "results": results,
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"manifest_{args.command}.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, default=float)
    except OSError as exc:
        logger.error("cannot write manifest: %s", exc)
    return status


if __name__ == "__main__":
    sys.exit(main())
