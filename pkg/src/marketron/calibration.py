"""Calibration of model parameters to option quotes by differential evolution.

Candidates are scored by the root-mean-square price error of the splitting
pricer plus a penalty for violating the drift constraints

    r_bar > |f(theta0) + eta_bar - c V_M'(x0) y0|
    r_bar > |f(theta_hat) + eta_bar - c V_M'(x_hat) y_hat|,
    y_hat = h(theta_hat)/mu + y_bar - (c/mu) V_M(x_hat),  x_hat = x0 + offset,

which keep the drift of the price near its steady state economically sensible.
"""
from __future__ import annotations

import csv
import dataclasses
import datetime
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .kernels import KernelContext
from .model import ModelParams, State, v_m, v_m_prime
from .rbf import build_grid
from .splitting import OptionSpec, SplitOptions, price_indifference
from .workers import worker_count

__all__ = [
    "PARAM_NAMES",
    "QuoteRecord",
    "QuoteFormatError",
    "PricerConfig",
    "DEConfig",
    "CalibrationProblem",
    "CalibrationAborted",
    "DEResult",
    "load_and_filter",
    "filter_quotes",
    "params_from_vector",
    "vector_from_params",
    "constraint_violation",
    "constraints_ok",
    "model_prices",
    "objective",
    "de_minimize",
    "calibrate",
]

logger = logging.getLogger(__name__)

PARAM_NAMES = ("sigma", "sigma_y", "sigma_theta", "k", "mu", "g", "theta_hat", "c", "b1", "b2",
               "y_bar", "gamma", "y0", "theta0", "eps_bar")
_SIGNAL_NAMES = ("b1", "b2")
_CSV_COLUMNS = ("date", "spot", "strike", "maturity", "kind", "price")
PENALTY_SCALE = 1e6
FAILED_FITNESS = 1e12


class QuoteFormatError(ValueError):
    """Malformed quotes file; the message carries the offending line number."""


class CalibrationAborted(RuntimeError):
    """Every candidate stayed infeasible for too many generations."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class QuoteRecord:
    date: str
    spot: float
    strike: float
    maturity: float
    kind: str
    price: float

    def __post_init__(self):
        datetime.date.fromisoformat(self.date)
        for name in ("spot", "strike", "price", "maturity"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite")
        if self.kind not in ("call", "put"):
            raise ValueError("kind must be 'call' or 'put'")


def filter_quotes(quotes: Sequence[QuoteRecord], spot_band: float = 1.05) -> list:
    """Keep puts with ``S/K < band`` and calls with ``K/S < band``."""
    keep = []
    for q in quotes:
        ratio = q.spot / q.strike if q.kind == "put" else q.strike / q.spot
        if ratio < spot_band:
            keep.append(q)
    return keep


def load_and_filter(path, spot_band: float = 1.05) -> list:
    """Read a quotes CSV (``date,spot,strike,maturity,kind,price``) and filter strikes."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            logger.warning("quotes file %s is empty", path)
            return []
        missing = [c for c in _CSV_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise QuoteFormatError(f"line 1: missing columns {missing}")
        quotes = []
        for row in reader:
            line = reader.line_num
            try:
                quotes.append(QuoteRecord(
                    date=row["date"].strip(), spot=float(row["spot"]), strike=float(row["strike"]),
                    maturity=float(row["maturity"]), kind=row["kind"].strip().lower(),
                    price=float(row["price"]),
                ))
            except (TypeError, ValueError) as exc:
                raise QuoteFormatError(f"line {line}: {exc}") from None
    if not quotes:
        logger.warning("quotes file %s has no rows", path)
    return filter_quotes(quotes, spot_band)


# Parameter vectors ---------------------------------------------------------------

def vector_from_params(params: ModelParams, names: Sequence[str] = PARAM_NAMES) -> np.ndarray:
    out = []
    for n in names:
        out.append(getattr(params.signal, n) if n in _SIGNAL_NAMES else getattr(params, n))
    return np.array(out, dtype=float)


def params_from_vector(base: ModelParams, names: Sequence[str], values, link_eta_bar: bool = True) -> ModelParams:
    """``base`` with ``names`` set to ``values``.

    With ``link_eta_bar`` the drift constant follows ``eta_bar = r - sigma^2/2``.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != (len(names),):
        raise ValueError("values must match names")
    changes = {}
    signal_changes = {}
    for n, v in zip(names, values):
        if n not in PARAM_NAMES:
            raise ValueError(f"unknown parameter {n!r}")
        (signal_changes if n in _SIGNAL_NAMES else changes)[n] = float(v)
    if signal_changes:
        changes["signal"] = dataclasses.replace(base.signal, **signal_changes)
    p = base.replace(**changes)
    if link_eta_bar:
        p = p.replace(eta_bar=p.r - 0.5 * p.sigma**2)
    return p


# Constraints ---------------------------------------------------------------------

def constraint_violation(params: ModelParams, x0: float = 0.0, r_bar: float = 0.02,
                         x_hat_offset: float = -2.0) -> float:
    """Total amount by which the two drift constraints are violated (0 if feasible).

    The inequalities are strict, so a drift equal to ``r_bar`` returns the
    smallest positive violation. ``mu = 0`` with ``c != 0`` leaves ``y_hat``
    undefined and counts as a unit violation.
    """
    p = params
    x_hat = x0 + x_hat_offset
    d1 = abs(float(p.signal.f(p.theta0, 0.0)) + p.eta_bar - p.c * float(v_m_prime(x0, p)) * p.y0)
    if p.mu == 0.0:
        if p.c != 0.0:
            return 1.0 + max(d1 - r_bar, 0.0)
        d2 = abs(float(p.signal.f(p.theta_hat, 0.0)) + p.eta_bar)
    else:
        y_hat = float(p.signal.h(p.theta_hat, 0.0)) / p.mu + p.y_bar - (p.c / p.mu) * float(v_m(x_hat, p))
        d2 = abs(float(p.signal.f(p.theta_hat, 0.0)) + p.eta_bar - p.c * float(v_m_prime(x_hat, p)) * y_hat)
    total = 0.0
    tiny = np.finfo(float).tiny
    for d in (d1, d2):
        if not math.isfinite(d):
            return math.inf
        if d >= r_bar:
            total += max(d - r_bar, tiny)
    return total


def constraints_ok(params: ModelParams, x0: float = 0.0, r_bar: float = 0.02,
                   x_hat_offset: float = -2.0) -> bool:
    return constraint_violation(params, x0, r_bar, x_hat_offset) == 0.0


# Objective ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PricerConfig:
    n_x: int = 20
    n_y: int = 5
    n_theta: int = 5
    n_tau: int = 30
    pricer: str = "splitting"

    def __post_init__(self):
        if self.pricer not in ("splitting", "volterra"):
            raise ValueError("pricer must be 'splitting' or 'volterra'")


def model_prices(params: ModelParams, quotes: Sequence[QuoteRecord],
                 pricer: PricerConfig = PricerConfig()) -> np.ndarray:
    """Indifference prices for ``quotes``; quotes sharing a maturity share one solve."""
    out = np.full(len(quotes), np.nan)
    groups: dict = {}
    for i, q in enumerate(quotes):
        groups.setdefault(q.maturity, []).append(i)
    state0 = State(0.0, params.y0, params.theta0)
    for T, idx in groups.items():
        spots = [quotes[i].spot for i in idx]
        grid = build_grid(spots, params, pricer.n_x, pricer.n_y, pricer.n_theta, pricer.n_tau, T)
        ctx = KernelContext(grid.dtau, grid.eps_rbf, params)
        specs = [OptionSpec(quotes[i].strike, quotes[i].kind, quotes[i].spot) for i in idx]
        if pricer.pricer == "volterra":
            from .volterra import price_indifference as volterra_price

            res = volterra_price(grid, ctx, specs, state0)
        else:
            res = price_indifference(grid, ctx, specs, state0, SplitOptions())
        out[idx] = [r.price for r in res]
    return out


def objective(params: ModelParams, quotes: Sequence[QuoteRecord], pricer: PricerConfig = PricerConfig(),
              x0: float = 0.0, r_bar: float = 0.02, x_hat_offset: float = -2.0) -> float:
    """Price RMSE over ``quotes`` plus ``1e6 * constraint violation``.

    A candidate whose pricing fails scores ``1e12``.
    """
    penalty = PENALTY_SCALE * constraint_violation(params, x0, r_bar, x_hat_offset)
    try:
        model = model_prices(params, quotes, pricer)
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        logger.info("pricing failed for candidate: %s", exc)
        return FAILED_FITNESS
    market = np.array([q.price for q in quotes])
    if not np.all(np.isfinite(model)):
        return FAILED_FITNESS
    return float(math.sqrt(np.mean((model - market) ** 2))) + penalty


# Differential evolution ------------------------------------------------------------------

@dataclass(frozen=True)
class DEConfig:
    pop_multiplier: int = 10
    max_generations: int = 100
    seed: int = 0
    tol: float = 1e-6
    stagnation_window: int = 20
    mutation: float = 0.7
    crossover: float = 0.9
    infeasible_limit: int = 5
    threads: Optional[int] = None

    def __post_init__(self):
        if self.pop_multiplier < 1 or self.max_generations < 1:
            raise ValueError("pop_multiplier and max_generations must be positive")
        if not (0.0 < self.mutation <= 2.0 and 0.0 <= self.crossover <= 1.0):
            raise ValueError("mutation must be in (0, 2] and crossover in [0, 1]")


@dataclass
class DEResult:
    x: np.ndarray
    fitness: float
    generations: int
    trace: list
    stop_reason: str
    population: np.ndarray = field(repr=False, default=None)


def de_minimize(fn: Callable[[np.ndarray], float], bounds, config: DEConfig = DEConfig(),
                feasible: Optional[Callable[[np.ndarray], bool]] = None) -> DEResult:
    """Minimize ``fn`` over a box with DE/rand/1/bin and elitist selection.

    Parameters
    ----------
    fn : callable
        Fitness of one vector; evaluations run concurrently on threads.
    bounds : array_like, shape (d, 2)
        Finite boxes with ``lower < upper``.
    feasible : callable, optional
        Used only for the all-infeasible abort rule.

    Stops after ``max_generations`` or when the best fitness changes by less
    than ``tol`` (relative) over ``stagnation_window`` generations.
    """
    b = np.asarray(bounds, dtype=float)
    if b.ndim != 2 or b.shape[1] != 2 or b.shape[0] < 1:
        raise ValueError("bounds must have shape (d, 2)")
    if not np.all(np.isfinite(b)) or np.any(b[:, 0] >= b[:, 1]):
        raise ValueError("bounds must be finite with lower < upper")
    lo, hi = b[:, 0], b[:, 1]
    d = b.shape[0]
    n_pop = max(config.pop_multiplier * d, 4)
    rng = np.random.default_rng(config.seed)
    pop = lo + rng.random((n_pop, d)) * (hi - lo)
    workers = worker_count(config.threads)

    def evaluate(X):
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                return np.array(list(ex.map(fn, X)), dtype=float)
        return np.array([fn(x) for x in X], dtype=float)

    def check_feasible(X, gen, streak):
        if feasible is None:
            return 0
        if any(feasible(x) for x in X):
            return 0
        streak += 1
        if streak >= config.infeasible_limit:
            raise CalibrationAborted(
                f"no feasible candidate for {streak} consecutive generations",
                {"generation": gen, "best_fitness": float(np.min(fit))})
        return streak

    fit = evaluate(pop)
    trace = [float(np.min(fit))]
    streak = check_feasible(pop, 0, 0)
    stop = "max_generations"
    gen = 0
    for gen in range(1, config.max_generations + 1):
        trials = np.empty_like(pop)
        for i in range(n_pop):
            others = rng.choice(n_pop - 1, size=3, replace=False)
            r1, r2, r3 = others + (others >= i)
            mutant = pop[r1] + config.mutation * (pop[r2] - pop[r3])
            # Reflect back into the box, then clip for safety.
            mutant = np.where(mutant < lo, 2 * lo - mutant, mutant)
            mutant = np.where(mutant > hi, 2 * hi - mutant, mutant)
            mutant = np.clip(mutant, lo, hi)
            cross = rng.random(d) < config.crossover
            cross[rng.integers(d)] = True
            trials[i] = np.where(cross, mutant, pop[i])
        tfit = evaluate(trials)
        better = tfit <= fit
        pop[better] = trials[better]
        fit[better] = tfit[better]
        trace.append(float(np.min(fit)))
        streak = check_feasible(pop, gen, streak)
        w = config.stagnation_window
        if len(trace) > w:
            old, new = trace[-1 - w], trace[-1]
            if abs(old - new) <= config.tol * max(abs(old), 1e-300):
                stop = "stagnation"
                break
    best = int(np.argmin(fit))
    return DEResult(pop[best].copy(), float(fit[best]), gen, trace, stop, pop)


# Calibration problem -----------------------------------------------------------------

@dataclass
class CalibrationProblem:
    """Quotes, free parameters with bounds, and solver settings.

    Parameters not listed in ``free_params`` keep their ``base_params`` value.
    ``link_eta_bar`` ties ``eta_bar`` to ``r - sigma^2/2`` for every candidate.
    """

    quotes: list
    free_params: tuple
    bounds: dict
    base_params: ModelParams
    r_bar: float = 0.02
    x_hat_offset: float = -2.0
    x0: float = 0.0
    de: DEConfig = DEConfig()
    pricer: PricerConfig = PricerConfig()
    link_eta_bar: bool = True

    def __post_init__(self):
        self.free_params = tuple(self.free_params)
        if not self.free_params:
            raise ValueError("need at least one free parameter")
        for n in self.free_params:
            if n not in PARAM_NAMES:
                raise ValueError(f"unknown parameter {n!r}")
            if n not in self.bounds:
                raise ValueError(f"missing bounds for {n!r}")
            lo, hi = self.bounds[n]
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"bounds for {n!r} must be finite with lower < upper")
        if len(self.quotes) < len(self.free_params):
            logger.warning("fewer quotes (%d) than free parameters (%d)", len(self.quotes),
                           len(self.free_params))

    @property
    def population(self) -> int:
        return self.de.pop_multiplier * len(self.free_params)

    def candidate(self, values) -> ModelParams:
        return params_from_vector(self.base_params, self.free_params, values, self.link_eta_bar)

    def bounds_array(self) -> np.ndarray:
        return np.array([self.bounds[n] for n in self.free_params], dtype=float)

    def fitness(self, values) -> float:
        try:
            p = self.candidate(values)
        except ValueError as exc:
            logger.info("invalid candidate: %s", exc)
            return FAILED_FITNESS
        return objective(p, self.quotes, self.pricer, self.x0, self.r_bar, self.x_hat_offset)

    def feasible(self, values) -> bool:
        try:
            p = self.candidate(values)
        except ValueError:
            return False
        return constraints_ok(p, self.x0, self.r_bar, self.x_hat_offset)

    def echo(self) -> dict:
        return {
            "free_params": list(self.free_params),
            "bounds": {n: list(map(float, self.bounds[n])) for n in self.free_params},
            "base_params": self.base_params.to_dict(),
            "r_bar": self.r_bar,
            "x_hat_offset": self.x_hat_offset,
            "x0": self.x0,
            "de": dataclasses.asdict(self.de),
            "pricer": dataclasses.asdict(self.pricer),
            "link_eta_bar": self.link_eta_bar,
            "n_quotes": len(self.quotes),
        }


def calibrate(problem: CalibrationProblem) -> dict:
    """Run DE on ``problem`` and return the JSON-ready report.

    The report has ``best_params`` (all 15 named parameters), ``fitness``,
    ``generations``, ``trace`` (best fitness per generation), ``residuals``
    (model minus market per quote), ``relative_rmse``, ``seed`` and
    ``config_echo``.
    """
    res = de_minimize(problem.fitness, problem.bounds_array(), problem.de, problem.feasible)
    best = problem.candidate(res.x)
    model = model_prices(best, problem.quotes, problem.pricer)
    residuals = []
    rel = []
    for q, m in zip(problem.quotes, model):
        residuals.append({"date": q.date, "spot": q.spot, "strike": q.strike, "maturity": q.maturity,
                          "kind": q.kind, "market": q.price, "model": float(m),
                          "residual": float(m - q.price)})
        rel.append((m - q.price) / q.price)
    logger.info("calibration stopped after %d generations (%s), fitness %.6g", res.generations,
                res.stop_reason, res.fitness)
    return {
        "best_params": dict(zip(PARAM_NAMES, map(float, vector_from_params(best)))),
        "fitness": res.fitness,
        "generations": res.generations,
        "stop_reason": res.stop_reason,
        "trace": res.trace,
        "residuals": residuals,
        "relative_rmse": float(math.sqrt(np.mean(np.square(rel)))) if rel else float("nan"),
        "feasible": constraints_ok(best, problem.x0, problem.r_bar, problem.x_hat_offset),
        "seed": problem.de.seed,
        "config_echo": problem.echo(),
    }
