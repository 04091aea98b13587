"""Euler-Maruyama simulation of the Marketron dynamics and path statistics.

Random numbers come from counter-based Philox streams keyed by ``(seed, block)``
with fixed-size path blocks, so the trajectory of path ``i`` does not depend on
how many paths are simulated in total.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import ModelParams, State, drifts, market_price_of_risk_x
from .workers import worker_count

__all__ = [
    "SimConfig",
    "PathEnsemble",
    "InsufficientStatistics",
    "simulate",
    "annualized_moments",
    "hurst_exponent",
    "path_hurst",
    "default_probability",
    "mpr_series",
    "export_summary_csv",
    "BLOCK_SIZE",
]

logger = logging.getLogger(__name__)

BLOCK_SIZE = 1024


class InsufficientStatistics(ValueError):
    """Too few surviving paths or too short a series for a statistic."""


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``default_threshold`` defaults to ``x0 - 2``. ``record_times`` limits the
    stored states to the given times (rounded to the step grid); ``None`` stores
    every step. ``x0`` is the initial log-price.
    """

    n_paths: int
    horizon: float
    dt: float = 1.0 / 252.0
    seed: int = 0
    default_threshold: Optional[float] = None
    absorb: bool = True
    x0: float = 0.0
    record_times: Optional[Sequence[float]] = None
    threads: Optional[int] = None

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if not (0.0 < self.dt <= self.horizon):
            raise ValueError("need 0 < dt <= horizon")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def threshold(self) -> float:
        return self.x0 - 2.0 if self.default_threshold is None else float(self.default_threshold)


@dataclass
class PathEnsemble:
    """Stored states, shape (n_times, n_paths) each, plus default bookkeeping."""

    times: np.ndarray
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    defaulted: np.ndarray
    default_time: np.ndarray
    diverged: np.ndarray
    dt: float
    threshold: float

    @property
    def n_paths(self) -> int:
        return self.x.shape[1]

    @property
    def survivors(self) -> np.ndarray:
        return ~(self.defaulted | self.diverged)

    def index_of(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 0.5 * self.dt + 1e-12:
            raise ValueError(f"time {t} was not recorded")
        return i


def _record_steps(config: SimConfig) -> np.ndarray:
    n = config.n_steps
    if config.record_times is None:
        return np.arange(n + 1)
    steps = {0}
    for t in config.record_times:
        if t < 0 or t > config.horizon + 1e-12:
            raise ValueError("record times must lie in [0, horizon]")
        steps.add(int(round(t / config.dt)))
    return np.array(sorted(steps))


def _simulate_block(params: ModelParams, config: SimConfig, block: int, n_keep: int, rec_steps):
    """March one block of ``BLOCK_SIZE`` paths; returns the first ``n_keep`` of them."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(config.seed), spawn_key=(block,))))
    m = BLOCK_SIZE
    dt = config.dt
    sq = math.sqrt(dt)
    p = params
    x = np.full(m, config.x0)
    y = np.full(m, p.y0)
    th = np.full(m, p.theta0)
    moving = np.ones(m, bool)
    defaulted = np.zeros(m, bool)
    diverged = np.zeros(m, bool)
    dtime = np.full(m, np.nan)
    out = np.empty((3, rec_steps.size, m))
    rec_pos = 0
    if rec_steps[0] == 0:
        out[:, 0] = x, y, th
        rec_pos = 1
    thr = config.threshold
    vols = np.array([p.sigma, p.sigma_y, p.sigma_theta])[:, None]
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, config.n_steps + 1):
            t = (step - 1) * dt
            z = rng.standard_normal((3, m))
            mx, my, mt = drifts(State(x, y, th), t, p)
            nx = x + mx * dt + vols[0] * sq * z[0]
            ny = y + my * dt + vols[1] * sq * z[1]
            nt = th + mt * dt + vols[2] * sq * z[2]
            bad = moving & ~(np.isfinite(nx) & np.isfinite(ny) & np.isfinite(nt))
            diverged |= bad
            moving &= ~bad
            hit = moving & ~defaulted & (nx < thr)
            defaulted |= hit
            dtime[hit] = step * dt
            x = np.where(moving, nx, x)
            y = np.where(moving, ny, y)
            th = np.where(moving, nt, th)
            if config.absorb:
                x = np.where(hit, thr, x)
                moving &= ~hit
            if rec_pos < rec_steps.size and rec_steps[rec_pos] == step:
                out[:, rec_pos] = x, y, th
                rec_pos += 1
    return out[:, :, :n_keep], defaulted[:n_keep], dtime[:n_keep], diverged[:n_keep]


def simulate(params: ModelParams, config: SimConfig) -> PathEnsemble:
    """Simulate ``config.n_paths`` independent paths with explicit Euler-Maruyama.

    Paths whose log-price first falls below the default threshold are flagged
    with their default time and, when ``absorb`` is set, frozen at the
    threshold. Non-finite states mark a path as diverged and freeze it.
    """
    rec_steps = _record_steps(config)
    n_blocks = -(-config.n_paths // BLOCK_SIZE)
    keeps = [min(BLOCK_SIZE, config.n_paths - b * BLOCK_SIZE) for b in range(n_blocks)]
    workers = min(worker_count(config.threads), n_blocks)

    def run(b):
        return _simulate_block(params, config, b, keeps[b], rec_steps)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(n_blocks)))
    else:
        parts = [run(b) for b in range(n_blocks)]
    states = np.concatenate([q[0] for q in parts], axis=2)
    defaulted = np.concatenate([q[1] for q in parts])
    dtime = np.concatenate([q[2] for q in parts])
    diverged = np.concatenate([q[3] for q in parts])
    if np.any(diverged):
        logger.warning("%d paths diverged (non-finite state)", int(diverged.sum()))
    return PathEnsemble(rec_steps * config.dt, states[0], states[1], states[2], defaulted, dtime,
                        diverged, config.dt, config.threshold)


def _standardized(r):
    m = r.mean()
    d = r - m
    var = np.mean(d * d)
    if var == 0.0:
        return 0.0, 0.0
    skew = np.mean(d**3) / var**1.5
    kurt = np.mean(d**4) / var**2 - 3.0
    return float(skew), float(kurt)


def annualized_moments(ensemble: PathEnsemble, horizons: Sequence[float], min_paths: int = 100) -> np.ndarray:
    """Annualized statistics of the log-return ``x(h) - x(0)`` across surviving paths.

    Returns an array with rows ``(horizon, mean/h, std/sqrt(h), skewness,
    excess kurtosis)``. Each path contributes one return per horizon.
    """
    ok = ensemble.survivors
    if int(ok.sum()) < min_paths:
        raise InsufficientStatistics(f"only {int(ok.sum())} surviving paths (< {min_paths})")
    rows = []
    x0 = ensemble.x[0, ok]
    for h in horizons:
        if h <= 0:
            raise ValueError("horizons must be positive")
        i = ensemble.index_of(h)
        r = ensemble.x[i, ok] - x0
        t = ensemble.times[i]
        skew, kurt = _standardized(r)
        rows.append((h, r.mean() / t, r.std() / math.sqrt(t), skew, kurt))
    return np.array(rows)


def _expected_rs(n: int) -> float:
    """Anis-Lloyd-Peters expected R/S of ``n`` independent Gaussian increments."""
    i = np.arange(1, n)
    tail = np.sum(np.sqrt((n - i) / i))
    if n <= 340:
        front = math.exp(math.lgamma(0.5 * (n - 1)) - math.lgamma(0.5 * n)) / math.sqrt(math.pi)
    else:
        front = 1.0 / math.sqrt(0.5 * n * math.pi)
    return (n - 0.5) / n * front * tail


def hurst_exponent(series, min_window: int = 8, max_window: Optional[int] = None,
                   corrected: bool = True) -> float:
    """Rescaled-range estimate of the Hurst exponent of an increment series.

    ``series`` holds increments (for example daily log-returns). Windows are
    dyadic sizes from ``min_window`` to ``len/4``; for each size the mean R/S
    over non-overlapping windows is regressed in log-log against the size.
    With ``corrected`` the Anis-Lloyd-Peters expectation for independent
    increments is divided out and 0.5 added back, which removes the upward
    small-window bias of the raw estimator.
    """
    z = np.asarray(series, dtype=float).ravel()
    n = z.size
    if n < 128:
        raise InsufficientStatistics("series must have at least 128 points")
    if not np.all(np.isfinite(z)):
        raise ValueError("series must be finite")
    max_window = n // 4 if max_window is None else min(max_window, n)
    sizes = []
    w = min_window
    while w <= max_window:
        sizes.append(w)
        w *= 2
    if len(sizes) < 2:
        raise InsufficientStatistics("window range too narrow")
    log_n, log_rs = [], []
    for w in sizes:
        k = n // w
        blocks = z[: k * w].reshape(k, w)
        dev = blocks - blocks.mean(axis=1, keepdims=True)
        prof = np.cumsum(dev, axis=1)
        rng = prof.max(axis=1) - prof.min(axis=1)
        sd = blocks.std(axis=1)
        good = sd > 0
        if not np.any(good):
            continue
        rs = math.log(np.mean(rng[good] / sd[good]))
        if corrected:
            rs -= math.log(_expected_rs(w)) - 0.5 * math.log(w)
        log_n.append(math.log(w))
        log_rs.append(rs)
    if len(log_n) < 2:
        raise InsufficientStatistics("series is constant")
    return float(np.polyfit(log_n, log_rs, 1)[0])


def path_hurst(ensemble: PathEnsemble, max_paths: int = 200, **kwargs) -> float:
    """Average R/S Hurst exponent of the log-return series of surviving paths."""
    if ensemble.times.size < 129 or not np.allclose(np.diff(ensemble.times), ensemble.dt):
        raise InsufficientStatistics("need every step recorded and at least 128 returns")
    idx = np.flatnonzero(ensemble.survivors)[:max_paths]
    if idx.size == 0:
        raise InsufficientStatistics("no surviving paths")
    returns = np.diff(ensemble.x[:, idx], axis=0)
    return float(np.mean([hurst_exponent(returns[:, j], **kwargs) for j in range(idx.size)]))


def default_probability(ensemble: PathEnsemble) -> float:
    """Fraction of paths flagged as defaulted by the end of the simulation."""
    return float(np.mean(ensemble.defaulted))


def mpr_series(ensemble: PathEnsemble, params: ModelParams, n_samples: int = 5):
    """Market price of risk along the stored states.

    Returns ``(mean_series, sample_paths)``: the mean over surviving paths at
    each stored time, and the full series of the first ``n_samples`` survivors.
    The signal is evaluated at each stored calendar time.
    """
    ok = ensemble.survivors
    lam = market_price_of_risk_x(State(ensemble.x, ensemble.y, ensemble.theta),
                                 ensemble.times[:, None], params)
    lam = np.broadcast_to(lam, ensemble.x.shape)
    mean = lam[:, ok].mean(axis=1) if ok.any() else np.full(ensemble.times.size, np.nan)
    samples = lam[:, np.flatnonzero(ok)[:n_samples]]
    return mean, samples


def export_summary_csv(path, ensemble: PathEnsemble, params: ModelParams) -> None:
    """Write ``time, mean_x, mean_y, mean_theta, default_frac, mpr_mean`` per stored time."""
    ok = ensemble.survivors
    mpr_mean, _ = mpr_series(ensemble, params, 0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "mean_x", "mean_y", "mean_theta", "default_frac", "mpr_mean"])
        for i, t in enumerate(ensemble.times):
            frac = float(np.mean(ensemble.defaulted & (ensemble.default_time <= t + 1e-12)))
            w.writerow([f"{t:.6g}", f"{ensemble.x[i, ok].mean():.6g}", f"{ensemble.y[i, ok].mean():.6g}",
                        f"{ensemble.theta[i, ok].mean():.6g}", f"{frac:.6g}", f"{mpr_mean[i]:.6g}"])
