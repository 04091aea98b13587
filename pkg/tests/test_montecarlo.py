from __future__ import annotations

import csv
import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_params
from marketron import presets
from marketron.model import ErfSigmoid, State, market_price_of_risk_x
from marketron.montecarlo import (
    BLOCK_SIZE,
    InsufficientStatistics,
    SimConfig,
    annualized_moments,
    default_probability,
    export_summary_csv,
    hurst_exponent,
    mpr_series,
    path_hurst,
    simulate,
)

TINY = 1e-12
OFF = ErfSigmoid(1.0, 1.0, 0.0, 0.0)


def quiet(**kw):
    """No coupling, signals off, volatilities at the smallest positive scale."""
    base = dict(c=0.0, signal=OFF, sigma=TINY, sigma_y=TINY, sigma_theta=TINY)
    base.update(kw)
    return make_params(**base)


def fgn_davies_harte(n, hurst, rng):
    """Exact fractional Gaussian noise by circulant embedding."""
    k = np.arange(n + 1)
    acf = 0.5 * (np.abs(k + 1) ** (2 * hurst) - 2 * k ** (2 * hurst) + np.abs(k - 1) ** (2 * hurst))
    row = np.concatenate([acf, acf[-2:0:-1]])
    lam = np.fft.fft(row).real
    assert np.all(lam > -1e-10)
    m = row.size
    w = (rng.normal(size=m) + 1j * rng.normal(size=m)) * np.sqrt(np.maximum(lam, 0) / (2 * m))
    return np.fft.fft(w).real[:n] * math.sqrt(2)


# simulate ---------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(0, 1.0)
    with pytest.raises(ValueError):
        SimConfig(10, 0.1, dt=0.2)
    with pytest.raises(ValueError):
        SimConfig(10, 1.0, seed=-1)
    assert SimConfig(10, 1.0, x0=0.3).threshold == pytest.approx(-1.7)


def test_deterministic_limit_is_linear_drift():
    p = quiet(eta_bar=0.07)
    ens = simulate(p, SimConfig(5, 1.0, dt=0.01, x0=0.2))
    np.testing.assert_allclose(ens.x, np.broadcast_to(0.2 + 0.07 * ens.times[:, None], ens.x.shape), atol=1e-9)
    assert not ens.defaulted.any()


def test_theta_at_its_mean_stays_put():
    p = make_params(sigma_theta=TINY, theta0=0.5, theta_hat=0.5)
    ens = simulate(p, SimConfig(50, 0.5, dt=0.01))
    np.testing.assert_allclose(ens.theta, 0.5, atol=1e-9)


def test_theta_marginal_matches_ou_variance():
    p = make_params(c=0.0, signal=OFF)
    T = 0.5
    ens = simulate(p, SimConfig(4000, T, dt=0.01, seed=7, record_times=[T]))
    th = ens.theta[-1]
    var_exact = p.sigma_theta**2 * (1 - math.exp(-2 * p.k * T)) / (2 * p.k)
    se = var_exact * math.sqrt(2.0 / (th.size - 1))
    assert abs(th.var(ddof=1) - var_exact) < 3 * se
    mean = p.theta_hat + (p.theta0 - p.theta_hat) * math.exp(-p.k * T)
    assert abs(th.mean() - mean) < 3 * math.sqrt(var_exact / th.size)


def test_seed_determinism():
    p = make_params()
    cfg = SimConfig(300, 0.1, seed=11)
    a, b = simulate(p, cfg), simulate(p, cfg)
    for f in ("x", "y", "theta", "defaulted", "default_time"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_paths_do_not_depend_on_path_count():
    p = make_params()
    small = simulate(p, SimConfig(10, 0.1, seed=3))
    large = simulate(p, SimConfig(BLOCK_SIZE + 20, 0.1, seed=3))
    np.testing.assert_array_equal(small.x, large.x[:, :10])
    np.testing.assert_array_equal(small.theta, large.theta[:, :10])


def test_thread_count_does_not_change_paths():
    p = make_params()
    a = simulate(p, SimConfig(2 * BLOCK_SIZE + 5, 0.02, seed=5, threads=1))
    b = simulate(p, SimConfig(2 * BLOCK_SIZE + 5, 0.02, seed=5, threads=3))
    np.testing.assert_array_equal(a.x, b.x)


def test_recorded_times_subset_full_run():
    p = make_params()
    full = simulate(p, SimConfig(20, 0.2, dt=0.01, seed=2))
    part = simulate(p, SimConfig(20, 0.2, dt=0.01, seed=2, record_times=[0.05, 0.2]))
    np.testing.assert_allclose(part.times, [0.0, 0.05, 0.2])
    np.testing.assert_array_equal(part.x, full.x[[0, 5, 20]])
    with pytest.raises(ValueError):
        simulate(p, SimConfig(5, 0.2, dt=0.01, record_times=[0.3]))
    with pytest.raises(ValueError):
        part.index_of(0.1)


def test_defaulted_paths_are_frozen_at_threshold():
    p = quiet(eta_bar=-5.0)
    ens = simulate(p, SimConfig(4, 1.0, dt=0.01, default_threshold=-1.02))
    assert ens.defaulted.all()
    np.testing.assert_allclose(ens.default_time, 0.21, atol=1e-9)  # x = -1.05 after 21 steps
    after = ens.times > 0.21 - 1e-9
    np.testing.assert_array_equal(ens.x[after], -1.02)
    assert default_probability(ens) == 1.0


def test_without_absorption_paths_continue():
    p = quiet(eta_bar=-5.0)
    ens = simulate(p, SimConfig(2, 1.0, dt=0.01, default_threshold=-1.0, absorb=False))
    assert ens.defaulted.all()
    np.testing.assert_allclose(ens.x[-1], -5.0, atol=1e-9)


def test_infinite_threshold_means_no_default():
    ens = simulate(presets.res_t0_041(), SimConfig(200, 0.041, seed=1, default_threshold=-math.inf))
    assert default_probability(ens) == 0.0


def test_overflow_marks_paths_diverged():
    p = make_params(eta_bar=1e308)
    ens = simulate(p, SimConfig(3, 2.0, dt=1.0, default_threshold=-math.inf))
    assert ens.diverged.all()
    assert not ens.survivors.any()
    assert np.all(np.isfinite(ens.x))


# statistics -------------------------------------------------------------------


def test_gbm_limit_log_returns_are_gaussian():
    p = presets.bs_limit_params()
    ens = simulate(p, SimConfig(8000, 0.25, dt=0.05, seed=9, record_times=[0.25]))
    row = annualized_moments(ens, [0.25])[0]
    n = ens.n_paths
    assert abs(row[1] - p.eta_bar) < 3 * p.sigma / math.sqrt(0.25 * n)
    assert abs(row[2] - p.sigma) < 3 * p.sigma / math.sqrt(2 * n)
    assert abs(row[3]) < 3 * math.sqrt(6 / n)
    assert abs(row[4]) < 3 * math.sqrt(24 / n)


def test_deterministic_paths_have_zero_volatility():
    ens = simulate(quiet(eta_bar=0.05), SimConfig(150, 0.5, dt=0.05))
    row = annualized_moments(ens, [0.5])[0]
    assert row[2] < 1e-9
    assert row[1] == pytest.approx(0.05, abs=1e-9)


def test_moments_need_enough_survivors():
    ens = simulate(quiet(), SimConfig(50, 0.1, dt=0.05))
    with pytest.raises(InsufficientStatistics):
        annualized_moments(ens, [0.1])
    ens = simulate(quiet(), SimConfig(150, 0.1, dt=0.05))
    with pytest.raises(ValueError):
        annualized_moments(ens, [0.0])


def test_mean_standard_error_decays_at_monte_carlo_rate():
    p = presets.bs_limit_params()
    sizes = [128, 256, 512, 1024, 2048]
    spread = []
    for n in sizes:
        means = [annualized_moments(simulate(p, SimConfig(n, 0.02, dt=0.02, seed=s)), [0.02], min_paths=1)[0, 1]
                 for s in range(40)]
        spread.append(np.std(means, ddof=1))
    slope = np.polyfit(np.log(sizes), np.log(spread), 1)[0]
    assert abs(slope + 0.5) < 0.1


def test_hurst_of_independent_increments():
    estimates = [hurst_exponent(np.random.default_rng(s).normal(size=4096)) for s in range(10)]
    assert abs(np.mean(estimates) - 0.5) < 0.05


def test_hurst_detects_antipersistence():
    rng = np.random.default_rng(0)
    alternating = (-1.0) ** np.arange(2048) * (1 + 0.1 * rng.normal(size=2048))
    assert hurst_exponent(alternating) < 0.3
    fgn = fgn_davies_harte(4096, 0.15, rng)
    assert hurst_exponent(fgn) < 0.3


def test_hurst_detects_persistence():
    fgn = fgn_davies_harte(4096, 0.85, np.random.default_rng(1))
    assert hurst_exponent(fgn) > 0.7


def test_hurst_input_checks():
    with pytest.raises(InsufficientStatistics):
        hurst_exponent(np.ones(100))
    with pytest.raises(InsufficientStatistics):
        hurst_exponent(np.zeros(256))
    with pytest.raises(ValueError):
        hurst_exponent(np.r_[np.ones(200), np.nan])


def test_path_hurst_requires_every_step():
    p = presets.bs_limit_params()
    with pytest.raises(InsufficientStatistics):
        path_hurst(simulate(p, SimConfig(5, 1.0, record_times=[1.0])))
    h = path_hurst(simulate(p, SimConfig(20, 2.0, seed=4)))
    assert 0.35 < h < 0.65


def test_mpr_series_is_pointwise_identity():
    p = presets.res_t0_425()
    ens = simulate(p, SimConfig(40, 0.1, seed=2))
    mean, samples = mpr_series(ens, p, n_samples=3)
    ok = np.flatnonzero(ens.survivors)[:3]
    for j, idx in enumerate(ok):
        expect = market_price_of_risk_x(State(ens.x[:, idx], ens.y[:, idx], ens.theta[:, idx]), ens.times, p)
        np.testing.assert_array_equal(samples[:, j], expect)
    assert mean.shape == ens.times.shape


def test_mpr_constant_in_gbm_limit():
    p = presets.bs_limit_params()
    ens = simulate(p, SimConfig(30, 0.1, seed=2))
    mean, samples = mpr_series(ens, p)
    np.testing.assert_allclose(samples, (p.eta_bar - p.r) / p.sigma, rtol=1e-13)


def test_summary_csv(tmp_path):
    p = make_params()
    ens = simulate(p, SimConfig(30, 0.1, dt=0.05, seed=1))
    out = tmp_path / "summary.csv"
    export_summary_csv(out, ens, p)
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["time", "mean_x", "mean_y", "mean_theta", "default_frac", "mpr_mean"]
    assert len(rows) == 1 + ens.times.size
    assert float(rows[-1][1]) == pytest.approx(ens.x[-1].mean(), rel=1e-5)


@settings(max_examples=15, deadline=None)
@given(n=st.integers(1, 60), seed=st.integers(0, 2**32))
def test_trajectory_shapes_and_start(n, seed):
    ens = simulate(make_params(), SimConfig(n, 0.05, dt=0.01, seed=seed, x0=0.1))
    assert ens.x.shape == ens.y.shape == ens.theta.shape == (6, n)
    np.testing.assert_array_equal(ens.x[0], 0.1)
    assert ens.defaulted.shape == (n,)


@settings(max_examples=10, deadline=None)
@given(eta=st.floats(-1, 1), x0=st.floats(-1, 1))
def test_quiet_limit_property(eta, x0):
    p = dataclasses.replace(quiet(), eta_bar=eta)
    ens = simulate(p, SimConfig(2, 0.1, dt=0.01, x0=x0))
    np.testing.assert_allclose(ens.x[:, 0], x0 + eta * ens.times, atol=1e-9)
