from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_params
from marketron.kernels import (
    CollocationPoint,
    GaussianAxis,
    KernelContext,
    a_factor,
    aux_integrals,
    erf_gauss_integral,
    green3d,
    linear_kernel,
    omega_kjl,
    quadratic_kernel,
    source_kernel,
    terminal_convolution,
    terminal_convolution_dx,
)
from marketron.model import ErfSigmoid, ModelParams, State, UnsupportedConfiguration, v_m, v_m_prime
from marketron.oracles import QuadratureSpec, gaussian_expectation_1d, quad1d, quad3d_gh


def random_params(rng) -> ModelParams:
    return ModelParams(
        sigma=rng.uniform(0.2, 0.6), sigma_y=rng.uniform(0.2, 1), sigma_theta=rng.uniform(0.2, 1),
        k=rng.uniform(0, 3), theta_hat=rng.uniform(-1, 1), mu=rng.uniform(0, 3),
        y_bar=rng.uniform(-0.5, 0.5), c=rng.uniform(0, 3), g=rng.uniform(0.1, 1),
        eps_bar=rng.uniform(0.15, 1), eta_bar=rng.uniform(-0.1, 0.1), gamma=rng.uniform(0.1, 2),
        r=0.01, q=0.0, s_star=1000.0, y0=0.1, theta0=0.5,
        signal=ErfSigmoid(b1=rng.uniform(-2, 2), b2=rng.uniform(-2, 2), a1=rng.uniform(-2, 2), a2=rng.uniform(-2, 2)),
    )


def draws(n=25, seed=1):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        p = random_params(rng)
        dt = rng.uniform(1e-3, 0.1)
        eps = tuple(rng.uniform(0.5, 20, 3))
        ctx = KernelContext(dt=dt, eps_rbf=eps, params=p)
        fp = State(*rng.uniform(-0.5, 0.5, 3))
        c1 = CollocationPoint(*rng.uniform(-0.5, 0.5, 3))
        c2 = CollocationPoint(*rng.uniform(-0.5, 0.5, 3))
        yield p, ctx, fp, c1, c2


def heat_scales(p, dt):
    return (p.sigma * math.sqrt(dt), p.sigma_y * math.sqrt(dt), p.sigma_theta * math.sqrt(dt))


def rbf(X, Y, Z, c, eps):
    ex, ey, et = eps
    return np.exp(-ex * (X - c.xk) ** 2 - ey * (Y - c.yj) ** 2 - et * (Z - c.thetal) ** 2)


def rel(a, b):
    return abs(a - b) / abs(b)


def test_linear_kernel_matches_quadrature():
    for p, ctx, fp, c, _ in draws():
        ex, ey, et = ctx.eps3

        def integrand(X, Y, Z):
            C = rbf(X, Y, Z, c, ctx.eps3)
            mu_y = p.signal.h(Z, 0) + p.mu * (p.y_bar - Y) - p.c * v_m(X, p)
            return (
                p.eta_bar * (-2 * ex * (X - c.xk)) + mu_y * (-2 * ey * (Y - c.yj))
                + p.k * (p.theta_hat - Z) * (-2 * et * (Z - c.thetal)) - p.r
            ) * C

        ref = quad3d_gh(integrand, (fp.x, fp.y, fp.theta), heat_scales(p, ctx.dt), QuadratureSpec(nodes_per_axis=48))
        assert rel(linear_kernel(fp, c, ctx), ref) < 1e-6


def test_linear_kernel_parts_sum_to_total(params):
    ctx = KernelContext(dt=0.01, eps_rbf=(3.0, 2.0, 1.0), params=params)
    fp, c = State(0.1, 0.2, 0.3), CollocationPoint(0.0, 0.1, 0.4)
    parts = linear_kernel(fp, c, ctx, parts=True)
    assert set(parts) == {"A1", "A21", "A22", "A23", "A3"}
    assert sum(parts.values()) == pytest.approx(linear_kernel(fp, c, ctx), rel=1e-14)


def test_source_kernel_matches_quadrature():
    for p, ctx, fp, _, _ in draws():
        def integrand(X, Y, Z):
            mb = p.signal.f(Z, 0) + p.eta_bar + p.sigma**2 / 2 - p.r - p.c * Y * v_m_prime(X, p)
            return -(mb**2) / (2 * p.gamma * p.sigma**2)

        ref = quad3d_gh(integrand, (fp.x, fp.y, fp.theta), heat_scales(p, ctx.dt), QuadratureSpec(nodes_per_axis=48))
        assert rel(source_kernel(fp, ctx), ref) < 1e-6


def test_quadratic_kernel_matches_quadrature():
    # The integrand of the quadratic kernel changes sign, so the oracle needs a
    # finer rule than the other kernels to reach the same relative accuracy.
    for p, ctx, fp, c1, c2 in draws():
        ex, ey, et = ctx.eps3

        def integrand(X, Y, Z):
            prod = rbf(X, Y, Z, c1, ctx.eps3) * rbf(X, Y, Z, c2, ctx.eps3)
            iy = 4 * ey**2 * (Y - c1.yj) * (Y - c2.yj)
            it = 4 * et**2 * (Z - c1.thetal) * (Z - c2.thetal)
            return 0.5 * p.gamma * (p.sigma_y**2 * iy + p.sigma_theta**2 * it) * prod

        ref = quad3d_gh(integrand, (fp.x, fp.y, fp.theta), heat_scales(p, ctx.dt), QuadratureSpec(nodes_per_axis=96))
        assert rel(quadratic_kernel(fp, c1, c2, ctx), ref) < 1e-6


def test_omega_matches_quadrature():
    for p, ctx, fp, c, _ in draws():
        ref = quad3d_gh(lambda X, Y, Z: rbf(X, Y, Z, c, ctx.eps3), (fp.x, fp.y, fp.theta),
                        heat_scales(p, ctx.dt), QuadratureSpec(nodes_per_axis=48))
        assert rel(omega_kjl(fp, c, ctx), ref) < 1e-6


@pytest.mark.parametrize("kind", ["If1", "If2", "Iv1", "Iv2"])
def test_aux_integrals_match_quadrature(kind):
    for p, ctx, fp, c, _ in draws():
        ex, _, et = ctx.eps3
        sx, _, st_ = heat_scales(p, ctx.dt)
        if kind.startswith("If"):
            z, center, s, e = fp.theta, c.thetal, st_, et
            power = 1 if kind == "If1" else 2
            fn = lambda t: float(p.signal.f(t, 0)) ** power  # noqa: E731
        else:
            z, center, s, e = fp.x, c.xk, sx, ex
            power = 1 if kind == "Iv1" else 2
            fn = lambda t: float(v_m_prime(t, p)) ** power  # noqa: E731
        ref = gaussian_expectation_1d(lambda t: fn(t) * math.exp(-e * (t - center) ** 2), z, s)
        assert rel(aux_integrals(kind, (z, center), ctx), ref) < 1e-6


def test_aux_integrals_rejects_unknown(params):
    ctx = KernelContext(dt=0.01, eps_rbf=1.0, params=params)
    with pytest.raises(ValueError):
        aux_integrals("Ix", (0.0, 0.0), ctx)


def test_erf_gauss_integral_matches_quadrature():
    from scipy import special

    rng = np.random.default_rng(7)
    for _ in range(25):
        alpha, beta, b = rng.uniform(0.2, 3), rng.uniform(-2, 2), rng.uniform(-2, 2)
        center = -beta / alpha
        half = 14.0 / alpha
        ref = quad1d(lambda t: special.erf(t + b) * math.exp(-((alpha * t + beta) ** 2)), center - half, center + half)
        assert rel(erf_gauss_integral(alpha, beta, b), ref) < 1e-6


def test_erf_gauss_integral_rejects_nonpositive_alpha():
    with pytest.raises(ValueError):
        erf_gauss_integral(0.0, 0.0, 0.0)


@pytest.mark.parametrize("kind", ["call", "put"])
def test_terminal_convolution_matches_quadrature(kind):
    rng = np.random.default_rng(3)
    for _ in range(25):
        p = make_params(sigma=rng.uniform(0.1, 0.6))
        tau, x, K = rng.uniform(0.01, 1.0), rng.uniform(-0.5, 0.5), rng.uniform(700, 1300)
        payoff = (lambda s: max(s - K, 0.0)) if kind == "call" else (lambda s: max(K - s, 0.0))
        sd = p.sigma * math.sqrt(tau)
        kink = math.log(K / p.s_star)

        def integrand(z):
            u = (z - x) / sd
            return payoff(p.s_star * math.exp(z)) * math.exp(-0.5 * u * u) / (sd * math.sqrt(2 * math.pi))

        lo, hi = x - 12 * sd, x + 12 * sd
        pts = [kink] if lo < kink < hi else None
        ref = quad1d(integrand, lo, hi, points=pts)
        val = terminal_convolution(tau, x, K, kind, p)
        assert abs(val - ref) <= 1e-6 * max(abs(ref), 1e-3)


@given(x=st.floats(-0.6, 0.6), tau=st.floats(0.01, 1.0))
@settings(max_examples=40, deadline=None)
def test_terminal_convolution_dx_is_derivative(x, tau):
    p = make_params()
    h = 1e-5
    for kind in ("call", "put"):
        fd = (terminal_convolution(tau, x + h, 1000.0, kind, p) - terminal_convolution(tau, x - h, 1000.0, kind, p)) / (2 * h)
        assert terminal_convolution_dx(tau, x, 1000.0, kind, p) == pytest.approx(fd, rel=1e-6, abs=1e-6)


@given(x=st.floats(-0.6, 0.6), tau=st.floats(0.01, 1.0), K=st.floats(600, 1400))
@settings(max_examples=40, deadline=None)
def test_terminal_convolution_parity(x, tau, K):
    # Heat convolution of S - K in x is S_* exp(x + sigma^2 tau / 2) - K.
    p = make_params()
    diff = terminal_convolution(tau, x, K, "call", p) - terminal_convolution(tau, x, K, "put", p)
    expected = p.s_star * math.exp(x + 0.5 * p.sigma**2 * tau) - K
    assert diff == pytest.approx(expected, rel=1e-10, abs=1e-9)


def test_terminal_convolution_at_zero_tau_is_payoff(params):
    x = np.array([-0.1, 0.0, 0.1])
    spot = params.s_star * np.exp(x)
    np.testing.assert_allclose(terminal_convolution(0.0, x, 1000.0, "call", params), np.maximum(spot - 1000, 0))
    np.testing.assert_allclose(terminal_convolution(0.0, x, 1000.0, "put", params), np.maximum(1000 - spot, 0))


def test_terminal_convolution_validates(params):
    with pytest.raises(ValueError):
        terminal_convolution(0.1, 0.0, -1.0, "call", params)
    with pytest.raises(ValueError):
        terminal_convolution(0.1, 0.0, 1000.0, "digital", params)


def test_gaussian_axis_zero_variance_is_pointwise():
    ax = GaussianAxis(0.3, 0.1, 2.0, 0.0)
    assert ax.weight == pytest.approx(math.exp(-2.0 * 0.04))
    assert ax.m == pytest.approx(0.3) and ax.v == 0.0
    from scipy import special

    assert ax.e_erf(1.3, 0.2) == pytest.approx(special.erf(1.3 * 0.3 + 0.2))
    assert ax.e_erf2(1.3, 0.2) == pytest.approx(special.erf(1.3 * 0.3 + 0.2) ** 2)


def test_kernels_at_zero_dt_are_point_evaluations(params):
    ctx = KernelContext(dt=0.0, eps_rbf=(2.0, 3.0, 4.0), params=params)
    fp, c = State(0.1, -0.2, 0.3), CollocationPoint(0.0, 0.1, 0.2)
    expected = math.exp(-2.0 * 0.01 - 3.0 * 0.09 - 4.0 * 0.01)
    assert omega_kjl(fp, c, ctx) == pytest.approx(expected, rel=1e-14)
    mb = (params.signal.f(0.3, 0) + params.eta_bar + params.sigma**2 / 2 - params.r
          - params.c * (-0.2) * v_m_prime(0.1, params))
    assert source_kernel(fp, ctx) == pytest.approx(-(mb**2) / (2 * params.gamma * params.sigma**2), rel=1e-12)


def test_green3d_integrates_to_one(params):
    scales = heat_scales(params, 0.05)
    fp = State(0.0, 0.0, 0.0)
    # E[G(tau; fp - source)] over a wide normal equals the convolution of two
    # Gaussians at zero; compare with the closed form of that convolution.
    val = quad3d_gh(lambda X, Y, Z: green3d(0.05, fp, State(X, Y, Z), params), (0, 0, 0), scales,
                    QuadratureSpec(nodes_per_axis=48))
    expected = 1.0
    for s in scales:
        expected /= math.sqrt(2 * math.pi * 2 * s * s)
    assert val == pytest.approx(expected, rel=1e-10)
    with pytest.raises(ValueError):
        green3d(0.0, fp, fp, params)


def test_a_factor():
    assert a_factor(0.5, 0.1, 2.0) == pytest.approx(math.sqrt(1 + 2 * 2.0 * 0.25 * 0.1))


def test_kernel_context_validation(params):
    with pytest.raises(ValueError):
        KernelContext(dt=-1.0, eps_rbf=1.0, params=params)
    with pytest.raises(ValueError):
        KernelContext(dt=0.1, eps_rbf=(1.0, 0.0, 1.0), params=params)


def test_closed_forms_require_supported_model(params):
    import dataclasses

    from marketron.model import Trig

    ctx = KernelContext(dt=0.01, eps_rbf=1.0, params=dataclasses.replace(params, regularizer="r1"))
    with pytest.raises(UnsupportedConfiguration):
        linear_kernel(State(0, 0, 0), CollocationPoint(0, 0, 0), ctx)
    p2 = dataclasses.replace(params, signal=Trig(0.1, 0.1))
    with pytest.raises(UnsupportedConfiguration):
        source_kernel(State(0, 0, 0), KernelContext(dt=0.01, eps_rbf=1.0, params=p2))
