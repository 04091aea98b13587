from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from scipy import optimize

from conftest import make_params
from marketron import presets
from marketron import volterra as V
from marketron.kernels import CollocationPoint, KernelContext, linear_kernel, quadratic_kernel
from marketron.model import ErfSigmoid, State, Trig, UnsupportedConfiguration
from marketron.oracles import black_scholes
from marketron.rbf import axis_basis, basis_matrix, build_grid, regularize_spd, solve
from marketron.splitting import OptionSpec
from marketron.splitting import price_indifference as split_price

SMOOTH = dict(signal=ErfSigmoid(1.68, -1.21, 0.0, 0.0))


def workspace(p, shape=(4, 3, 3), n_tau=2, T=0.1, **kw):
    g = build_grid([1000.0], p, *shape, n_tau, T)
    return V.assemble(g, KernelContext(g.dtau, g.eps_rbf, p), [1.0], ["call"], [False], **kw)


def pricing(p, specs, n_tau=30, T=0.25, fn=V.price_indifference, shape=(20, 5, 5)):
    g = build_grid([1000.0], p, *shape, n_tau, T)
    return fn(g, KernelContext(g.dtau, g.eps_rbf, p), specs, State(0.0, p.y0, p.theta0))


def test_small_step_matrix_tends_to_interpolation_matrix(params):
    ws = workspace(params, n_tau=1, T=1e-10)
    theta = basis_matrix(ws.grid)
    assert np.max(np.abs(ws.A - theta)) < 1e-8


def test_without_quadratic_term_bilinear_forms_vanish(params):
    ws = workspace(params, include_quadratic=False)
    c = np.random.default_rng(0).normal(size=ws.grid.shape + (1,))
    assert np.all(ws.B(c) == 0.0)
    assert np.all(ws.b_dt(c) == 0.0)
    assert np.all(ws.b_nodal(c) == 0.0)


def test_bilinear_form_is_proportional_to_gamma():
    c = np.random.default_rng(1).normal(size=(4, 3, 3, 1))
    g = build_grid([1000.0], make_params(), 4, 3, 3, 1, 0.1)
    b1 = V.BilinearForm(g, make_params(gamma=0.2), 0.01)(c)
    b2 = V.BilinearForm(g, make_params(gamma=0.4), 0.01)(c)
    np.testing.assert_allclose(b2, 2 * b1, rtol=1e-12)


def test_bilinear_form_matches_kernel_sum(params):
    g = build_grid([1000.0], params, 3, 3, 2, 1, 0.1)
    dt = 0.02
    ctx = KernelContext(dt, g.eps_rbf, params)
    rng = np.random.default_rng(2)
    c1 = rng.normal(size=g.shape + (1,))
    c2 = rng.normal(size=g.shape + (1,))
    fast = V.BilinearForm(g, params, dt)(c1, c2)[..., 0]
    pts = g.points()
    n = g.n_nodes
    fp = State(pts.x[:, None, None], pts.y[:, None, None], pts.theta[:, None, None])
    ca = CollocationPoint(pts.x[None, :, None], pts.y[None, :, None], pts.theta[None, :, None])
    cb = CollocationPoint(pts.x[None, None, :], pts.y[None, None, :], pts.theta[None, None, :])
    K = quadratic_kernel(fp, ca, cb, ctx)  # (n, n, n)
    brute = np.einsum("pab,a,b->p", K, c1.reshape(n), c2.reshape(n)).reshape(g.shape)
    np.testing.assert_allclose(fast, brute, rtol=1e-10, atol=1e-12 * np.max(np.abs(brute)))


def test_nodal_quadratic_matches_bilinear_form_at_zero_step(params):
    g = build_grid([1000.0], params, 3, 4, 4, 1, 0.1)
    theta_inv = [solve(regularize_spd(axis_basis(z, z, e)), np.eye(z.size)) for z, e in zip(g.axes, g.eps_rbf)]
    X, Y, T = np.meshgrid(*g.axes, indexing="ij")
    v = (np.sin(X) + Y**2 - 0.5 * Y * T)[..., None]
    c = V._apply_separable(theta_inv, v)
    a = V.NodalQuadratic(g, params, theta_inv)(v)
    b = V.BilinearForm(g, params, 0.0)(c)
    # The coefficient route loses digits to the interpolation matrix condition number.
    np.testing.assert_allclose(a, b, atol=1e-5 * np.max(np.abs(b)))


def _nodal_system_matrix(ws):
    psi0 = V._kernel_matrix(ws.grid, KernelContext(0.0, ws.grid.eps_rbf, ws.ctx.params), linear_kernel)
    return np.eye(ws.grid.n_nodes) - 0.5 * ws.dt * V._right_inverse(psi0, ws.grid, ws.theta_inv)


def test_linear_case_residual(params):
    ws = workspace(params, include_quadratic=False)
    v0 = np.zeros(ws.grid.shape + (1,))
    ws.G = V.layer_rhs(ws, v0)
    v, its = V.solve_layer(ws, v0)
    M = _nodal_system_matrix(ws)
    G = ws.G.reshape(-1)
    assert np.linalg.norm(M @ v.reshape(-1) - G) / np.linalg.norm(G) < 1e-9
    assert its <= 2


def test_linear_case_converges_in_one_step(params):
    ws = workspace(params, include_quadratic=False)
    ws.G = V.layer_rhs(ws, np.zeros(ws.grid.shape + (1,)))
    rng = np.random.default_rng(3)
    a = ws.grid.shape + (1,)
    c1 = V.fixed_point_step(ws, rng.normal(size=a))
    c2 = V.fixed_point_step(ws, rng.normal(size=a))
    np.testing.assert_array_equal(c1, c2)


def test_fixed_point_step_requires_rhs(params):
    ws = workspace(params)
    with pytest.raises(ValueError):
        V.fixed_point_step(ws, np.zeros(ws.grid.shape + (1,)))


def test_fixed_point_matches_direct_polynomial_solve():
    # Smallest grid (two nodes per axis): the layer equations are a system of
    # eight quadratic polynomials, solved directly by Newton's method.
    p = make_params(gamma=1.5)
    ws = workspace(p, shape=(2, 2, 2), n_tau=1, T=0.2)
    v0 = np.random.default_rng(4).normal(scale=0.5, size=ws.grid.shape + (1,))
    ws.G = V.layer_rhs(ws, v0)
    v_fp, _ = V.solve_layer(ws, v0, V.FixedPointOptions(tol=1e-13))
    M = _nodal_system_matrix(ws)

    def residual(x):
        x4 = x.reshape(ws.grid.shape + (1,))
        return M @ x - ws.G.reshape(-1) - ws.b_nodal(x4).reshape(-1)

    sol = optimize.root(residual, v0.reshape(-1), tol=1e-14)
    assert sol.success
    np.testing.assert_allclose(v_fp.reshape(-1), sol.x, atol=1e-10)


def test_divergence_reports_history(params):
    ws = workspace(params)
    ws.G = V.layer_rhs(ws, np.zeros(ws.grid.shape + (1,)) + 1.0)
    with pytest.raises(V.VolterraDivergence) as err:
        V.solve_layer(ws, np.zeros(ws.grid.shape + (1,)), V.FixedPointOptions(tol=1e-30, max_iter=2))
    assert len(err.value.history) == 2


def test_history_length_bounded_by_layers(params):
    ws = workspace(params, n_tau=3)
    V.march(ws)
    assert len(ws.history) == 3 and len(ws.iterations) == 3


def test_rejects_unsupported_models(params):
    g = build_grid([1000.0], params, 3, 3, 3, 1, 0.1)
    for p in (dataclasses.replace(params, signal=Trig(0.1, 0.1)), dataclasses.replace(params, regularizer="r1")):
        with pytest.raises(UnsupportedConfiguration):
            V.assemble(g, KernelContext(g.dtau, g.eps_rbf, p), [1000.0])


def test_assemble_validates_columns(params):
    g = build_grid([1000.0], params, 3, 3, 3, 1, 0.1)
    with pytest.raises(ValueError):
        V.assemble(g, KernelContext(g.dtau, g.eps_rbf, params), [1000.0, 900.0], kinds=["call"])


def test_black_scholes_limit():
    p = presets.bs_limit_params()
    r = pricing(p, [OptionSpec(1000.0)])[0]
    bs = black_scholes(1000.0, 1000.0, 0.25, p.r, 0.0, p.sigma)
    assert abs(r.price - bs) / bs < 5e-3


def test_zero_payoff_gives_zero_price(params):
    r = pricing(params, [OptionSpec(1e9)], n_tau=4)[0]
    assert abs(r.price) < 1e-8


def test_cross_validation_with_splitting():
    p = make_params()
    spec = [OptionSpec(1000.0)]
    a = pricing(p, spec)[0]
    b = pricing(p, spec, fn=split_price)[0]
    assert abs(a.price - b.price) / b.price < 0.01
    assert abs(a.certainty_equivalent - b.certainty_equivalent) / abs(b.certainty_equivalent) < 0.01


def test_spatially_constant_case_matches_closed_form():
    # c = 0 and signals off: the source is constant, so the no-claim value solves
    # C' = -r C - s with C(0) = 0 at every point.
    p = make_params(c=0.0, eta_bar=0.05, signal=ErfSigmoid(0.0, 0.0, 0.0, 0.0))
    s = (p.eta_bar + 0.5 * p.sigma**2 - p.r) ** 2 / (2 * p.gamma * p.sigma**2)
    exact = -s * (1 - np.exp(-p.r * 0.25)) / p.r
    spec = [OptionSpec(1000.0)]
    a = pricing(p, spec, n_tau=10)[0]
    b = pricing(p, spec, n_tau=10, fn=split_price)[0]
    assert abs(b.certainty_equivalent_zero - exact) < 1e-9
    assert abs(a.certainty_equivalent_zero - exact) < 5e-4 * abs(exact)
    assert abs(a.certainty_equivalent - b.certainty_equivalent) < 1e-4


def test_time_refinement_is_second_order():
    p = make_params(**SMOOTH)

    def ce(n):
        return pricing(p, [OptionSpec(1000.0)], n_tau=n)[0].certainty_equivalent

    errs = [abs(ce(n) - ce(4 * n)) for n in (4, 8)]
    assert 3.0 <= errs[0] / errs[1] <= 5.0


def test_call_prices_decrease_in_strike():
    p = presets.bs_limit_params()
    prices = [r.price for r in pricing(p, [OptionSpec(k) for k in np.linspace(850, 1150, 7)])]
    assert np.all(np.diff(prices) < 0)


def test_price_returns_certainty_equivalents(params):
    g = build_grid([1000.0], params, 6, 3, 3, 2, 0.1)
    ctx = KernelContext(g.dtau, g.eps_rbf, params)
    st = State(0.0, params.y0, params.theta0)
    ce = V.price(g, ctx, [OptionSpec(1000.0)], st)
    res = V.price_indifference(g, ctx, [OptionSpec(1000.0)], st)
    assert ce[0] == pytest.approx(res[0].certainty_equivalent)


def test_paper_scale_iteration_count():
    p = make_params()
    _, ws = pricing(p, [OptionSpec(1000.0)], fn=lambda *a: V.price_indifference(*a, return_workspace=True))
    assert max(ws.iterations) <= 20
