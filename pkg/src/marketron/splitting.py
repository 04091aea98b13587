"""Indifference pricing by Strang splitting of the certainty-equivalent PDE.

In backward time ``tau`` the certainty equivalent solves

    C_tau = L1 C + L2 C + L3 C
    L1 C = sigma^2/2 C_xx + eta_bar C_x - r C - mubar_x^2 / (2 gamma sigma^2)
    L2 C = sigma_y^2/2 C_yy + mu_y C_y + gamma sigma_y^2/2 C_y^2
    L3 C = sigma_theta^2/2 C_thth + mu_theta C_th + gamma sigma_theta^2/2 C_th^2

Each time layer applies the palindrome (L1/2, L2/2, L3, L2/2, L1/2). Every
sub-flow is one-dimensional and advanced with a one-step Volterra (Duhamel)
update: the heat kernel propagates the Gaussian RBF in closed form and the
remaining terms are integrated by the trapezoid rule. The y and theta flows are
linearized by the Cole-Hopf substitution ``w = exp(gamma C)``.

The field is stored as an analytic payoff part (the payoff propagated by the
x flow in closed form, which carries the kink) plus an RBF remainder. The
payoff part is an exact solution of the equation without its source, so the
remainder starts from zero and never sees the kink.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, special

from .kernels import (
    GaussianAxis,
    KernelContext,
    mean_vm_prime,
    mean_vm_prime_sq,
    terminal_convolution,
    terminal_convolution_dx,
)
from .model import (
    ErfSigmoid,
    ModelParams,
    SigmoidTimeDependent,
    State,
    Trig,
    UnsupportedConfiguration,
    excess_drift,
    v_m,
    v_m_prime,
)
from .rbf import (
    CollocationGrid,
    RbfField,
    affine_split,
    axis_basis,
    axis_basis_dz,
    evaluate,
    evaluate_dx,
    fit,
    nodal_values,
    regularize_spd,
    solve,
)

__all__ = [
    "OptionSpec",
    "PriceResult",
    "PayoffCarrier",
    "SplitStepPlan",
    "STRANG_PLAN",
    "HopfNormalization",
    "DegenerateStateError",
    "SplitOptions",
    "frozen_signal",
    "substep_l1",
    "substep_l2",
    "substep_l3",
    "hopf_forward",
    "hopf_inverse",
    "march",
    "price_indifference",
    "results_from_field",
]

logger = logging.getLogger(__name__)


class DegenerateStateError(RuntimeError):
    """Every transformed value was clamped; the field carries no information."""


@dataclass(frozen=True)
class OptionSpec:
    """A European claim. ``spot`` overrides the pricing state's ``x`` when set."""

    strike: float
    kind: str = "call"
    spot: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("call", "put"):
            raise ValueError("kind must be 'call' or 'put'")
        if not self.strike > 0:
            raise ValueError("strike must be positive")


@dataclass(frozen=True)
class PriceResult:
    price: float
    certainty_equivalent: float
    certainty_equivalent_zero: float
    hedge: float
    delta: float
    spot: float
    strike: float
    kind: str


@dataclass(frozen=True)
class SplitStepPlan:
    steps: tuple = (("L1", 0.5), ("L2", 0.5), ("L3", 1.0), ("L2", 0.5), ("L1", 0.5))

    def __post_init__(self):
        if tuple(reversed(self.steps)) != tuple(self.steps):
            raise ValueError("plan must be palindromic")
        totals: dict = {}
        for op, frac in self.steps:
            totals[op] = totals.get(op, 0.0) + frac
        if any(abs(v - 1.0) > 1e-12 for v in totals.values()):
            raise ValueError("fractions per operator must sum to one")


STRANG_PLAN = SplitStepPlan()


@dataclass(frozen=True)
class HopfNormalization:
    e_max: float
    a_shift: object

    def __post_init__(self):
        if np.any(np.asarray(self.a_shift) < 0):
            raise ValueError("a_shift must be non-negative")


@dataclass(frozen=True)
class SplitOptions:
    e_max: float = 350.0
    floor: float = 1e-300
    terminal_shift: float = 0.0
    plan: SplitStepPlan = STRANG_PLAN


class PayoffCarrier:
    """Payoffs propagated by the x flow ``sigma^2/2 d_xx + eta_bar d_x - r``.

    At backward time ``tau`` the value is ``exp(-r tau) I(tau, x + eta_bar tau)``
    with ``I`` the heat-kernel convolution of the payoff. A function of ``x``
    alone is left unchanged by the y and theta flows (their derivative terms
    vanish and the Cole-Hopf factor is constant along each line), so this is
    the exact solution of the full equation minus its source and the RBF
    remainder receives no forcing from the payoff. Columns with
    ``active == False`` carry zero (the no-claim surface).
    """

    def __init__(self, strikes, kinds, params: ModelParams, tau: float = 0.0, active=None):
        self.strikes = np.atleast_1d(np.asarray(strikes, dtype=float))
        self.kinds = list(kinds)
        self.params = params
        self.tau = float(tau)
        self.active = np.ones(self.strikes.size, bool) if active is None else np.asarray(active, bool)

    def advanced(self, dt: float) -> "PayoffCarrier":
        return PayoffCarrier(self.strikes, self.kinds, self.params, self.tau + dt, self.active)

    def _eval(self, x, fn):
        p = self.params
        x = np.asarray(x, dtype=float) + p.eta_bar * self.tau
        disc = math.exp(-p.r * self.tau)
        out = np.zeros(x.shape + (self.strikes.size,))
        for i, (K, kind) in enumerate(zip(self.strikes, self.kinds)):
            if self.active[i]:
                out[..., i] = disc * fn(self.tau, x, K, kind, p)
        return out

    def value(self, x):
        return self._eval(x, terminal_convolution)

    def dx(self, x):
        return self._eval(x, terminal_convolution_dx)


def frozen_signal(params: ModelParams, t0: float, t1: float):
    """Signal functions of ``theta`` with amplitudes averaged over ``[t0, t1]``."""
    sig = params.signal
    if isinstance(sig, SigmoidTimeDependent):
        a1 = 0.5 * (sig.a1(t0) + sig.a1(t1))
        a2 = 0.5 * (sig.a2(t0) + sig.a2(t1))
        return (lambda th: a1 * special.expit(sig.b1 * th)), (lambda th: a2 * special.expit(sig.b2 * th))
    if isinstance(sig, (Trig, ErfSigmoid)):
        return (lambda th: sig.f(th, t0)), (lambda th: sig.h(th, t0))
    raise UnsupportedConfiguration(f"unknown signal {type(sig).__name__}")


# One-dimensional step operators -----------------------------------------------

def _inverse_basis(nodes, eps):
    theta = regularize_spd(axis_basis(nodes, nodes, eps))
    return theta, solve(theta, np.eye(nodes.size))


def _heat_blocks(nodes, eps, var):
    """Heat-propagated basis ``Omega``, its derivative, and the first moment block.

    Returns ``(Omega, dOmega, Omega_z)`` where ``Omega[p, q] = int G phi_q``,
    ``dOmega`` is the field-point derivative and ``Omega_z[p, q] = int G eta phi_q'``
    is needed for affine drifts.
    """
    ax = GaussianAxis(nodes[:, None], nodes[None, :], eps, var)
    omega = ax.weight
    domega = -2.0 * eps * (nodes[:, None] - nodes[None, :]) / ax.a2 * omega
    # int G * phi_q'(eta) and int G * eta * phi_q'(eta)
    d1 = -2.0 * eps * ax.e_lin(nodes[None, :]) * omega
    dz = -2.0 * eps * (ax.m * ax.e_lin(nodes[None, :]) + ax.v) * omega
    return omega, domega, d1, dz


class _Line1D:
    """Trapezoid one-step Duhamel operator for ``u_t = s^2/2 u_zz + (alpha - beta z) u_z + rho u``.

    ``alpha`` may vary across lines (leading batch axes). Returns nodal-to-nodal
    matrices so a step is a batched matrix product.
    """

    def __init__(self, nodes, eps, s, dt, alpha, beta, rho):
        theta, theta_inv = _inverse_basis(nodes, eps)
        omega, domega, d1, dz = _heat_blocks(nodes, eps, s * s * dt)
        dphi = axis_basis_dz(nodes, nodes, eps)
        zdphi = nodes[:, None] * dphi
        alpha = np.asarray(alpha, dtype=float)[..., None, None]
        lhs = theta - 0.5 * dt * (alpha * dphi - beta * zdphi + rho * theta)
        rhs = omega + 0.5 * dt * (alpha * d1 - beta * dz + rho * omega)
        # nodal -> nodal map: theta lhs^{-1} rhs theta^{-1}; theta is symmetric so
        # theta lhs^{-1} = (lhs^{-T} theta)^T.
        left = np.swapaxes(np.linalg.solve(np.swapaxes(lhs, -1, -2), np.broadcast_to(theta, lhs.shape)), -1, -2)
        # Affine data a + b z follow the exact flow of the generator
        # (a, b)' = (rho a + alpha b, (rho - beta) b); the RBFs see only the
        # residual from the least-squares line, so nothing leaks at the ends.
        basis, fit_affine, residual = affine_split(nodes)
        gen = np.zeros(alpha.shape[:-2] + (2, 2))
        gen[..., 0, 0] = rho
        gen[..., 0, 1] = alpha[..., 0, 0]
        gen[..., 1, 1] = rho - beta
        self.propagate = left @ rhs @ theta_inv @ residual + basis @ linalg.expm(dt * gen) @ fit_affine
        # Forcing enters through the implicit trapezoid factor, for the line as well.
        implicit = np.linalg.inv(np.eye(2) - 0.5 * dt * gen)
        self.inject = left @ residual + basis @ implicit @ fit_affine


class _OuLine1D:
    """Exact one-step map for ``u_t = s^2/2 u_zz + (alpha - beta z) u_z``.

    The Gaussian transition of the Ornstein-Uhlenbeck process takes each
    Gaussian RBF to a Gaussian in closed form, so the drift is propagated
    without a quadrature rule and the map is positivity preserving up to
    interpolation error. ``alpha`` may vary across lines (leading batch axes).
    """

    def __init__(self, nodes, eps, s, dt, alpha, beta):
        _, theta_inv = _inverse_basis(nodes, eps)
        alpha = np.asarray(alpha, dtype=float)[..., None, None]
        if beta * dt > 1e-12:
            decay = math.exp(-beta * dt)
            shift = alpha * (-math.expm1(-beta * dt) / beta)
            var = s * s * (-math.expm1(-2.0 * beta * dt)) / (2.0 * beta)
        else:
            decay = 1.0
            shift = alpha * dt
            var = s * s * dt
        mean = decay * nodes[:, None] + shift  # (..., n, 1)
        a2 = 1.0 + 2.0 * eps * var
        expect = np.exp(-eps * (mean - nodes[None, :]) ** 2 / a2) / math.sqrt(a2)
        # The affine part of the data (least-squares line through the nodes) is
        # carried exactly by the OU mean; RBFs only see the residual. Without
        # this the Gaussian tails leak mass at the ends of every line.
        _, fit_affine, residual = affine_split(nodes)
        affine = np.concatenate([np.broadcast_to(1.0, mean.shape), mean], axis=-1) @ fit_affine
        self.propagate = expect @ theta_inv @ residual + affine
        self.inject = None
        self.monotone = _linear_transition(nodes, mean[..., 0], math.sqrt(var))


def _linear_transition(nodes, mean, sd):
    """Transition weights for piecewise-linear interpolation with flat ends.

    ``out[..., p, q]`` is the expectation of the q-th hat function under
    ``N(mean[..., p], sd^2)``. Every weight is non-negative and rows sum to one,
    so positive data stay positive.
    """
    n = nodes.size
    h = np.diff(nodes)
    # Slope matrix: slope_j = (w_{j+1} - w_j) / h_j, zero outside the nodes.
    slopes = np.zeros((n + 1, n))
    for j in range(n - 1):
        slopes[j + 1, j] = -1.0 / h[j]
        slopes[j + 1, j + 1] = 1.0 / h[j]
    kinks = slopes[1:] - slopes[:-1]  # (n, n): change of slope at node j
    d = (mean[..., None] - nodes) / sd
    ramp = (mean[..., None] - nodes) * special.ndtr(d) + sd * np.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi)
    first = np.zeros(n)
    first[0] = 1.0
    return first + ramp @ kinks


class _Operators:
    """Sub-step operators for one time layer."""

    def __init__(self, grid: CollocationGrid, params: ModelParams, dt: float, t0: float, t1: float,
                 need_l1: bool = True):
        p = params
        self.params = p
        self.grid = grid
        self.dt = dt
        f, h = frozen_signal(p, t0, t1)
        self.f_nodes = f(grid.thetas)
        self.h_nodes = h(grid.thetas)
        xs, ys, ths = grid.axes
        ex, ey, et = grid.eps_rbf
        half = 0.5 * dt
        if need_l1:
            self.l1 = _Line1D(xs, ex, p.sigma, half, p.eta_bar, 0.0, -p.r)
            self.src_half = self._source(half)
            self.src_zero = self._source(0.0)
        alpha_y = self.h_nodes[None, :] + p.mu * p.y_bar - p.c * v_m(xs, p)[:, None]  # (nx, nt)
        self.l2 = _OuLine1D(ys, ey, p.sigma_y, half, alpha_y, p.mu)
        self.l3 = _OuLine1D(ths, et, p.sigma_theta, dt, p.k * p.theta_hat, p.k)

    def _source(self, dt):
        """``mubar_x^2 / (2 gamma sigma^2)`` heat-propagated along x, shape (nx, ny, nt)."""
        p = self.params
        xs, ys, _ = self.grid.axes
        e0 = p.eta_bar + 0.5 * p.sigma**2 - p.r
        fe = (self.f_nodes + e0)[None, None, :]
        y = ys[None, :, None]
        if dt > 0 and p.c != 0.0:
            if p.regularizer == "r2":
                ax = GaussianAxis(xs, 0.0, 0.0, p.sigma**2 * dt)
                m1 = mean_vm_prime(ax, p)
                m2 = mean_vm_prime_sq(ax, p)
            else:
                m1, m2 = _gh_moments(lambda z: v_m_prime(z, p), xs, p.sigma * math.sqrt(dt))
        else:
            vp = v_m_prime(xs, p)
            m1, m2 = vp, vp * vp
        m1 = np.asarray(m1)[:, None, None]
        m2 = np.asarray(m2)[:, None, None]
        total = fe * fe - 2.0 * p.c * y * fe * m1 + p.c * p.c * y * y * m2
        return total / (2.0 * p.gamma * p.sigma**2)


def _gh_moments(fn, centers, scale, n=40):
    nodes, weights = np.polynomial.hermite.hermgauss(n)
    z = centers[:, None] + math.sqrt(2.0) * scale * nodes[None, :]
    v = fn(z)
    w = weights / math.sqrt(math.pi)
    return v @ w, (v * v) @ w


# Nodal sub-steps ---------------------------------------------------------------
# ``J`` has shape (nx, ny, nt, m): RBF remainder at the nodes, one column per surface.

def _l1_nodal(ops: _Operators, J, carrier: Optional[PayoffCarrier], include_source=True):
    """Advance the x flow by ``dt/2``; returns (J_new, carrier_new)."""
    half = 0.5 * ops.dt
    rhs = np.einsum("pq,qjlm->pjlm", ops.l1.propagate, J)
    if include_source:
        forcing = -(0.5 * half * (ops.src_half + ops.src_zero))[..., None]
        rhs += np.einsum("pq,qjlm->pjlm", ops.l1.inject, np.broadcast_to(forcing, J.shape))
    new_carrier = None if carrier is None else carrier.advanced(half)
    return rhs, new_carrier


def _line_hopf(values, gamma, e_max, axis):
    """Per-line Cole-Hopf forward map with overflow shift along ``axis``."""
    s = gamma * values
    a = np.maximum(np.max(s, axis=axis, keepdims=True) - e_max, 0.0)
    return np.exp(s - a), a


def _line_hopf_inverse(w, a, gamma, floor):
    clamped = w <= floor
    return (np.log(np.where(clamped, floor, w)) + a) / gamma, int(np.count_nonzero(clamped))


def _l2_nodal(ops: _Operators, J, gamma, options: SplitOptions):
    w, a = _line_hopf(J, gamma, options.e_max, axis=1)
    out = np.einsum("klpq,kqlm->kplm", ops.l2.propagate, w)
    bad = np.any(out <= options.floor, axis=3)  # (nx, ny, nt) rows
    if np.any(bad):
        k, j, l = np.nonzero(bad)
        out[k, j, l, :] = np.einsum("nq,nqm->nm", ops.l2.monotone[k, l, j], w[k, :, l, :])
    J_new, n = _line_hopf_inverse(out, a, gamma, options.floor)
    return J_new, int(np.count_nonzero(bad)), n


def _l3_nodal(ops: _Operators, J, gamma, options: SplitOptions):
    w, a = _line_hopf(J, gamma, options.e_max, axis=2)
    out = np.einsum("pq,kjqm->kjpm", ops.l3.propagate, w)
    bad = np.any(out <= options.floor, axis=3)  # (nx, ny, nt) rows
    if np.any(bad):
        k, j, l = np.nonzero(bad)
        out[k, j, l, :] = np.einsum("nq,nqm->nm", ops.l3.monotone[l], w[k, j])
    J_new, n = _line_hopf_inverse(out, a, gamma, options.floor)
    return J_new, int(np.count_nonzero(bad)), n


@dataclass
class MarchResult:
    J: np.ndarray
    carrier: Optional[PayoffCarrier]
    clamps: int = 0
    clamp_history: list = field(default_factory=list)
    fallback_lines: int = 0


def march(grid: CollocationGrid, params: ModelParams, J0, carrier: Optional[PayoffCarrier],
          options: SplitOptions = SplitOptions(), include_source: bool = True) -> MarchResult:
    """Run the Strang plan over every layer of ``grid.taus``.

    ``J0`` holds nodal initial values of the RBF remainder, shape (nx, ny, nt, m).
    """
    T = float(grid.taus[-1])
    dt = grid.dtau
    J = np.array(J0, dtype=float)
    gamma = params.gamma
    time_dependent = isinstance(params.signal, SigmoidTimeDependent)
    ops = None
    clamps = 0
    fallbacks = 0
    history = []
    for i in range(1, grid.taus.size):
        t0, t1 = T - grid.taus[i - 1], T - grid.taus[i]
        if ops is None or time_dependent:
            ops = _Operators(grid, params, dt, t0, t1)
        step_clamps = 0
        for op, frac in options.plan.steps:
            if op == "L1":
                J, carrier = _l1_nodal(ops, J, carrier, include_source)
            elif op == "L2":
                J, nf, n = _l2_nodal(ops, J, gamma, options)
                step_clamps += n
                fallbacks += nf
            else:
                J, nf, n = _l3_nodal(ops, J, gamma, options)
                step_clamps += n
                fallbacks += nf
        if not np.all(np.isfinite(J)):
            raise FloatingPointError(f"non-finite field at layer {i}")
        clamps += step_clamps
        history.append(step_clamps)
    if clamps:
        logger.warning("Cole-Hopf clamp engaged %d times", clamps)
    if fallbacks:
        logger.info("monotone line transition used on %d lines", fallbacks)
    return MarchResult(J, carrier, clamps, history, fallbacks)


# Public field-level sub-steps -----------------------------------------------------

def _field_nodal_remainder(field: RbfField):
    carrier = field.carrier
    field_rbf = RbfField(field.grid, field.coeffs, None, field.values)
    V = nodal_values(field_rbf)
    if V.ndim == 3:
        V = V[..., None]
    return V, carrier


def _to_field(grid, J, carrier, squeeze):
    if squeeze:
        J = J[..., 0]
    out = fit(grid, J.reshape((grid.n_nodes,) + J.shape[3:]))
    out.carrier = carrier
    return out


def _ops_for(field: RbfField, dt: float, ctx: KernelContext, t: float, need_l1=True):
    # _Operators works with half steps for L1/L2 and full for L3; pass 2*dt so
    # the half step equals the requested dt.
    return _Operators(field.grid, ctx.params, 2.0 * dt, t, t, need_l1)


def substep_l1(field: RbfField, dt: float, ctx: KernelContext, include_source: bool = True,
               t: float = 0.0) -> RbfField:
    """Advance the x flow (diffusion, drift ``eta_bar``, discount, source) by ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    J, carrier = _field_nodal_remainder(field)
    ops = _ops_for(field, dt, ctx, t)
    J, carrier = _l1_nodal(ops, J, carrier, include_source)
    return _to_field(field.grid, J, carrier, field.coeffs.ndim == 1)


def _hidden_substep(field, dt, ctx, t, which):
    if not dt > 0:
        raise ValueError("dt must be positive")
    J, carrier = _field_nodal_remainder(field)
    options = SplitOptions()
    if which == "L2":
        ops = _ops_for(field, dt, ctx, t, need_l1=False)
        J, _, _ = _l2_nodal(ops, J, ctx.params.gamma, options)
    else:
        ops = _Operators(field.grid, ctx.params, dt, t, t, need_l1=False)
        J, _, _ = _l3_nodal(ops, J, ctx.params.gamma, options)
    return _to_field(field.grid, J, carrier, field.coeffs.ndim == 1)


def substep_l2(field: RbfField, dt: float, ctx: KernelContext, t: float = 0.0) -> RbfField:
    """Advance the y flow (diffusion, drift ``mu_y``, quadratic gradient term) by ``dt``."""
    return _hidden_substep(field, dt, ctx, t, "L2")


def substep_l3(field: RbfField, dt: float, ctx: KernelContext, t: float = 0.0) -> RbfField:
    """Advance the theta flow by ``dt``."""
    return _hidden_substep(field, dt, ctx, t, "L3")


def hopf_forward(field: RbfField, gamma: float, e_max: float = 350.0):
    """Fit ``w = exp(gamma C - A)`` with a single shift ``A`` over all nodes."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    V = nodal_values(field)
    s = gamma * V
    a = max(float(np.max(s)) - e_max, 0.0)
    w = np.exp(s - a)
    fw = fit(field.grid, w.reshape((field.grid.n_nodes,) + w.shape[3:]))
    return fw, HopfNormalization(e_max, a)


def hopf_inverse(field_w: RbfField, norm: HopfNormalization, gamma: float, carrier=None,
                 floor: float = 1e-300) -> RbfField:
    """Fit ``C = (log(w)^+ + A) / gamma``, clamping non-positive ``w`` at ``floor``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    W = nodal_values(field_w)
    clamped = W <= floor
    if np.all(clamped):
        raise DegenerateStateError("all transformed values were clamped")
    if np.any(clamped):
        logger.warning("Cole-Hopf clamp engaged at %d nodes", int(np.count_nonzero(clamped)))
    V = (np.log(np.where(clamped, floor, W)) + norm.a_shift) / gamma
    return fit(field_w.grid, V.reshape((field_w.grid.n_nodes,) + V.shape[3:]), carrier)


# Indifference price ------------------------------------------------------------------

def price_indifference(grid: CollocationGrid, ctx: KernelContext, option_specs: Sequence[OptionSpec],
                       state0: State, options: SplitOptions = SplitOptions(),
                       return_fields: bool = False):
    """Indifference prices ``pi = C - C0`` of European claims maturing at ``grid.taus[-1]``.

    One march carries every claim (one column per strike) together with the
    no-claim surface ``C0``. Each result is evaluated at ``state0`` (with ``x``
    replaced by ``log(spot / S_*)`` when the spec sets ``spot``). The hedge is
    ``C_x / s + mubar_x / (gamma s sigma^2)`` with ``s`` the spot.
    """
    p = ctx.params
    specs = list(option_specs)
    if not specs:
        return []
    strikes = [s.strike for s in specs] + [1.0]
    kinds = [s.kind for s in specs] + ["call"]
    active = [True] * len(specs) + [False]
    carrier = PayoffCarrier(strikes, kinds, p, 0.0, active)
    nx, ny, nt = grid.shape
    J0 = np.full((nx, ny, nt, len(strikes)), float(options.terminal_shift))
    res = march(grid, p, J0, carrier, options)
    fld = fit(grid, res.J.reshape(grid.n_nodes, -1))
    fld.carrier = res.carrier
    out = results_from_field(fld, specs, state0, p)
    if return_fields:
        return out, fld, res
    return out


def results_from_field(fld: RbfField, option_specs: Sequence[OptionSpec], state0: State,
                       params: ModelParams) -> list:
    """Indifference results from a multi-column certainty-equivalent field.

    Column ``i`` of ``fld`` is the surface for ``option_specs[i]`` and the last
    column is the no-claim surface ``C0``. Shared by every pricer.
    """
    p = params
    out = []
    for i, spec in enumerate(option_specs):
        x0 = float(state0.x) if spec.spot is None else math.log(spec.spot / p.s_star)
        pt = State(np.array([x0]), np.array([float(state0.y)]), np.array([float(state0.theta)]))
        vals = evaluate(fld, pt)[0]
        dvals = evaluate_dx(fld, pt)[0]
        spot = p.s_star * math.exp(x0)
        mubar = _excess_drift_at(pt, p)
        ce, ce0 = float(vals[i]), float(vals[-1])
        hedge = dvals[i] / spot + mubar / (p.gamma * spot * p.sigma**2)
        out.append(PriceResult(ce - ce0, ce, ce0, float(hedge), float((dvals[i] - dvals[-1]) / spot),
                               spot, spec.strike, spec.kind))
    return out


def _excess_drift_at(pt: State, p: ModelParams) -> float:
    return float(np.asarray(excess_drift(pt, 0.0, p)).ravel()[0])
