"""Nonlinear Volterra pricer with Gaussian RBF collocation.

By Duhamel's principle the certainty equivalent over one layer satisfies

    C(tau_i) = T(dt) C(tau_{i-1})
               + int_{tau_{i-1}}^{tau_i} T(tau_i - s) [L C + B(C, C) + S](s) ds

with ``T`` the 3D heat semigroup, ``L`` the first-order linear part, ``B`` the
quadratic gradient term and ``S`` the source. Every convolution of a Gaussian
RBF with the heat kernel is available in closed form (:mod:`kernels`). The
time integral is approximated by the trapezoid rule, which gives per layer the
quadratic system

    A c_i = G_i + (dt/2) B_0(c_i, c_i),     A = Theta - (dt/2) Psi1(0)

solved by fixed-point iteration. As in the splitting pricer, the field is an
analytic payoff part plus an RBF remainder. The payoff part solves the
equation without its source exactly, so it adds no forcing to ``G``.

Internally the system is solved for nodal values ``v = Theta c``; the
separable inverse of ``Theta`` is applied per axis, which keeps the solve well
conditioned even though the 3D interpolation matrix is not.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .kernels import (
    CollocationPoint,
    KernelContext,
    _pair_axis,
    _require_erf_signal,
    _require_r2,
    linear_kernel,
    source_kernel,
)
from .model import ModelParams, State
from .rbf import CollocationGrid, RbfField, affine_split, axis_basis, axis_basis_dz, regularize_spd, solve as minres_solve
from .splitting import OptionSpec, PayoffCarrier, results_from_field

__all__ = [
    "VolterraDivergence",
    "BilinearForm",
    "NodalQuadratic",
    "VolterraWorkspace",
    "FixedPointOptions",
    "assemble",
    "layer_rhs",
    "fixed_point_step",
    "solve_layer",
    "march",
    "price",
    "price_indifference",
]

logger = logging.getLogger(__name__)


class VolterraDivergence(RuntimeError):
    """Fixed-point iterates grew for too many consecutive steps."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)


@dataclass(frozen=True)
class FixedPointOptions:
    tol: float = 1e-9
    max_iter: int = 50
    damp_after: int = 25
    relaxation: float = 0.5
    growth_limit: int = 5


def _apply_separable(mats, V):
    """Apply one matrix per axis to ``V`` of shape ``(nx, ny, nt, ...)``."""
    V = np.einsum("ak,kjl...->ajl...", mats[0], V)
    V = np.einsum("bj,ajl...->abl...", mats[1], V)
    return np.einsum("cl,abl...->abc...", mats[2], V)


class BilinearForm:
    """Heat-propagated quadratic gradient term as a bilinear map on RBF coefficients.

    ``B(c1, c2)`` at node ``p`` is the sum over center pairs of
    :func:`kernels.quadratic_kernel` weighted by ``c1 c2``. The kernel factorizes
    per axis, so the map is applied with per-axis tensors of shape
    ``(n_axis, n_axis, n_axis)`` and the dense ``n^3`` tensor is never formed.
    """

    def __init__(self, grid: CollocationGrid, params: ModelParams, dt: float, scale: float = 1.0):
        p = params
        ex, ey, et = grid.eps_rbf
        self.shape = grid.shape
        self.coef_y = 0.5 * p.gamma * p.sigma_y**2 * scale
        self.coef_t = 0.5 * p.gamma * p.sigma_theta**2 * scale
        self.wx, _ = self._axis(grid.xs, ex, p.sigma**2 * dt)
        self.wy, self.dy = self._axis(grid.ys, ey, p.sigma_y**2 * dt)
        self.wt, self.dt_ = self._axis(grid.thetas, et, p.sigma_theta**2 * dt)

    @staticmethod
    def _axis(z, eps, var):
        ax = _pair_axis(z[:, None, None], z[None, :, None], z[None, None, :], eps, var)
        c1 = z[None, :, None]
        c2 = z[None, None, :]
        return ax.weight, 4.0 * eps * eps * ax.e_quad(c1, c2) * ax.weight

    def __call__(self, c1, c2=None):
        """Nodal values of ``B(c1, c2)``; coefficients shaped ``(nx, ny, nt, m)``."""
        c2 = c1 if c2 is None else c2
        if self.coef_y == 0.0 and self.coef_t == 0.0:
            return np.zeros_like(c1)
        U = np.einsum("pab,bJLm->paJLm", self.wx, c2)
        T = np.einsum("ajlm,paJLm->pjlJLm", c1, U)
        out = self.coef_y * np.einsum("qjJ,slL,pjlJLm->pqsm", self.dy, self.wt, T, optimize=True)
        out += self.coef_t * np.einsum("qjJ,slL,pjlJLm->pqsm", self.wy, self.dt_, T, optimize=True)
        return out


class NodalQuadratic:
    """Pointwise ``(gamma/2)(sigma_y^2 R_y^2 + sigma_theta^2 R_theta^2)`` from nodal values.

    Equal to :class:`BilinearForm` at ``dt = 0`` but applied through per-axis
    differentiation matrices ``Phi' Theta^{-1}``, which avoids rounding noise
    from the large RBF coefficients inside the fixed-point loop.
    """

    def __init__(self, grid: CollocationGrid, params: ModelParams, theta_inv, scale: float = 1.0):
        p = params
        _, ey, et = grid.eps_rbf
        self.coef_y = 0.5 * p.gamma * p.sigma_y**2 * scale
        self.coef_t = 0.5 * p.gamma * p.sigma_theta**2 * scale
        self.dy = axis_basis_dz(grid.ys, grid.ys, ey) @ theta_inv[1]
        self.dt_ = axis_basis_dz(grid.thetas, grid.thetas, et) @ theta_inv[2]

    def __call__(self, v):
        if self.coef_y == 0.0 and self.coef_t == 0.0:
            return np.zeros_like(v)
        ry = np.einsum("bj,ajl...->abl...", self.dy, v)
        rt = np.einsum("cl,abl...->abc...", self.dt_, v)
        return self.coef_y * ry * ry + self.coef_t * rt * rt


@dataclass
class VolterraWorkspace:
    """Matrices and per-layer state of the Volterra march.

    ``A`` is the coefficient-space system matrix ``Theta - (dt/2) Psi1(0)``;
    ``B`` the implicit bilinear term ``(dt/2) B_0``; ``history`` the list of
    trapezoid end-point contributions ``K_i`` (nodal, one per completed layer).
    """

    grid: CollocationGrid
    ctx: KernelContext
    A: np.ndarray
    B: BilinearForm
    strikes: np.ndarray
    kinds: list
    active: np.ndarray
    theta_inv: list
    a_lu: tuple
    propagate: list
    psi_dt: np.ndarray
    b_dt: BilinearForm
    src_now: np.ndarray
    src_prev: np.ndarray
    b_nodal: NodalQuadratic
    history: list = field(default_factory=list)
    G: Optional[np.ndarray] = None
    layer: int = 0
    iterations: list = field(default_factory=list)

    @property
    def dt(self) -> float:
        return self.grid.dtau

    def carrier(self, tau: float) -> PayoffCarrier:
        return PayoffCarrier(self.strikes, self.kinds, self.ctx.params, tau, self.active)

    def to_coeffs(self, V):
        return _apply_separable(self.theta_inv, V)


def _kernel_matrix(grid: CollocationGrid, ctx: KernelContext, kernel):
    pts = grid.points()
    fp = State(pts.x[:, None], pts.y[:, None], pts.theta[:, None])
    cp = CollocationPoint(pts.x[None, :], pts.y[None, :], pts.theta[None, :])
    return kernel(fp, cp, ctx)


def _right_inverse(M, grid, theta_inv):
    """``M Theta^{-1}`` for ``M`` acting on coefficients."""
    nx, ny, nt = grid.shape
    n = grid.n_nodes
    return _apply_separable(theta_inv, M.T.reshape(nx, ny, nt, n)).reshape(n, n).T


def assemble(grid: CollocationGrid, ctx: KernelContext, strikes, kinds=None, active=None,
             include_quadratic: bool = True) -> VolterraWorkspace:
    """Build the layer matrices for a constant-coefficient model.

    Parameters
    ----------
    grid : CollocationGrid
        Nodes and uniform backward-time layers.
    ctx : KernelContext
        Model constants; ``ctx.dt`` is ignored (the layer step is ``grid.dtau``).
    strikes : array_like
        One column per strike. ``kinds`` defaults to calls and ``active`` to
        all-true (inactive columns carry no payoff, e.g. the no-claim surface).
    include_quadratic : bool
        ``False`` drops the quadratic term (linear Volterra system).
    """
    p = ctx.params
    _require_erf_signal(p)
    _require_r2(p)
    strikes = np.atleast_1d(np.asarray(strikes, dtype=float))
    kinds = ["call"] * strikes.size if kinds is None else list(kinds)
    active = np.ones(strikes.size, bool) if active is None else np.asarray(active, bool)
    if len(kinds) != strikes.size or active.size != strikes.size:
        raise ValueError("kinds and active must match strikes")
    dt = grid.dtau
    eps = grid.eps_rbf
    ctx0 = KernelContext(0.0, eps, p)
    ctx1 = KernelContext(dt, eps, p)
    thetas = [regularize_spd(axis_basis(z, z, e)) for z, e in zip(grid.axes, eps)]
    theta_inv = [minres_solve(t, np.eye(t.shape[0])) for t in thetas]
    n = grid.n_nodes
    theta_full = np.kron(np.kron(thetas[0], thetas[1]), thetas[2])
    psi0 = _kernel_matrix(grid, ctx0, linear_kernel)
    A = theta_full - 0.5 * dt * psi0
    a_nodal = np.eye(n) - 0.5 * dt * _right_inverse(psi0, grid, theta_inv)
    psi1 = _right_inverse(_kernel_matrix(grid, ctx1, linear_kernel), grid, theta_inv)
    # The heat convolution of one RBF factorizes per axis.
    propagate = [_heat_axis(z, e, s * s * dt, inv)
                 for z, e, s, inv in zip(grid.axes, eps, (p.sigma, p.sigma_y, p.sigma_theta), theta_inv)]
    scale = 1.0 if include_quadratic else 0.0
    pts = grid.points()
    return VolterraWorkspace(
        grid=grid, ctx=ctx, A=A, B=BilinearForm(grid, p, 0.0, 0.5 * dt * scale), strikes=strikes, kinds=kinds,
        active=active, theta_inv=theta_inv, a_lu=linalg.lu_factor(a_nodal), propagate=propagate,
        psi_dt=psi1, b_dt=BilinearForm(grid, p, dt, scale),
        src_now=source_kernel(pts, ctx0).reshape(grid.shape),
        src_prev=source_kernel(pts, ctx1).reshape(grid.shape),
        b_nodal=NodalQuadratic(grid, p, theta_inv, 0.5 * dt * scale),
    )


def _heat_axis(z, eps, var, theta_inv):
    """Nodal heat step along one axis, exact for affine data.

    Heat leaves ``a + b z`` unchanged; the RBFs propagate only the residual
    from the least-squares line, which stops the Gaussian tails from leaking
    mass at the ends of the axis.
    """
    _, _, residual = affine_split(z)
    return _omega_axis(z, eps, var) @ theta_inv @ residual + (np.eye(z.size) - residual)


def _omega_axis(z, eps, var):
    a2 = 1.0 + 2.0 * eps * var
    d = z[:, None] - z[None, :]
    return np.exp(-eps * d * d / a2) / np.sqrt(a2)


def layer_rhs(ws: VolterraWorkspace, v_prev) -> np.ndarray:
    """Known part ``G`` of the layer system given nodal remainder values ``v_prev``."""
    dt = ws.dt
    nx, ny, nt = ws.grid.shape
    n = ws.grid.n_nodes
    c_prev = ws.to_coeffs(v_prev)
    K = (ws.psi_dt @ v_prev.reshape(n, -1)).reshape(v_prev.shape) + ws.b_dt(c_prev) + ws.src_prev[..., None]
    ws.history.append(0.5 * dt * K)
    return _apply_separable(ws.propagate, v_prev) + 0.5 * dt * K + 0.5 * dt * ws.src_now[..., None]


def _iterate(ws: VolterraWorkspace, v):
    rhs = ws.G + ws.b_nodal(v)
    return linalg.lu_solve(ws.a_lu, rhs.reshape(ws.grid.n_nodes, -1)).reshape(rhs.shape)


def fixed_point_step(ws: VolterraWorkspace, c_prev) -> np.ndarray:
    """One iterate ``c_{n+1} = A^{-1} [G + B(c_n, c_n)]`` for the current layer.

    Coefficients are shaped ``(nx, ny, nt, m)``; ``ws.G`` must be set.
    """
    if ws.G is None:
        raise ValueError("workspace has no layer right-hand side; call layer_rhs first")
    c_prev = np.asarray(c_prev, dtype=float)
    rhs = ws.G + ws.B(c_prev)
    v = linalg.lu_solve(ws.a_lu, rhs.reshape(ws.grid.n_nodes, -1)).reshape(rhs.shape)
    return ws.to_coeffs(v)


def solve_layer(ws: VolterraWorkspace, v_guess, options: FixedPointOptions = FixedPointOptions()):
    """Fixed-point solve of the current layer; returns ``(v, iterations)``.

    Convergence is declared when the nodal update satisfies
    ``||v_{n+1} - v_n||_inf <= tol * max(1, ||v_{n+1}||_inf)``. After
    ``damp_after`` iterations the update is relaxed by ``relaxation``.
    """
    v = np.asarray(v_guess, dtype=float)
    history = []
    growth = 0
    for it in range(1, options.max_iter + 1):
        v_new = _iterate(ws, v)
        if it > options.damp_after:
            v_new = v + options.relaxation * (v_new - v)
        delta = float(np.max(np.abs(v_new - v)))
        if not np.isfinite(delta):
            raise VolterraDivergence(f"non-finite iterate at layer {ws.layer + 1}", history)
        growth = growth + 1 if history and delta > history[-1] else 0
        history.append(delta)
        v = v_new
        if delta <= options.tol * max(1.0, float(np.max(np.abs(v)))):
            return v, it
        if growth >= options.growth_limit:
            raise VolterraDivergence(
                f"fixed point diverging at layer {ws.layer + 1} (update {delta:.3g})", history)
    raise VolterraDivergence(
        f"fixed point did not converge in {options.max_iter} iterations at layer {ws.layer + 1}", history)


def march(ws: VolterraWorkspace, v0=None, options: FixedPointOptions = FixedPointOptions()) -> np.ndarray:
    """Advance the nodal remainder through every layer of ``ws.grid.taus``."""
    nx, ny, nt = ws.grid.shape
    m = ws.strikes.size
    v = np.zeros((nx, ny, nt, m)) if v0 is None else np.array(v0, dtype=float).reshape(nx, ny, nt, m)
    ws.layer = 0
    ws.history.clear()
    ws.iterations.clear()
    for i in range(1, ws.grid.taus.size):
        ws.G = layer_rhs(ws, v)
        v, its = solve_layer(ws, v, options)
        ws.iterations.append(its)
        ws.layer = i
    logger.info("Volterra march: %d layers, fixed-point iterations %s", ws.grid.taus.size - 1,
                ws.iterations)
    return v


def _field(ws: VolterraWorkspace, v) -> RbfField:
    coeffs = ws.to_coeffs(v).reshape(ws.grid.n_nodes, -1)
    return RbfField(ws.grid, coeffs, ws.carrier(float(ws.grid.taus[-1])), v.reshape(coeffs.shape))


def _workspace_for(grid, ctx, option_specs):
    specs = list(option_specs)
    strikes = [s.strike for s in specs] + [1.0]
    kinds = [s.kind for s in specs] + ["call"]
    active = [True] * len(specs) + [False]
    return specs, assemble(grid, ctx, strikes, kinds, active)


def price(grid: CollocationGrid, ctx: KernelContext, option_specs: Sequence[OptionSpec], state0: State,
          options: FixedPointOptions = FixedPointOptions()) -> np.ndarray:
    """Certainty equivalents ``C`` at ``state0``, one per claim, at maturity ``grid.taus[-1]``."""
    return np.array([r.certainty_equivalent
                     for r in price_indifference(grid, ctx, option_specs, state0, options)])


def price_indifference(grid: CollocationGrid, ctx: KernelContext, option_specs: Sequence[OptionSpec],
                       state0: State, options: FixedPointOptions = FixedPointOptions(),
                       return_workspace: bool = False):
    """Indifference prices ``pi = C - C0`` through the shared pricing front end.

    Every claim and the no-claim surface share ``A`` and ``B`` and are marched as
    columns of one multi-right-hand-side solve.
    """
    specs, ws = _workspace_for(grid, ctx, option_specs)
    if not specs:
        return ([], ws) if return_workspace else []
    v = march(ws, options=options)
    out = results_from_field(_field(ws, v), specs, state0, ctx.params)
    return (out, ws) if return_workspace else out
