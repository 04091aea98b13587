"""Gaussian RBF collocation on tensor-product grids.

Collocation nodes form a tensor product ``xs x ys x thetas``. With one shape
value per axis the 3D Gaussian factorizes, so the basis matrix is the Kronecker
product of three small 1D matrices and every fit reduces to 1D solves along
each axis. Flattening order is ``k`` (x) outer, ``l`` (theta) inner.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Optional

import numpy as np

from .model import ModelParams, State

__all__ = [
    "CollocationGrid",
    "RbfField",
    "SolverError",
    "SolveInfo",
    "default_shape",
    "spacing_shape",
    "build_grid",
    "axis_basis",
    "axis_basis_dz",
    "basis_matrix",
    "regularize_spd",
    "solve",
    "fit",
    "affine_split",
    "cardinal_weights",
    "evaluate",
    "evaluate_dx",
    "nodal_values",
    "dump_binary",
]

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Krylov solve failed to reach its tolerance."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class SolveInfo:
    iterations: int
    residuals: np.ndarray
    converged: bool


def spacing_shape(nodes) -> float:
    """``1 / (2 h^2)`` with ``h`` the mean nearest-neighbor spacing of ``nodes``."""
    nodes = np.sort(np.asarray(nodes, dtype=float))
    if nodes.size < 2:
        raise ValueError("need at least two nodes")
    gaps = np.diff(nodes)
    nn = np.minimum(np.r_[gaps, np.inf], np.r_[np.inf, gaps])
    h = float(np.mean(nn))
    return 1.0 / (2.0 * h * h)


def default_shape(nodes, cond_target: float = 1e5) -> float:
    """Shape whose 1D basis matrix on ``nodes`` has condition number ``cond_target``.

    Flatter Gaussians interpolate smooth fields (and constants) far more
    accurately near the ends of short axes; the target keeps the Krylov solves
    well inside double precision. Falls back to :func:`spacing_shape` when the
    target cannot be reached (very few nodes).
    """
    nodes = np.sort(np.asarray(nodes, dtype=float))
    base = spacing_shape(nodes)
    d2 = (nodes[:, None] - nodes[None, :]) ** 2

    def log_cond(eps):
        w = np.linalg.eigvalsh(np.exp(-eps * d2))
        return math.log10(max(w[-1], 1e-300) / max(w[0], 1e-300))

    lo, hi = base * 1e-4, base * 10.0
    target = math.log10(cond_target)
    if log_cond(hi) > target or log_cond(lo) < target:
        return base
    for _ in range(60):
        mid = math.sqrt(lo * hi)
        if log_cond(mid) > target:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


@dataclass(frozen=True)
class CollocationGrid:
    """Backward-time nodes and tensor-product collocation nodes.

    ``eps_rbf`` holds one RBF shape per axis ``(eps_x, eps_y, eps_theta)``.
    """

    taus: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    thetas: np.ndarray
    eps_rbf: tuple

    def __post_init__(self):
        for name in ("xs", "ys", "thetas"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.ndim != 1 or a.size < 2 or np.any(np.diff(a) <= 0):
                raise ValueError(f"{name} must be strictly increasing with at least two nodes")
            object.__setattr__(self, name, a)
        taus = np.asarray(self.taus, dtype=float)
        if taus.size < 2 or taus[0] != 0.0 or not np.allclose(np.diff(taus), taus[1] - taus[0], rtol=1e-10, atol=0):
            raise ValueError("taus must start at 0 and be uniformly spaced")
        object.__setattr__(self, "taus", taus)
        eps = np.broadcast_to(np.asarray(self.eps_rbf, dtype=float), (3,))
        if np.any(eps <= 0):
            raise ValueError("eps_rbf must be positive")
        object.__setattr__(self, "eps_rbf", tuple(float(e) for e in eps))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.xs.size, self.ys.size, self.thetas.size)

    @property
    def n_nodes(self) -> int:
        nx, ny, nt = self.shape
        return nx * ny * nt

    @property
    def dtau(self) -> float:
        return float(self.taus[1] - self.taus[0])

    @property
    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.xs, self.ys, self.thetas)

    def points(self) -> State:
        X, Y, T = np.meshgrid(self.xs, self.ys, self.thetas, indexing="ij")
        return State(X.ravel(), Y.ravel(), T.ravel())

    def with_taus(self, T: float, n_tau: int) -> "CollocationGrid":
        return CollocationGrid(np.linspace(0.0, T, n_tau + 1), self.xs, self.ys, self.thetas, self.eps_rbf)


def _interval(values, lo_clamp=-0.5, hi_clamp=0.5):
    vmin, vmax = float(np.min(values)), float(np.max(values))
    return min(0.7 * vmin, lo_clamp), max(1.3 * vmax, hi_clamp)


def build_grid(spots, params: ModelParams, n_x: int, n_y: int, n_theta: int, n_tau: int, T: float,
               eps_rbf=None, y_values=None, theta_values=None, shape_rule: str = "condition") -> CollocationGrid:
    """Collocation grid covering the requested spots and hidden-state values.

    Each axis spans ``[min(0.7 v_min, -0.5), max(1.3 v_max, 0.5)]`` uniformly,
    with ``x = log(S / S_*)``. Hidden-state values default to ``(y0, theta0)``.
    The RBF shape defaults to :func:`default_shape` per axis
    (``shape_rule="condition"``); ``shape_rule="spacing"`` uses
    :func:`spacing_shape` instead.
    """
    spots = np.asarray(spots, dtype=float).ravel()
    if spots.size == 0:
        raise ValueError("spots must be non-empty")
    if np.any(spots <= 0):
        raise ValueError("spots must be positive")
    if min(n_x, n_y, n_theta) < 2 or n_tau < 1:
        raise ValueError("need at least two nodes per axis and one time step")
    if not T > 0:
        raise ValueError("T must be positive")
    xv = np.log(spots / params.s_star)
    yv = np.atleast_1d(params.y0 if y_values is None else y_values)
    tv = np.atleast_1d(params.theta0 if theta_values is None else theta_values)
    xs = np.linspace(*_interval(xv), n_x)
    ys = np.linspace(*_interval(yv), n_y)
    thetas = np.linspace(*_interval(tv), n_theta)
    if eps_rbf is None:
        rule = {"condition": default_shape, "spacing": spacing_shape}[shape_rule]
        eps_rbf = (rule(xs), rule(ys), rule(thetas))
    return CollocationGrid(np.linspace(0.0, T, n_tau + 1), xs, ys, thetas, eps_rbf)


def axis_basis(z, nodes, eps: float) -> np.ndarray:
    """Matrix ``exp(-eps (z_p - node_q)^2)`` of shape ``(len(z), len(nodes))``."""
    d = np.asarray(z, dtype=float)[:, None] - np.asarray(nodes, dtype=float)[None, :]
    return np.exp(-eps * d * d)


def axis_basis_dz(z, nodes, eps: float) -> np.ndarray:
    """z-derivative of :func:`axis_basis`."""
    d = np.asarray(z, dtype=float)[:, None] - np.asarray(nodes, dtype=float)[None, :]
    return -2.0 * eps * d * np.exp(-eps * d * d)


def basis_matrix(grid: CollocationGrid) -> np.ndarray:
    """Full interpolation matrix over all collocation triples."""
    mats = [axis_basis(z, z, e) for z, e in zip(grid.axes, grid.eps_rbf)]
    return np.kron(np.kron(mats[0], mats[1]), mats[2])


def regularize_spd(matrix, delta: float = 1e-12) -> np.ndarray:
    """Nearest symmetric matrix with spectrum clipped to ``>= delta * lambda_max``."""
    A = np.asarray(matrix, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    S = 0.5 * (A + A.T)
    w, V = np.linalg.eigh(S)
    lam_max = max(float(w[-1]), 0.0)
    floor = delta * lam_max
    if w[0] >= floor and np.array_equal(S, A):
        return S
    w = np.maximum(w, floor)
    out = (V * w) @ V.T
    return 0.5 * (out + out.T)


def _minres_block(A, B, tol, max_iter):
    """MINRES on every column of ``B`` at once (Lanczos three-term recurrence)."""
    n, m = B.shape
    X = np.zeros((n, m))
    beta1 = np.linalg.norm(B, axis=0)
    active = beta1 > 0
    safe_beta1 = np.where(active, beta1, 1.0)
    r1 = np.zeros_like(B)
    r2 = B.copy()
    oldb = np.zeros(m)
    beta = beta1.copy()
    dbar = np.zeros(m)
    epsln = np.zeros(m)
    phibar = beta1.copy()
    cs = -np.ones(m)
    sn = np.zeros(m)
    w = np.zeros_like(B)
    w2 = np.zeros_like(B)
    tiny = np.finfo(float).eps
    itn = 0
    while itn < max_iter and np.any(active):
        itn += 1
        bsafe = np.where(beta > 0, beta, 1.0)
        v = r2 / bsafe
        y = A @ v
        if itn >= 2:
            y = y - (beta / np.where(oldb > 0, oldb, 1.0)) * r1
        alfa = np.einsum("ij,ij->j", v, y)
        y = y - (alfa / bsafe) * r2
        r1 = r2
        r2 = y
        oldb = beta
        beta = np.linalg.norm(r2, axis=0)
        oldeps = epsln
        delta = cs * dbar + sn * alfa
        gbar = sn * dbar - cs * alfa
        epsln = sn * beta
        dbar = -cs * beta
        gamma = np.maximum(np.hypot(gbar, beta), tiny)
        cs = gbar / gamma
        sn = beta / gamma
        phi = cs * phibar
        phibar = sn * phibar
        w1 = w2
        w2 = w
        w = (v - oldeps * w1 - delta * w2) / gamma
        step = phi * w
        X = X + np.where(active, step, 0.0)
        rel = phibar / safe_beta1
        active = active & (rel > tol) & (beta > tiny * safe_beta1)
    return X, itn


def solve(matrix, rhs_block, tol: float = 1e-10, max_iter: Optional[int] = None,
          return_info: bool = False, refinements: int = 3):
    """Solve a symmetric system for a block of right-hand sides with MINRES.

    Each column is an independent right-hand side. The Krylov recurrence keeps
    only three Lanczos vectors per column. A few rounds of iterative refinement
    on the true residual guard against loss of accuracy in the recurrence.

    Raises
    ------
    SolverError
        If the relative residual of any column exceeds ``tol`` after
        ``max_iter`` iterations (default ``10 n``) and all refinements.
    """
    A = np.asarray(matrix, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    B = np.asarray(rhs_block, dtype=float)
    vector = B.ndim == 1
    if vector:
        B = B[:, None]
    n = A.shape[0]
    max_iter = 10 * n if max_iter is None else int(max_iter)
    bnorm = np.linalg.norm(B, axis=0)
    safe = np.where(bnorm > 0, bnorm, 1.0)
    X, total = _minres_block(A, B, tol, max_iter)
    res = np.linalg.norm(B - A @ X, axis=0) / safe
    for _ in range(refinements):
        if np.all(res <= tol):
            break
        R = B - A @ X
        dX, its = _minres_block(A, R, tol * safe / np.maximum(np.linalg.norm(R, axis=0), 1e-300), max_iter)
        X = X + dX
        total += its
        res = np.linalg.norm(B - A @ X, axis=0) / safe
    res = np.where(bnorm > 0, res, 0.0)
    converged = bool(np.all(res <= tol))
    if not np.all(np.isfinite(X)):
        raise SolverError("breakdown: non-finite iterate", total, float(np.nanmax(res)))
    if not converged:
        raise SolverError(
            f"MINRES stagnated after {total} iterations, residual {np.max(res):.3e}", total, float(np.max(res))
        )
    out = X[:, 0] if vector else X
    if return_info:
        return out, SolveInfo(total, res, converged)
    return out


@dataclass
class RbfField:
    """Scalar field ``sum_kjl c_kjl phi_kjl`` plus an optional analytic part.

    ``coeffs`` has length ``n_nodes`` (or shape ``(n_nodes, m)`` for ``m``
    fields sharing one grid). ``carrier`` is an object exposing ``value(x)`` and
    ``dx(x)``, a function of ``x`` alone that is added to the RBF sum.
    ``values`` optionally holds the nodal values of the RBF part (same shape as
    ``coeffs``); when present, evaluation goes through per-axis cardinal
    weights instead of the coefficients. The 3D coefficients are the data times
    the Kronecker inverse (entries up to ~1e12 times the data for the default
    shapes), so summing them loses ~1e-4 relative accuracy to cancellation;
    the cardinal weights are O(1) and keep evaluation at round-off level.
    """

    grid: CollocationGrid
    coeffs: np.ndarray
    carrier: Any = None
    values: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape[0] != self.grid.n_nodes:
            raise ValueError("coefficient length does not match grid")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        self.coeffs = c
        if self.values is not None:
            v = np.asarray(self.values, dtype=float).reshape(c.shape)
            if not np.all(np.isfinite(v)):
                raise ValueError("values must be finite")
            self.values = v

    def tensor(self) -> np.ndarray:
        nx, ny, nt = self.grid.shape
        return self.coeffs.reshape((nx, ny, nt) + self.coeffs.shape[1:])

    def value_tensor(self) -> Optional[np.ndarray]:
        if self.values is None:
            return None
        nx, ny, nt = self.grid.shape
        return self.values.reshape((nx, ny, nt) + self.values.shape[1:])


def _carrier_values(carrier, fn, x, coeffs):
    """Carrier values at ``x`` shaped like ``x.shape + coeffs.shape[1:]``."""
    cv = np.asarray(getattr(carrier, fn)(x), dtype=float)
    return cv.reshape(np.shape(x) + coeffs.shape[1:])


@lru_cache(maxsize=64)
def _cached_inverse(key: bytes, n: int, eps: float) -> np.ndarray:
    z = np.frombuffer(key, dtype=float, count=n)
    theta = regularize_spd(axis_basis(z, z, eps))
    out = solve(theta, np.eye(z.size))
    out.setflags(write=False)
    return out


def _axis_inverse(z, eps):
    z = np.ascontiguousarray(z, dtype=float)
    return _cached_inverse(z.tobytes(), z.size, float(eps))


def affine_split(nodes):
    """Split nodal data into its least-squares line and the residual.

    Returns ``(basis, fit, residual)``: ``basis`` is ``[1, z]`` at the nodes,
    shape ``(n, 2)``, ``fit`` its pseudo-inverse and ``residual`` the projector
    ``I - basis @ fit``.
    """
    nodes = np.asarray(nodes, dtype=float)
    basis = np.stack([np.ones_like(nodes), nodes], axis=1)
    fit = np.linalg.pinv(basis)
    return basis, fit, np.eye(nodes.size) - basis @ fit


def cardinal_weights(z, nodes, eps: float, dz: bool = False) -> np.ndarray:
    """Weights ``W`` with ``u(z) = W @ u(nodes)`` for the 1D interpolant.

    The least-squares line through the data is carried exactly and the Gaussians
    interpolate the residual, so affine data are reproduced everywhere.
    ``dz=True`` gives the weights of the derivative. Shape ``(len(z), len(nodes))``.
    """
    z = np.asarray(z, dtype=float)
    _, fit, residual = affine_split(nodes)
    if dz:
        line = np.stack([np.zeros_like(z), np.ones_like(z)], axis=1)
        gauss = axis_basis_dz(z, nodes, eps)
    else:
        line = np.stack([np.ones_like(z), z], axis=1)
        gauss = axis_basis(z, nodes, eps)
    return gauss @ _axis_inverse(nodes, eps) @ residual + line @ fit


def fit(grid: CollocationGrid, values, carrier=None) -> RbfField:
    """Coefficients interpolating nodal ``values`` (minus the carrier, if any).

    ``values`` has shape ``(nx, ny, nt)`` or ``(nx, ny, nt, m)``, or the same
    flattened.
    """
    nx, ny, nt = grid.shape
    V = np.asarray(values, dtype=float)
    extra = V.shape[1:] if V.ndim in (1, 2) and V.shape[0] == grid.n_nodes else V.shape[3:]
    V = V.reshape((nx, ny, nt) + tuple(extra))
    if carrier is not None:
        cv = _carrier_values(carrier, "value", grid.xs, V.reshape((nx,) + V.shape[1:])[:, 0, 0])
        V = V - cv.reshape((nx, 1, 1) + cv.shape[1:])
    inv = [_axis_inverse(z, e) for z, e in zip(grid.axes, grid.eps_rbf)]
    C = np.einsum("ak,kjl...->ajl...", inv[0], V)
    C = np.einsum("bj,ajl...->abl...", inv[1], C)
    C = np.einsum("cl,abl...->abc...", inv[2], C)
    shape = (grid.n_nodes,) + tuple(extra)
    return RbfField(grid, C.reshape(shape), carrier, V.reshape(shape))


def _eval_parts(field: RbfField, points: State, dx: bool):
    g = field.grid
    x = np.atleast_1d(np.asarray(points.x, dtype=float))
    y = np.atleast_1d(np.asarray(points.y, dtype=float))
    t = np.atleast_1d(np.asarray(points.theta, dtype=float))
    x, y, t = np.broadcast_arrays(x, y, t)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.all(np.isfinite(t))):
        raise ValueError("points must be finite")
    V = field.value_tensor()
    if V is not None:
        bx = cardinal_weights(x.ravel(), g.xs, g.eps_rbf[0], dz=dx)
        by = cardinal_weights(y.ravel(), g.ys, g.eps_rbf[1])
        bt = cardinal_weights(t.ravel(), g.thetas, g.eps_rbf[2])
    else:
        V = field.tensor()
        bx = (axis_basis_dz if dx else axis_basis)(x.ravel(), g.xs, g.eps_rbf[0])
        by = axis_basis(y.ravel(), g.ys, g.eps_rbf[1])
        bt = axis_basis(t.ravel(), g.thetas, g.eps_rbf[2])
    out = np.einsum("pk,pj,pl,kjl...->p...", bx, by, bt, V)
    if field.carrier is not None:
        out = out + _carrier_values(field.carrier, "dx" if dx else "value", x.ravel(), field.coeffs)
    return out


def evaluate(field: RbfField, points: State) -> np.ndarray:
    """Field values at arbitrary points."""
    return _eval_parts(field, points, dx=False)


def evaluate_dx(field: RbfField, points: State) -> np.ndarray:
    """x-derivative of the field at arbitrary points."""
    return _eval_parts(field, points, dx=True)


def nodal_values(field: RbfField) -> np.ndarray:
    """Field values at the collocation nodes, shape ``(nx, ny, nt, ...)``."""
    g = field.grid
    V = field.value_tensor()
    if V is None:
        mats = [axis_basis(z, z, e) for z, e in zip(g.axes, g.eps_rbf)]
        V = np.einsum("ak,kjl...->ajl...", mats[0], field.tensor())
        V = np.einsum("bj,ajl...->abl...", mats[1], V)
        V = np.einsum("cl,abl...->abc...", mats[2], V)
    else:
        V = V.copy()
    if field.carrier is not None:
        cv = _carrier_values(field.carrier, "value", g.xs, field.coeffs)
        V = V + cv.reshape((g.xs.size, 1, 1) + cv.shape[1:])
    return V


def dump_binary(path, field: RbfField, theta: Optional[np.ndarray] = None) -> None:
    """Write ``{n_x, n_y, n_theta, eps}`` header then little-endian float64 data.

    The header holds three ``uint32`` counts and the three per-axis shapes.
    The coefficient vector follows, then ``theta`` when given.
    """
    nx, ny, nt = field.grid.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I3d", nx, ny, nt, *field.grid.eps_rbf))
        fh.write(np.ascontiguousarray(field.coeffs, dtype="<f8").tobytes())
        if theta is not None:
            fh.write(np.ascontiguousarray(theta, dtype="<f8").tobytes())
