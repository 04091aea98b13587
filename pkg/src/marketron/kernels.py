"""Closed-form Green's-function convolutions for the pricing equation.

Every kernel here is an integral of the form

    int  Phi(xi, eta, zeta) * RBF(xi, eta, zeta) * G(dt; field - source) d(source)

where ``G`` is the product of three 1D heat kernels with variances
``sigma^2 dt``, ``sigma_y^2 dt`` and ``sigma_theta^2 dt``. Along each axis the
product of a Gaussian RBF ``exp(-eps (xi - x_k)^2)`` and the heat kernel is a
scaled normal density,

    RBF * G = W * N(xi; m, v),   W = exp(-eps (x - x_k)^2 / a^2) / a,
    a^2 = 1 + 2 eps s^2 dt,      m = (x + 2 eps s^2 dt x_k) / a^2,   v = s^2 dt / a^2,

so each kernel reduces to products of weights ``W`` and Gaussian expectations of
exponentials, polynomials, ``erf`` and ``erf^2`` terms. All of these have exact
expressions (the ``erf^2`` expectation goes through Owen's T function). The
``dt -> 0`` limit is regular: ``v -> 0`` and every expectation collapses to a
point evaluation.

The RBF shape may be a scalar or one value per axis ``(eps_x, eps_y, eps_theta)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import special

from .model import (
    ErfSigmoid,
    ModelParams,
    State,
    UnsupportedConfiguration,
    regularizer_offset,
)

__all__ = [
    "KernelContext",
    "CollocationPoint",
    "GaussianAxis",
    "green3d",
    "terminal_convolution",
    "terminal_convolution_dx",
    "erf_gauss_integral",
    "a_factor",
    "omega_kjl",
    "linear_kernel",
    "source_kernel",
    "quadratic_kernel",
    "aux_integrals",
    "mean_vm",
    "mean_vm_prime",
    "mean_vm_prime_sq",
    "mean_erf_sigmoid",
    "mean_erf_sigmoid_sq",
]

_SQRT_PI = math.sqrt(math.pi)


@dataclass(frozen=True)
class KernelContext:
    """Time step, RBF shape and model constants shared by a set of kernels."""

    dt: float
    eps_rbf: Any
    params: ModelParams
    tau: float = 0.0

    def __post_init__(self):
        if self.dt < 0:
            raise ValueError("dt must be non-negative")
        if np.any(np.asarray(self.eps_rbf) <= 0):
            raise ValueError("eps_rbf must be positive")

    @property
    def eps3(self) -> tuple[float, float, float]:
        e = np.broadcast_to(np.asarray(self.eps_rbf, dtype=float), (3,))
        return float(e[0]), float(e[1]), float(e[2])


@dataclass(frozen=True)
class CollocationPoint:
    xk: Any
    yj: Any
    thetal: Any


class GaussianAxis:
    """Product of one RBF factor and one heat kernel along a single axis.

    Parameters
    ----------
    z : array_like
        Field coordinate.
    center : array_like
        RBF center. Ignored when ``eps == 0`` (no RBF factor).
    eps : float
        RBF shape along the axis.
    var : float
        Heat-kernel variance ``s^2 dt``.
    """

    def __init__(self, z, center, eps: float, var: float):
        z = np.asarray(z, dtype=float)
        center = np.asarray(center, dtype=float)
        a2 = 1.0 + 2.0 * eps * var
        self.a2 = a2
        self.weight = np.exp(-eps * (z - center) ** 2 / a2) / math.sqrt(a2)
        self.m = (z + 2.0 * eps * var * center) / a2
        self.v = var / a2

    # Expectations under N(m, v); multiply by ``weight`` to get the integral.
    def e_lin(self, c):
        return self.m - c

    def e_quad(self, c1, c2):
        return (self.m - c1) * (self.m - c2) + self.v

    def e_exp(self, lam):
        return np.exp(lam * self.m + 0.5 * lam * lam * self.v)

    def e_erf(self, p, q, lam=0.0):
        """``E[exp(lam xi) erf(p xi + q)]``."""
        mt = self.m + lam * self.v
        return self.e_exp(lam) * special.erf((p * mt + q) / np.sqrt(1.0 + 2.0 * p * p * self.v))

    def e_erf2(self, p, q, lam=0.0):
        """``E[exp(lam xi) erf(p xi + q)^2]`` via Owen's T function."""
        mt = self.m + lam * self.v
        s2 = p * p * self.v
        h = math.sqrt(2.0) * (p * mt + q) / np.sqrt(1.0 + 2.0 * s2)
        a = 1.0 / np.sqrt(1.0 + 4.0 * s2)
        return self.e_exp(lam) * (1.0 - 8.0 * special.owens_t(h, a))


def _pair_axis(z, c1, c2, eps: float, var: float) -> GaussianAxis:
    """Axis for the product of two RBFs of equal shape centered at c1, c2."""
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    ax = GaussianAxis(z, 0.5 * (c1 + c2), 2.0 * eps, var)
    ax.weight = ax.weight * np.exp(-0.5 * eps * (c1 - c2) ** 2)
    return ax


def a_factor(sigma, dt, eps_rbf):
    """``a(sigma) = sqrt(1 + 2 eps sigma^2 dt)`` with ``eps`` the RBF shape."""
    return np.sqrt(1.0 + 2.0 * np.asarray(eps_rbf) * np.asarray(sigma) ** 2 * np.asarray(dt))


def green3d(tau, field_point: State, source_point: State, params: ModelParams):
    """Product of three 1D heat kernels at backward time ``tau``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    out = 1.0
    for s, a, b in (
        (params.sigma, field_point.x, source_point.x),
        (params.sigma_y, field_point.y, source_point.y),
        (params.sigma_theta, field_point.theta, source_point.theta),
    ):
        var = s * s * tau
        d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        out = out * np.exp(-0.5 * d * d / var) / math.sqrt(2.0 * math.pi * var)
    return out


def _check_strike(strike):
    strike = np.asarray(strike, dtype=float)
    if np.any(strike <= 0):
        raise ValueError("strike must be positive")
    return strike


def terminal_convolution(tau, x, strike, kind: str, params: ModelParams):
    """Heat-kernel convolution of the call or put payoff in ``x = log(S/S_*)``."""
    strike = _check_strike(strike)
    x = np.asarray(x, dtype=float)
    s_star = params.s_star
    if kind not in ("call", "put"):
        raise ValueError("kind must be 'call' or 'put'")
    if tau <= 0:
        spot = s_star * np.exp(x)
        return np.maximum(spot - strike, 0.0) if kind == "call" else np.maximum(strike - spot, 0.0)
    sd = params.sigma * math.sqrt(tau)
    d = (x + np.log(s_star / strike)) / sd
    fwd = s_star * np.exp(x + 0.5 * sd * sd)
    if kind == "call":
        return fwd * special.ndtr(d + sd) - strike * special.ndtr(d)
    return strike * special.ndtr(-d) - fwd * special.ndtr(-d - sd)


def terminal_convolution_dx(tau, x, strike, kind: str, params: ModelParams):
    """x-derivative of :func:`terminal_convolution`."""
    strike = _check_strike(strike)
    x = np.asarray(x, dtype=float)
    s_star = params.s_star
    if tau <= 0:
        spot = s_star * np.exp(x)
        lk = np.log(strike / s_star)
        if kind == "call":
            return np.where(x > lk, spot, 0.0)
        return np.where(x < lk, -spot, 0.0)
    sd = params.sigma * math.sqrt(tau)
    d = (x + np.log(s_star / strike)) / sd
    fwd = s_star * np.exp(x + 0.5 * sd * sd)
    if kind == "call":
        return fwd * special.ndtr(d + sd)
    return -fwd * special.ndtr(-d - sd)


def erf_gauss_integral(alpha, beta, b):
    """``int erf(xi + b) exp(-(alpha xi + beta)^2) dxi`` over the real line."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise ValueError("alpha must be positive")
    return _SQRT_PI / alpha * special.erf((alpha * b - beta) / np.sqrt(1.0 + alpha * alpha))


# Gaussian expectations of model functions -----------------------------------

def _require_r2(params: ModelParams):
    if params.regularizer != "r2":
        raise UnsupportedConfiguration("closed-form kernels require the erfc (r2) regularizer")


def _require_erf_signal(params: ModelParams) -> ErfSigmoid:
    if not isinstance(params.signal, ErfSigmoid):
        raise UnsupportedConfiguration("closed-form kernels require the ErfSigmoid signal")
    return params.signal


def mean_vm(ax: GaussianAxis, params: ModelParams):
    """``E[V_M(xi)]`` for the erfc regularizer."""
    _require_r2(params)
    b = regularizer_offset(params)
    e1 = ax.e_exp(-1.0)
    bracket = (
        special.erfc(b)
        + ax.e_erf(1.0, b, lam=-1.0)
        - e1
        + math.exp(b + 0.25) * (special.erf(b + 0.5) - ax.e_erf(1.0, b + 0.5))
    )
    return e1 - 1.0 + bracket / (2.0 * params.eps_bar)


def _vprime_coeffs(params: ModelParams):
    # 1 - R2(x) = alpha0 + alpha1 * erf(x + b)
    alpha1 = 1.0 / (2.0 * params.eps_bar)
    return 1.0 - alpha1, alpha1, regularizer_offset(params)


def mean_vm_prime(ax: GaussianAxis, params: ModelParams):
    """``E[V_M'(xi)]`` for the erfc regularizer."""
    _require_r2(params)
    a0, a1, b = _vprime_coeffs(params)
    return -(a0 * ax.e_exp(-1.0) + a1 * ax.e_erf(1.0, b, lam=-1.0))


def mean_vm_prime_sq(ax: GaussianAxis, params: ModelParams):
    """``E[V_M'(xi)^2]`` for the erfc regularizer."""
    _require_r2(params)
    a0, a1, b = _vprime_coeffs(params)
    return (
        a0 * a0 * ax.e_exp(-2.0)
        + 2.0 * a0 * a1 * ax.e_erf(1.0, b, lam=-2.0)
        + a1 * a1 * ax.e_erf2(1.0, b, lam=-2.0)
    )


def mean_erf_sigmoid(ax: GaussianAxis, amp: float, slope: float):
    """``E[(amp/2)(1 + erf(slope zeta / 2))]``."""
    return 0.5 * amp * (1.0 + ax.e_erf(0.5 * slope, 0.0))


def mean_erf_sigmoid_sq(ax: GaussianAxis, amp: float, slope: float):
    """``E[((amp/2)(1 + erf(slope zeta / 2)))^2]``."""
    p = 0.5 * slope
    return 0.25 * amp * amp * (1.0 + 2.0 * ax.e_erf(p, 0.0) + ax.e_erf2(p, 0.0))


# Kernel blocks ----------------------------------------------------------------

def _axes(field_point: State, c: CollocationPoint, ctx: KernelContext):
    p = ctx.params
    ex, ey, et = ctx.eps3
    return (
        GaussianAxis(field_point.x, c.xk, ex, p.sigma**2 * ctx.dt),
        GaussianAxis(field_point.y, c.yj, ey, p.sigma_y**2 * ctx.dt),
        GaussianAxis(field_point.theta, c.thetal, et, p.sigma_theta**2 * ctx.dt),
    )


def omega_kjl(field_point: State, c: CollocationPoint, ctx: KernelContext):
    """Heat-kernel convolution of the Gaussian RBF centered at ``c``."""
    ax, ay, at = _axes(field_point, c, ctx)
    return ax.weight * ay.weight * at.weight


def linear_kernel(field_point: State, c: CollocationPoint, ctx: KernelContext, parts: bool = False):
    """Convolution of the linear operator applied to the RBF centered at ``c``.

    The operator is ``eta_bar d_x + mu_y d_y + mu_theta d_theta - r``. With
    ``parts=True`` a dict with the terms ``A1, A21, A22, A23, A3`` is returned
    (each already multiplied by the common weight and sign), whose sum is the
    kernel.
    """
    p = ctx.params
    sig = _require_erf_signal(p)
    ex, ey, et = ctx.eps3
    ax, ay, at = _axes(field_point, c, ctx)
    omega = ax.weight * ay.weight * at.weight
    dy = ay.e_lin(c.yj)
    terms = {
        "A1": -(2.0 * ex * p.eta_bar * ax.e_lin(c.xk) + p.r) * omega,
        "A21": -2.0 * ey * mean_erf_sigmoid(at, sig.a2, sig.b2) * dy * omega,
        "A22": -2.0 * ey * p.mu * (-ay.e_quad(p.y_bar, c.yj)) * omega,
        "A23": 2.0 * ey * p.c * mean_vm(ax, p) * dy * omega,
        "A3": -2.0 * et * p.k * (-at.e_quad(p.theta_hat, c.thetal)) * omega,
    }
    if parts:
        return terms
    return terms["A1"] + terms["A21"] + terms["A22"] + terms["A23"] + terms["A3"]


def source_kernel(field_point: State, ctx: KernelContext):
    """Convolution of the source ``-mubar_x^2 / (2 gamma sigma^2)``.

    ``mubar_x = f(theta) + eta_bar + sigma^2/2 - r - c y V_M'(x)``.
    """
    p = ctx.params
    sig = _require_erf_signal(p)
    ax = GaussianAxis(field_point.x, 0.0, 0.0, p.sigma**2 * ctx.dt)
    ay = GaussianAxis(field_point.y, 0.0, 0.0, p.sigma_y**2 * ctx.dt)
    at = GaussianAxis(field_point.theta, 0.0, 0.0, p.sigma_theta**2 * ctx.dt)
    e0 = p.eta_bar + 0.5 * p.sigma**2 - p.r
    ef = mean_erf_sigmoid(at, sig.a1, sig.b1)
    ef2 = mean_erf_sigmoid_sq(at, sig.a1, sig.b1)
    ey1 = ay.m
    ey2 = ay.m**2 + ay.v
    total = (
        ef2 + 2.0 * e0 * ef + e0 * e0
        - 2.0 * p.c * ey1 * (ef + e0) * mean_vm_prime(ax, p)
        + p.c * p.c * ey2 * mean_vm_prime_sq(ax, p)
    )
    return -total / (2.0 * p.gamma * p.sigma**2)


def quadratic_kernel(field_point: State, c1: CollocationPoint, c2: CollocationPoint, ctx: KernelContext):
    """Convolution of ``(gamma/2)(sigma_y^2 d_y phi1 d_y phi2 + sigma_theta^2 d_theta phi1 d_theta phi2)``."""
    p = ctx.params
    ex, ey, et = ctx.eps3
    ax = _pair_axis(field_point.x, c1.xk, c2.xk, ex, p.sigma**2 * ctx.dt)
    ay = _pair_axis(field_point.y, c1.yj, c2.yj, ey, p.sigma_y**2 * ctx.dt)
    at = _pair_axis(field_point.theta, c1.thetal, c2.thetal, et, p.sigma_theta**2 * ctx.dt)
    iy = 4.0 * ey * ey * ay.e_quad(c1.yj, c2.yj)
    it = 4.0 * et * et * at.e_quad(c1.thetal, c2.thetal)
    w = ax.weight * ay.weight * at.weight
    return 0.5 * p.gamma * (p.sigma_y**2 * iy + p.sigma_theta**2 * it) * w


def aux_integrals(kind: str, args, ctx: KernelContext):
    """One-dimensional auxiliary integrals against ``RBF * G``.

    Parameters
    ----------
    kind : {"If1", "If2", "Iv1", "Iv2"}
        ``If1 = int f(zeta) phi G``, ``If2 = int f(zeta)^2 phi G`` along theta;
        ``Iv1 = int V_M'(xi) phi G``, ``Iv2 = int V_M'(xi)^2 phi G`` along x.
    args : tuple
        ``(z, center)``: field coordinate and RBF center on the relevant axis.
    """
    p = ctx.params
    z, center = args
    ex, _, et = ctx.eps3
    if kind in ("If1", "If2"):
        sig = _require_erf_signal(p)
        ax = GaussianAxis(z, center, et, p.sigma_theta**2 * ctx.dt)
        fn = mean_erf_sigmoid if kind == "If1" else mean_erf_sigmoid_sq
        return ax.weight * fn(ax, sig.a1, sig.b1)
    if kind in ("Iv1", "Iv2"):
        ax = GaussianAxis(z, center, ex, p.sigma**2 * ctx.dt)
        fn = mean_vm_prime if kind == "Iv1" else mean_vm_prime_sq
        return ax.weight * fn(ax, p)
    raise ValueError(f"unknown auxiliary integral {kind!r}")
