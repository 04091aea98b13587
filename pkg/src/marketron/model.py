"""Marketron model parameters, potential, signals, drifts and market price of risk.

The state is ``(x, y, theta)`` where ``x = log(S / S_*)`` is the log-price,
``y`` the memory variable and ``theta`` the signal. The dynamics are

    dx     = mu_x dt + sigma dW_x,      mu_x     = f(theta) + eta_bar - c y V_M'(x)
    dy     = mu_y dt + sigma_y dW_y,    mu_y     = h(theta) + mu (y_bar - y) - c V_M(x)
    dtheta = mu_theta dt + sigma_theta dW_theta,  mu_theta = k (theta_hat - theta)

All functions here are pure and accept numpy arrays (broadcasting applies).
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np
from scipy import special

__all__ = [
    "SigmoidTimeDependent",
    "Trig",
    "ErfSigmoid",
    "SignalModel",
    "ModelParams",
    "State",
    "regularizer_offset",
    "regularizer_r2",
    "v_m",
    "v_m_prime",
    "signal_f",
    "signal_h",
    "drifts",
    "market_price_of_risk_x",
    "excess_drift",
    "UnsupportedConfiguration",
]


class UnsupportedConfiguration(ValueError):
    """Raised when an operation needs a model variant that is not configured."""


@dataclass(frozen=True)
class SigmoidTimeDependent:
    """Sigmoid signals with periodic time-dependent amplitudes.

    ``f = a1(t) / (1 + exp(-b1 theta))`` with ``a1(t) = k1x cos(k2x + k3x t)`` and
    ``h = a2(t) / (1 + exp(-b2 theta))`` with ``a2(t) = k1y sin(k2y + k3y t)``.
    """

    b1: float
    b2: float
    k1x: float
    k2x: float
    k3x: float
    k1y: float
    k2y: float
    k3y: float
    kind: str = field(default="sigmoid_td", init=False)

    def a1(self, t):
        return self.k1x * np.cos(self.k2x + self.k3x * t)

    def a2(self, t):
        return self.k1y * np.sin(self.k2y + self.k3y * t)

    def f(self, theta, t):
        return self.a1(t) * special.expit(self.b1 * np.asarray(theta, dtype=float))

    def h(self, theta, t):
        return self.a2(t) * special.expit(self.b2 * np.asarray(theta, dtype=float))


@dataclass(frozen=True)
class Trig:
    """Trigonometric signals ``f = b1 cos(theta)``, ``h = b2 sin(theta)``."""

    b1: float
    b2: float
    kind: str = field(default="trig", init=False)

    def f(self, theta, t):
        return self.b1 * np.cos(theta)

    def h(self, theta, t):
        return self.b2 * np.sin(theta)


@dataclass(frozen=True)
class ErfSigmoid:
    """Error-function sigmoids with constant amplitudes.

    ``f = (a1/2)(1 + erf(b1 theta / 2))`` and ``h = (a2/2)(1 + erf(b2 theta / 2))``.
    This is the variant for which the pricing kernels exist in closed form.
    """

    b1: float
    b2: float
    a1: float
    a2: float
    kind: str = field(default="erf_sigmoid", init=False)

    def f(self, theta, t):
        return 0.5 * self.a1 * (1.0 + special.erf(0.5 * self.b1 * np.asarray(theta, dtype=float)))

    def h(self, theta, t):
        return 0.5 * self.a2 * (1.0 + special.erf(0.5 * self.b2 * np.asarray(theta, dtype=float)))


SignalModel = Union[SigmoidTimeDependent, Trig, ErfSigmoid]

_SIGNAL_KINDS = {
    "sigmoid_td": SigmoidTimeDependent,
    "trig": Trig,
    "erf_sigmoid": ErfSigmoid,
}


def _signal_from_dict(data: dict) -> SignalModel:
    if not isinstance(data, dict) or "kind" not in data:
        raise ValueError("signal must be an object with a 'kind' entry")
    kind = data["kind"]
    if kind not in _SIGNAL_KINDS:
        raise ValueError(f"unknown signal kind {kind!r}")
    cls = _SIGNAL_KINDS[kind]
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    extra = set(data) - names - {"kind"}
    missing = names - set(data)
    if extra:
        raise ValueError(f"unknown signal keys for {kind}: {sorted(extra)}")
    if missing:
        raise ValueError(f"missing signal keys for {kind}: {sorted(missing)}")
    values = {name: float(data[name]) for name in names}
    if not all(math.isfinite(v) for v in values.values()):
        raise ValueError("signal parameters must be finite")
    return cls(**values)


def _signal_to_dict(signal: SignalModel) -> dict:
    out = {"kind": signal.kind}
    for f in dataclasses.fields(signal):
        if f.init:
            out[f.name] = getattr(signal, f.name)
    return out


@dataclass(frozen=True)
class ModelParams:
    """All model, utility and market constants.

    ``regularizer`` selects the form of the regularizing factor inside the
    potential: ``"r1"`` is the rational form, ``"r2"`` the erfc form used by
    the pricing kernels.
    """

    sigma: float
    sigma_y: float
    sigma_theta: float
    k: float
    theta_hat: float
    mu: float
    y_bar: float
    c: float
    g: float
    eps_bar: float
    eta_bar: float
    gamma: float
    r: float
    q: float
    s_star: float
    y0: float
    theta0: float
    signal: SignalModel
    regularizer: str = "r2"

    def __post_init__(self):
        for name in ("sigma", "sigma_y", "sigma_theta", "gamma", "eps_bar", "s_star"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("mu", "k", "c"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ValueError(f"{f.name} must be finite")
        if self.regularizer not in ("r1", "r2"):
            raise ValueError("regularizer must be 'r1' or 'r2'")
        if self.g * self.eps_bar <= -1.0:
            raise ValueError("g * eps_bar must exceed -1")

    @property
    def kappa(self) -> float:
        return self.g * self.eps_bar

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = _signal_to_dict(v) if f.name == "signal" else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(data) - names
        if extra:
            raise ValueError(f"unknown parameter keys: {sorted(extra)}")
        required = names - {"regularizer"}
        missing = required - set(data)
        if missing:
            raise ValueError(f"missing parameter keys: {sorted(missing)}")
        kwargs: dict[str, Any] = {}
        for name in names & set(data):
            if name == "signal":
                kwargs[name] = _signal_from_dict(data[name])
            elif name == "regularizer":
                kwargs[name] = str(data[name])
            else:
                kwargs[name] = float(data[name])
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class State:
    """A point ``(x, y, theta)``; components may be arrays of equal shape."""

    x: Any
    y: Any
    theta: Any


def _check_finite(x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite argument")
    return x


def regularizer_offset(params: ModelParams) -> float:
    """Offset ``b`` of the erfc regularizer, matched to the rational form."""
    kappa = params.kappa
    return 4.0 - float(special.erfinv(1.0 - 2.0 / (1.0 + math.exp(4.0) * kappa)))


def regularizer_r2(x, params: ModelParams):
    """``R2(x) = erfc(x + b) / (2 eps_bar)``; tends to 1/eps_bar as x -> -inf."""
    x = _check_finite(x)
    return special.erfc(x + regularizer_offset(params)) / (2.0 * params.eps_bar)


def v_m(x, params: ModelParams):
    """Potential ``V_M(x)`` normalized so that ``V_M(0) = 0``."""
    x = _check_finite(x)
    eb = params.eps_bar
    if params.regularizer == "r1":
        kappa = params.kappa
        em = np.exp(-x)
        if kappa == 0.0:
            log_term = -(em - 1.0)
        else:
            log_term = (np.log1p(kappa * em) - math.log1p(kappa)) / kappa
        return ((eb - 1.0) * (em - 1.0) + log_term) / eb
    b = regularizer_offset(params)
    em = np.exp(-x)
    bracket = (
        special.erfc(b)
        + em * (special.erf(b + x) - 1.0)
        + math.exp(b + 0.25) * (special.erf(b + 0.5) - special.erf(b + x + 0.5))
    )
    return (em - 1.0) + bracket / (2.0 * eb)


def v_m_prime(x, params: ModelParams):
    """Derivative ``V_M'(x) = -exp(-x) (1 - R(x))``."""
    x = _check_finite(x)
    if params.regularizer == "r1":
        return -np.exp(-x) * (1.0 - params.g / (np.exp(x) + params.kappa))
    return -np.exp(-x) * (1.0 - regularizer_r2(x, params))


def signal_f(theta, t, params: ModelParams):
    return params.signal.f(theta, t)


def signal_h(theta, t, params: ModelParams):
    return params.signal.h(theta, t)


def drifts(state: State, t, params: ModelParams):
    """Return ``(mu_x, mu_y, mu_theta)`` at ``state`` and calendar time ``t``."""
    x = np.asarray(state.x, dtype=float)
    y = np.asarray(state.y, dtype=float)
    theta = np.asarray(state.theta, dtype=float)
    mu_x = signal_f(theta, t, params) + params.eta_bar - params.c * y * v_m_prime(x, params)
    mu_y = signal_h(theta, t, params) + params.mu * (params.y_bar - y) - params.c * v_m(x, params)
    mu_theta = params.k * (params.theta_hat - theta)
    return mu_x, mu_y, mu_theta


def market_price_of_risk_x(state: State, t, params: ModelParams):
    """Market price of risk of the traded asset, ``(mu_x - r) / sigma``."""
    mu_x = drifts(state, t, params)[0]
    return (mu_x - params.r) / params.sigma


def excess_drift(state: State, t, params: ModelParams):
    """``mu_x + sigma^2/2 - r``, the drift of the discounted price in log terms."""
    mu_x = drifts(state, t, params)[0]
    return mu_x + 0.5 * params.sigma**2 - params.r
