"""Published parameter sets and reference tables.

The calibrated sets only list the fitted parameters. The remaining constants
(``r``, ``eta_bar``, ``eps_bar``, ``s_star``) are filled in here and can be
overridden through :meth:`ModelParams.replace`.
"""
from __future__ import annotations

import numpy as np

from .model import ModelParams, SigmoidTimeDependent, Trig

__all__ = [
    "CALL_SPOTS",
    "CALL_STRIKES",
    "CALL_MATURITY",
    "CALL_RATE",
    "CALL_DIVIDEND",
    "CALL_RES_TABLE",
    "STATS2_TABLE",
    "STATS_TABLE",
    "STATS_HORIZONS",
    "calib_params",
    "res_t0_425",
    "res_t0_041",
    "bs_limit_params",
    "by_name",
]

CALL_SPOTS = (950.0, 975.0, 985.0, 1000.0, 1015.0, 1025.0, 1050.0)
CALL_STRIKES = CALL_SPOTS
CALL_MATURITY = 0.25
CALL_RATE = 0.01
CALL_DIVIDEND = 0.005

# Published Marketron call prices; rows are spots, columns strikes.
CALL_RES_TABLE = np.array([
    [126.33, 116.61, 124.29, 94.77, 79.59, 92.10, 69.94],
    [122.18, 111.63, 125.96, 89.01, 73.40, 85.43, 62.46],
    [121.55, 110.68, 127.51, 87.77, 71.99, 83.81, 60.53],
    [121.66, 110.30, 130.71, 86.97, 70.96, 82.45, 58.74],
    [122.98, 111.14, 134.94, 87.41, 71.20, 82.32, 58.21],
    [124.51, 112.34, 138.31, 88.37, 72.02, 82.89, 58.52],
    [130.48, 117.52, 148.55, 92.96, 76.31, 86.52, 61.55],
])

STATS_HORIZONS = (0.0397, 0.0833, 0.25, 0.5, 1.0, 2.0, 2.8, 3.0)

# Annualized mean, volatility, skewness, excess kurtosis per horizon.
STATS_TABLE = np.array([
    [-0.1034, 0.6331, 0.0003, -0.0001],
    [-0.1085, 0.7734, 0.0012, 0.0004],
    [-0.1086, 0.8340, 0.0112, 0.0006],
    [-0.0981, 0.8022, 0.0546, -0.0082],
    [0.0855, 0.7423, 0.1688, -0.0074],
    [0.2038, 0.6400, 0.4535, 0.2740],
    [0.2028, 0.5932, 0.5852, 0.7774],
    [0.2005, 0.5895, 0.5482, 1.0588],
])

STATS2_TABLE = np.array([
    [-0.0136, 0.2781, -0.0006, -0.0004],
    [-0.0114, 0.3403, 0.0006, -0.0004],
    [0.0505, 0.3693, -0.0011, 0.0030],
    [0.2099, 0.3606, 0.0058, 0.0043],
    [0.3558, 0.3333, 0.0533, 0.0175],
    [0.3793, 0.2991, 0.1807, 0.0730],
    [0.3587, 0.2831, 0.2914, 0.1473],
    [0.3548, 0.2812, 0.3147, 0.1686],
])


def calib_params(sigma: float = 0.37, eps_bar: float = 0.2, r: float = CALL_RATE,
                 q: float = CALL_DIVIDEND, regularizer: str = "r2") -> ModelParams:
    """Equity-calibrated set used for the 7x7 call sweep, ``eta_bar = r - sigma^2/2``."""
    return ModelParams(
        sigma=sigma, sigma_y=0.38, sigma_theta=0.8334, k=1.2869, theta_hat=6.7865,
        mu=1.6671, y_bar=0.4731, c=3.9305, g=0.6831, eps_bar=eps_bar,
        eta_bar=r - 0.5 * sigma**2, gamma=0.2, r=r, q=q, s_star=1000.0, y0=0.1, theta0=0.5,
        signal=SigmoidTimeDependent(b1=1.6819, b2=-1.2102, k1x=-3.2002, k2x=2.7417, k3x=-1.8832,
                                    k1y=-0.7855, k2y=3.8901, k3y=1.5588),
        regularizer=regularizer,
    )


def _option_calibrated(values: dict, eps_bar: float, r: float, regularizer: str) -> ModelParams:
    sigma = values["sigma"]
    return ModelParams(
        sigma=sigma, sigma_y=values["sigma_y"], sigma_theta=values["sigma_theta"], k=values["k"],
        theta_hat=values["theta_hat"], mu=values["mu"], y_bar=values["y_bar"], c=values["c"],
        g=values["g"], eps_bar=eps_bar, eta_bar=r - 0.5 * sigma**2, gamma=values["gamma"], r=r,
        q=0.0, s_star=1000.0, y0=values["y0"], theta0=values["theta0"],
        signal=Trig(b1=values["b1"], b2=values["b2"]), regularizer=regularizer,
    )


def res_t0_425(eps_bar: float = 0.2, r: float = CALL_RATE, regularizer: str = "r1") -> ModelParams:
    """Option-calibrated set for the 0.425-year maturity (trigonometric signals)."""
    return _option_calibrated(dict(
        sigma=0.3934, sigma_y=1.008, sigma_theta=0.8912, k=2.7069, mu=4.6154, g=0.3173,
        theta_hat=6.9242, c=0.8897, b1=0.1220, b2=-0.0549, y_bar=1.6208, gamma=1.1031,
        y0=-0.0589, theta0=1.1007,
    ), eps_bar, r, regularizer)


def res_t0_041(eps_bar: float = 0.2, r: float = CALL_RATE, regularizer: str = "r1") -> ModelParams:
    """Option-calibrated set for the 0.041-year maturity (trigonometric signals)."""
    return _option_calibrated(dict(
        sigma=0.8950, sigma_y=0.1244, sigma_theta=0.2004, k=1.8831, mu=4.5869, g=0.3108,
        theta_hat=7.5284, c=1.1189, b1=0.2455, b2=1.1286, y_bar=1.1148, gamma=5.4118,
        y0=-0.2356, theta0=-0.2014,
    ), eps_bar, r, regularizer)


def bs_limit_params(sigma: float = 0.37, r: float = CALL_RATE, gamma: float = 0.2) -> ModelParams:
    """No coupling and no signals, ``eta_bar = r - sigma^2/2``: the Black-Scholes limit."""
    from .model import ErfSigmoid

    return ModelParams(
        sigma=sigma, sigma_y=0.38, sigma_theta=0.8334, k=1.2869, theta_hat=0.0, mu=1.6671,
        y_bar=0.4731, c=0.0, g=0.6831, eps_bar=0.2, eta_bar=r - 0.5 * sigma**2, gamma=gamma,
        r=r, q=0.0, s_star=1000.0, y0=0.1, theta0=0.5,
        signal=ErfSigmoid(b1=1.0, b2=1.0, a1=0.0, a2=0.0),
    )


_NAMED = {
    "calib": calib_params,
    "res_t0_425": res_t0_425,
    "res_t0_041": res_t0_041,
    "bs_limit": bs_limit_params,
}


def by_name(name: str) -> ModelParams:
    """Look up a preset by name (``calib``, ``res_t0_425``, ``res_t0_041``, ``bs_limit``)."""
    try:
        return _NAMED[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(_NAMED)}") from None
