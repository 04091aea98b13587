from __future__ import annotations

import numpy as np
import pytest

from marketron.model import ErfSigmoid, ModelParams


def make_params(**changes) -> ModelParams:
    """Moderate ErfSigmoid/R2 parameter set used across module tests."""
    base = dict(
        sigma=0.37, sigma_y=0.38, sigma_theta=0.8334, k=1.2869, theta_hat=0.5, mu=1.6671,
        y_bar=0.4731, c=0.5, g=0.6831, eps_bar=0.2, eta_bar=0.01 - 0.5 * 0.37**2, gamma=0.2,
        r=0.01, q=0.0, s_star=1000.0, y0=0.1, theta0=0.5,
        signal=ErfSigmoid(b1=1.68, b2=-1.21, a1=0.3, a2=-0.4), regularizer="r2",
    )
    base.update(changes)
    return ModelParams(**base)


@pytest.fixture
def params() -> ModelParams:
    return make_params()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
