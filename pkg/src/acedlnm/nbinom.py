"""Negative binomial log-likelihood with log link.

Functions accept plain arrays or :class:`~acedlnm.dual.Dual` values, except
:func:`nb_loglik_derivs`, which returns closed-form partial derivatives.
"""

import numpy as np

from . import dual as dl
from . import special


# coefficients B_2k / (2k (2k - 1)) of the Stirling series for log-gamma
_STIRLING = np.array([1 / 12, -1 / 360, 1 / 1260, -1 / 1680, 1 / 1188, -691 / 360360, 1 / 156])
_STIRLING_FROM = 10.0


def _stirling_tail(x):
    inv = 1.0 / x
    inv2 = inv * inv
    acc = _STIRLING[-1]
    for c in _STIRLING[-2::-1]:
        acc = acc * inv2 + c
    return acc * inv


def lgamma_ratio(y, theta):
    """log Gamma(y + theta) - log Gamma(theta) for scalar theta, y >= 0.

    For large theta the difference of two large log-gamma values loses all
    precision; the Stirling form below keeps the cancelling parts analytic.
    """
    y = np.asarray(y, dtype=float)
    if dl.value(theta) < _STIRLING_FROM:
        return dl.lgamma(y + theta) - dl.lgamma(theta)
    yt = y + theta
    return ((theta - 0.5) * dl.log1p(y / theta) + y * dl.log(yt) - y
            + _stirling_tail(yt) - _stirling_tail(theta))


def _loglik(y, eta, mu, theta):
    tm = theta + mu
    if dl.value(theta) < _STIRLING_FROM:
        return (y * (eta - dl.log(tm)) - theta * dl.log1p(mu / theta)
                + dl.lgamma(y + theta) - dl.lgamma(theta) - special.lgamma(y + 1.0))
    # large theta: group the terms so no two large quantities cancel
    return (y * eta + y * dl.log1p((y - mu) / tm) - theta * dl.log1p(mu / theta)
            + (theta - 0.5) * dl.log1p(y / theta) - y
            + _stirling_tail(y + theta) - _stirling_tail(theta) - special.lgamma(y + 1.0))


def nb_logpmf(y, mu, theta):
    """log P(Y = y) for mean ``mu`` and dispersion ``theta`` (Var = mu + mu^2/theta)."""
    y = np.asarray(y, dtype=float)
    return _loglik(y, dl.log(mu), mu, theta)


def eta_terms(y, eta, theta):
    """Log-likelihood and its first two derivatives in the linear predictor.

    Returns ``(loglik, d/deta, d2/deta2)`` per observation.
    """
    y = np.asarray(y, dtype=float)
    mu = dl.exp(eta)
    tm = theta + mu
    loglik = _loglik(y, eta, mu, theta)
    ratio = mu / tm
    d1 = y - (theta + y) * ratio
    d2 = -(theta + y) * theta * ratio / tm
    return loglik, d1, d2


def nb_loglik_derivs(y, mu, theta) -> dict:
    """Value and partial derivatives in ``mu`` and ``log(theta)``."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise ValueError("y must be a nonnegative integer")
    if np.any(mu <= 0) or np.any(theta <= 0):
        raise ValueError("mu and theta must be positive")
    tm = theta + mu
    value = nb_logpmf(y, mu, theta)
    d_mu = y / mu - (theta + y) / tm
    d2_mu = -y / mu ** 2 + (theta + y) / tm ** 2
    d_theta = -np.log1p(mu / theta) + (mu - y) / tm + special.digamma(theta + y) - special.digamma(theta)
    d2_theta = (1.0 / theta - 1.0 / tm - (mu - y) / tm ** 2
                + special.trigamma(theta + y) - special.trigamma(theta))
    d2_theta_mu = (y - mu) / tm ** 2
    return {
        "value": value,
        "d_mu": d_mu,
        "d2_mu": d2_mu,
        "d_logtheta": theta * d_theta,
        "d2_logtheta": theta ** 2 * d2_theta + theta * d_theta,
        "d2_logtheta_mu": theta * d2_theta_mu,
    }


def sample_nb(rng: np.random.Generator, mu, theta):
    """Draw counts through the gamma-Poisson mixture."""
    mu = np.asarray(mu, dtype=float)
    rate = rng.gamma(shape=theta, scale=mu / theta)
    return rng.poisson(rate)
