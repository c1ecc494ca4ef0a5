"""Log-gamma and polygamma functions on arrays.

Log-gamma uses the Lanczos series (g = 7, nine terms) with reflection for
small arguments. The polygamma functions shift the argument upward with the
recurrence relations until the asymptotic (Bernoulli) series is accurate.
"""

import numpy as np

_LANCZOS_G = 7.0
_LANCZOS_COEF = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

# B_2, B_4, ..., B_14
_BERNOULLI = np.array([1 / 6, -1 / 30, 1 / 42, -1 / 30, 5 / 66, -691 / 2730, 7 / 6])
_ASYMPTOTIC_FROM = 10.0


def _check_positive(x):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0) or np.any(np.isnan(x)):
        raise ValueError("argument must be positive")
    return x


def _lanczos(z):
    """log Gamma(z + 1) for z >= -0.5."""
    series = np.full_like(z, _LANCZOS_COEF[0])
    for k in range(1, len(_LANCZOS_COEF)):
        series = series + _LANCZOS_COEF[k] / (z + k)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(series)


def lgamma(x):
    x = _check_positive(x)
    out = np.empty_like(x)
    small = x < 0.5
    xs = x[small]
    # reflection: Gamma(x) Gamma(1 - x) = pi / sin(pi x)
    out[small] = np.log(np.pi / np.sin(np.pi * xs)) - _lanczos(-xs)
    out[~small] = _lanczos(x[~small] - 1.0)
    out[(x == 1.0) | (x == 2.0)] = 0.0
    return out if out.ndim else out[()]


def _shift_up(x, term):
    """Accumulate ``term(x + k)`` for k = 0.. while x + k < threshold; return shifted x."""
    x = np.array(x, dtype=float, copy=True)
    acc = np.zeros_like(x)
    active = x < _ASYMPTOTIC_FROM
    while np.any(active):
        acc[active] += term(x[active])
        x[active] += 1.0
        active = x < _ASYMPTOTIC_FROM
    return x, acc


def digamma(x):
    x = _check_positive(x)
    z, acc = _shift_up(x, lambda v: -1.0 / v)
    inv2 = 1.0 / (z * z)
    series = np.zeros_like(z)
    for k in range(len(_BERNOULLI), 0, -1):
        series = (series + _BERNOULLI[k - 1] / (2 * k)) * inv2
    out = np.log(z) - 0.5 / z - series + acc
    return out if out.ndim else out[()]


def trigamma(x):
    x = _check_positive(x)
    z, acc = _shift_up(x, lambda v: 1.0 / (v * v))
    inv2 = 1.0 / (z * z)
    series = np.zeros_like(z)
    for k in range(len(_BERNOULLI), 0, -1):
        series = (series + _BERNOULLI[k - 1]) * inv2
    out = (1.0 + 0.5 / z + series) / z + acc
    return out if out.ndim else out[()]


def tetragamma(x):
    x = _check_positive(x)
    z, acc = _shift_up(x, lambda v: -2.0 / (v * v * v))
    inv2 = 1.0 / (z * z)
    series = np.zeros_like(z)
    for k in range(len(_BERNOULLI), 0, -1):
        series = (series + (2 * k + 1) * _BERNOULLI[k - 1]) * inv2
    out = -(1.0 + 1.0 / z + series) / (z * z) + acc
    return out if out.ndim else out[()]
