"""Log-gamma, digamma and trigamma for positive real arguments.

All three use the same scheme: push the argument upward with the
recurrence relation until an asymptotic expansion is accurate, then
evaluate the expansion. Log-gamma additionally switches to a Taylor
series around its zeros at 1 and 2 so that relative accuracy survives
there.

Every function accepts a scalar or an array and returns the same kind.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DomainError

__all__ = ["lgamma", "digamma", "trigamma", "SpecialValue", "lgamma_with_derivative"]

EULER_GAMMA = 0.57721566490153286061
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

_LGAMMA_SHIFT = 8.0
_DIGAMMA_SHIFT = 8.0
_TRIGAMMA_SHIFT = 6.0
_ROOT_SERIES_RADIUS = 0.5
_ROOT_SERIES_TERMS = 40


def _zeta_minus_one(k: int) -> float:
    exact = {
        2: math.pi**2 / 6.0,
        3: 1.2020569031595942854,
        4: math.pi**4 / 90.0,
        5: 1.0369277551433699263,
        6: math.pi**6 / 945.0,
        7: 1.0083492773819228268,
        8: math.pi**8 / 9450.0,
    }
    if k in exact:
        return exact[k] - 1.0
    # tail beyond n=60 is below 60**(1-k)/(k-1) < 1e-15 for k >= 9
    return math.fsum(n ** (-float(k)) for n in range(2, 61))


# coefficients c_k of lgamma(2 + e) = sum_k c_k e^k
_ROOT_COEFFS = np.array(
    [0.0, 1.0 - EULER_GAMMA]
    + [(-1.0) ** k * _zeta_minus_one(k) / k for k in range(2, _ROOT_SERIES_TERMS + 1)]
)


def _check_domain(x: np.ndarray, name: str) -> None:
    bad = ~(x > 0)
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0]) if x.ndim else ()
        raise DomainError(f"{name} requires x > 0; got {x[idx] if x.ndim else float(x)} at index {idx}")


def _as_array(x):
    arr = np.asarray(x, dtype=np.float64)
    return arr, np.ndim(x) == 0


def _horner(coeffs: np.ndarray, e: np.ndarray) -> np.ndarray:
    acc = np.zeros_like(e)
    for c in coeffs[::-1]:
        acc = acc * e + c
    return acc


def lgamma(x):
    """Natural log of the gamma function for x > 0."""
    x, scalar = _as_array(x)
    _check_domain(x, "lgamma")
    out = np.empty_like(x)

    near_two = np.abs(x - 2.0) < _ROOT_SERIES_RADIUS
    near_one = np.abs(x - 1.0) < _ROOT_SERIES_RADIUS
    if np.any(near_two):
        out[near_two] = _horner(_ROOT_COEFFS, x[near_two] - 2.0)
    if np.any(near_one):
        e = x[near_one] - 1.0
        out[near_one] = _horner(_ROOT_COEFFS, e) - np.log1p(e)

    rest = ~(near_one | near_two)
    if np.any(rest):
        z = x[rest].copy()
        log_prod = np.zeros_like(z)
        small = z < _LGAMMA_SHIFT
        while np.any(small):
            log_prod[small] += np.log(z[small])
            z[small] += 1.0
            small = z < _LGAMMA_SHIFT
        inv = 1.0 / z
        inv2 = inv * inv
        series = inv * (1.0 / 12 + inv2 * (-1.0 / 360 + inv2 * (1.0 / 1260 + inv2 * (-1.0 / 1680
                 + inv2 * (1.0 / 1188 + inv2 * (-691.0 / 360360 + inv2 * (1.0 / 156)))))))
        out[rest] = (z - 0.5) * np.log(z) - z + _HALF_LOG_2PI + series - log_prod
    return float(out) if scalar else out


def digamma(x):
    """Logarithmic derivative of the gamma function for x > 0."""
    x, scalar = _as_array(x)
    _check_domain(x, "digamma")
    z = x.copy()
    acc = np.zeros_like(z)
    small = z < _DIGAMMA_SHIFT
    while np.any(small):
        acc[small] -= 1.0 / z[small]
        z[small] += 1.0
        small = z < _DIGAMMA_SHIFT
    inv2 = 1.0 / (z * z)
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240
             - inv2 * (1.0 / 132 - inv2 * (691.0 / 32760 - inv2 * (1.0 / 12)))))))
    out = acc + np.log(z) - 0.5 / z - series
    return float(out) if scalar else out


def trigamma(x):
    """Derivative of the digamma function for x > 0."""
    x, scalar = _as_array(x)
    _check_domain(x, "trigamma")
    z = x.copy()
    acc = np.zeros_like(z)
    small = z < _TRIGAMMA_SHIFT
    while np.any(small):
        acc[small] += 1.0 / (z[small] * z[small])
        z[small] += 1.0
        small = z < _TRIGAMMA_SHIFT
    inv = 1.0 / z
    inv2 = inv * inv
    series = inv + 0.5 * inv2 + inv * inv2 * (1.0 / 6 - inv2 * (1.0 / 30 - inv2 * (1.0 / 42
             - inv2 * (1.0 / 30 - inv2 * (5.0 / 66 - inv2 * (691.0 / 2730 - inv2 * (7.0 / 6)))))))
    out = acc + series
    return float(out) if scalar else out


class SpecialValue:
    __slots__ = ("value", "derivative")

    def __init__(self, value: float, derivative: float):
        self.value = value
        self.derivative = derivative

    def __repr__(self):
        return f"SpecialValue(value={self.value!r}, derivative={self.derivative!r})"


def lgamma_with_derivative(x: float) -> SpecialValue:
    return SpecialValue(lgamma(x), digamma(x))


def digamma_with_derivative(x: float) -> SpecialValue:
    return SpecialValue(digamma(x), trigamma(x))
