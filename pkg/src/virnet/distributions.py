"""Gaussian and inverse-Gamma posteriors, their priors, and closed-form KLs.

The analytic KL routines operate on :class:`~virnet.tensor.Tensor` values
and are differentiable. The Monte Carlo estimators at the bottom of the
module work on plain numpy arrays and exist only to cross-check them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import specfun
from . import tensor as T
from .errors import DomainError, ShapeError
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianPosterior:
    mu: Tensor
    m2: Tensor

    def __post_init__(self):
        self.mu, self.m2 = T._lift(self.mu), T._lift(self.m2)
        if self.mu.shape != self.m2.shape:
            raise ShapeError(f"mu {self.mu.shape} and m2 {self.m2.shape} differ")
        if np.any(self.m2.data <= 0):
            raise DomainError("Gaussian posterior variance must be positive")


@dataclass
class InvGammaPosterior:
    alpha: Tensor
    beta: Tensor

    def __post_init__(self):
        self.alpha, self.beta = T._lift(self.alpha), T._lift(self.beta)
        if self.alpha.shape != self.beta.shape:
            raise ShapeError(f"alpha {self.alpha.shape} and beta {self.beta.shape} differ")
        if np.any(self.alpha.data <= 1) or np.any(self.beta.data <= 0):
            raise DomainError("inverse-Gamma posterior needs alpha > 1 and beta > 0")


@dataclass
class ZPrior:
    x: np.ndarray
    eps0_sq: float

    def __post_init__(self):
        self.x = np.asarray(self.x.data if isinstance(self.x, Tensor) else self.x, dtype=np.float64)
        if not self.eps0_sq > 0:
            raise DomainError(f"eps0_sq must be positive, got {self.eps0_sq}")


@dataclass
class SigmaPrior:
    alpha0: float
    beta0: np.ndarray

    def __post_init__(self):
        self.beta0 = np.asarray(self.beta0, dtype=np.float64)
        if not self.alpha0 > 0 or np.any(self.beta0 <= 0):
            raise DomainError("sigma prior needs alpha0 > 0 and beta0 > 0")

    @classmethod
    def from_xi(cls, xi: np.ndarray, p: int) -> "SigmaPrior":
        """Prior whose mode is exactly ``xi`` for a ``p x p`` window."""
        return cls(alpha0=p * p / 2.0 - 1.0, beta0=(p * p / 2.0) * np.asarray(xi, dtype=np.float64))


def kl_gaussian(q: GaussianPosterior, prior: ZPrior) -> Tensor:
    """Summed KL( N(mu, m2) || N(x, eps0_sq) ) over all pixels."""
    if q.mu.shape != prior.x.shape:
        raise ShapeError(f"posterior {q.mu.shape} vs prior {prior.x.shape}")
    e2 = prior.eps0_sq
    ratio = q.m2 * (1.0 / e2)
    quad = T.square(q.mu - prior.x) * (0.5 / e2)
    return T.sum(quad + 0.5 * (ratio - T.log(ratio) - 1.0))


def kl_inverse_gamma(q: InvGammaPosterior, prior: SigmaPrior) -> Tensor:
    """Summed KL( IG(alpha, beta) || IG(alpha0, beta0) ) over all pixels."""
    if q.alpha.shape != np.broadcast_shapes(q.alpha.shape, prior.beta0.shape):
        raise ShapeError(f"posterior {q.alpha.shape} vs prior {prior.beta0.shape}")
    a0, b0 = prior.alpha0, prior.beta0
    alpha, beta = q.alpha, q.beta
    term = (specfun.lgamma(a0) - T.lgamma(alpha)
            + alpha * (b0 / beta - 1.0)
            + (alpha - a0) * T.digamma(alpha)
            + a0 * (T.log(beta) - np.log(b0)))
    return T.sum(term)


def reparameterize(q: GaussianPosterior, noise) -> Tensor:
    """Differentiable draw ``mu + sqrt(m2) * noise``."""
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=np.float64)
    if noise.shape != q.mu.shape:
        raise ShapeError(f"noise {noise.shape} vs mu {q.mu.shape}")
    return q.mu + T.sqrt(q.m2) * noise


def sigma_mode(q: InvGammaPosterior) -> np.ndarray:
    """Per-pixel mode of the inverse-Gamma posterior, ``beta / (alpha + 1)``."""
    return q.beta.data / (q.alpha.data + 1.0)


# --------------------------------------------------------------- sampling


def sample_gamma(shape_param, count: int, rng: np.random.Generator) -> np.ndarray:
    """Marsaglia-Tsang draws from Gamma(shape, 1); ``shape_param`` is scalar."""
    a = float(shape_param)
    if not a > 0:
        raise DomainError(f"gamma shape must be positive, got {a}")
    boost = a < 1.0
    d = (a + 1.0 if boost else a) - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(count)
    filled = 0
    while filled < count:
        need = count - filled
        m = int(need * 1.1) + 16
        x = rng.standard_normal(m)
        v = (1.0 + c * x) ** 3
        u = rng.random(m)
        ok = v > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            accept = ok & (np.log(u) < 0.5 * x * x + d - d * v + d * np.log(np.where(ok, v, 1.0)))
        draws = (d * v)[accept][:need]
        out[filled:filled + draws.size] = draws
        filled += draws.size
    if boost:
        out *= rng.random(count) ** (1.0 / a)
    return out


def sample_inverse_gamma(alpha, beta, count: int, rng: np.random.Generator) -> np.ndarray:
    if not (alpha > 0 and beta > 0):
        raise DomainError("inverse-Gamma sampling needs alpha > 0 and beta > 0")
    return beta / sample_gamma(alpha, count, rng)


def log_normal_pdf(x, mean, var):
    return -0.5 * LOG_2PI - 0.5 * np.log(var) - 0.5 * (x - mean) ** 2 / var


def log_inverse_gamma_pdf(s, alpha, beta):
    return alpha * np.log(beta) - specfun.lgamma(alpha) - (alpha + 1.0) * np.log(s) - beta / s


def kl_mc_gaussian(mu, m2, x, eps0_sq, count: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo KL for one pixel. Returns (estimate, standard error)."""
    z = mu + math.sqrt(m2) * rng.standard_normal(count)
    f = log_normal_pdf(z, mu, m2) - log_normal_pdf(z, x, eps0_sq)
    return float(f.mean()), float(f.std(ddof=1) / math.sqrt(count))


def kl_mc_invgamma(alpha, beta, alpha0, beta0, count: int, rng: np.random.Generator) -> tuple[float, float]:
    s = sample_inverse_gamma(alpha, beta, count, rng)
    f = log_inverse_gamma_pdf(s, alpha, beta) - log_inverse_gamma_pdf(s, alpha0, beta0)
    return float(f.mean()), float(f.std(ddof=1) / math.sqrt(count))
