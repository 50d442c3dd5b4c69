"""Evidence lower bound, training loss and the small-eps0 MSE probe."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .degradation import DegradationSpec
from .distributions import (LOG_2PI, GaussianPosterior, InvGammaPosterior, SigmaPrior, ZPrior,
                            kl_gaussian, kl_inverse_gamma, reparameterize)
from .errors import ContractError, ShapeError
from .networks import NetworkConfig, Params, rnet_forward, snet_forward
from .priors import HyperParams, compute_xi
from .tensor import Tensor


@dataclass
class Batch:
    """A stack of training triples ``(y, x, H)`` plus their precomputed priors.

    Arrays are ``[n, c, h, w]``; ``kernels`` is ``[n, k, k]`` or None for the
    identity operator; ``beta0`` is the per-pixel prior rate at the
    resolution of ``y``.
    """

    y: np.ndarray
    x: np.ndarray
    beta0: np.ndarray
    alpha0: float
    kernels: np.ndarray | None = None
    scale: int = 1
    code: np.ndarray | None = None

    def __len__(self):
        return self.y.shape[0]

    @property
    def is_identity(self) -> bool:
        return self.kernels is None and self.scale == 1

    @property
    def pixels(self) -> int:
        return int(np.prod(self.y.shape[1:]))


@dataclass
class ElboTerms:
    """ELBO components (sums over pixels, averaged over the batch)."""

    likelihood: Tensor
    kl_z: Tensor
    kl_sigma: Tensor

    @property
    def total(self) -> Tensor:
        return self.likelihood - self.kl_z - self.kl_sigma

    def floats(self) -> dict[str, float]:
        lik, kz, ks = self.likelihood.item(), self.kl_z.item(), self.kl_sigma.item()
        return {"likelihood": lik, "kl_z": kz, "kl_sigma": ks, "total": lik - kz - ks}


def _noise_log_norm(q_s: InvGammaPosterior) -> Tensor:
    # E_q[log N(y | ., sigma^2)] without the quadratic part
    return -0.5 * LOG_2PI - 0.5 * (T.log(q_s.beta) - T.digamma(q_s.alpha))


def likelihood_identity(y, q_z: GaussianPosterior, q_s: InvGammaPosterior) -> Tensor:
    """Closed-form expected log-likelihood when H is the identity."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if y.shape != q_z.mu.shape or y.shape != q_s.alpha.shape:
        raise ShapeError(f"y {y.shape}, mu {q_z.mu.shape}, alpha {q_s.alpha.shape} must agree")
    weight = q_s.alpha / q_s.beta
    quad = (T.square(q_z.mu - y) + q_z.m2) * weight * 0.5
    return T.sum(_noise_log_norm(q_s) - quad)


def apply_operator(z: Tensor, kernels: np.ndarray | None, scale: int) -> Tensor:
    """Differentiable ``(z (*) k) downsampled`` for a batch ``[n,c,H,W]``."""
    if kernels is None:
        if scale == 1:
            return z
        return T.kernel_conv(z, np.ones((z.shape[0], 1, 1)), stride=scale)
    r = kernels.shape[-1] // 2
    return T.kernel_conv(T.pad_reflect(z, r), kernels, stride=scale)


def likelihood_general(y, z_tilde: Tensor, kernels: np.ndarray | None, scale: int,
                       q_s: InvGammaPosterior) -> Tensor:
    """Expected log-likelihood estimated at one reparameterised draw ``z_tilde``."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if z_tilde.ndim != 4:
        raise ShapeError(f"likelihood_general expects a batched [n,c,h,w] sample, got {z_tilde.shape}")
    hz = apply_operator(z_tilde, kernels, scale)
    if hz.shape != y.shape or y.shape != q_s.alpha.shape:
        raise ShapeError(f"H z has shape {hz.shape} but y has {y.shape}")
    quad = T.square(hz - y) * (q_s.alpha / q_s.beta) * 0.5
    return T.sum(_noise_log_norm(q_s) - quad)


def reweighted_fidelity(y, hz, q_s: InvGammaPosterior) -> float:
    """``sum_i (alpha_i / beta_i) (y_i - (Hz)_i)^2 / 2``."""
    w = q_s.alpha.data / q_s.beta.data
    return float(0.5 * np.sum(w * (np.asarray(y) - np.asarray(hz)) ** 2))


def elbo_batch(batch: Batch, q_z: GaussianPosterior, q_s: InvGammaPosterior, eps0_sq: float,
               rng: np.random.Generator | None = None, mc_samples: int = 1,
               analytic_identity: bool = True) -> ElboTerms:
    n = len(batch)
    if batch.is_identity and analytic_identity:
        lik = likelihood_identity(batch.y, q_z, q_s)
    else:
        if rng is None:
            raise ContractError("a random generator is needed for the Monte Carlo likelihood")
        lik = None
        for _ in range(mc_samples):
            z_tilde = reparameterize(q_z, rng.standard_normal(q_z.mu.shape))
            term = likelihood_general(batch.y, z_tilde, batch.kernels, batch.scale, q_s)
            lik = term if lik is None else lik + term
        if mc_samples > 1:
            lik = lik * (1.0 / mc_samples)
    kz = kl_gaussian(q_z, ZPrior(batch.x, eps0_sq))
    ks = kl_inverse_gamma(q_s, SigmaPrior(batch.alpha0, batch.beta0))
    inv_n = 1.0 / n
    return ElboTerms(lik * inv_n, kz * inv_n, ks * inv_n)


def elbo(y, x, spec: DegradationSpec, hp: HyperParams, q_z: GaussianPosterior,
         q_s: InvGammaPosterior, rng: np.random.Generator | None = None, mc_samples: int = 1) -> ElboTerms:
    """ELBO of a single ``(y, x, H)`` triple; ``y`` and ``x`` are ``[h,w]`` or ``[c,h,w]``."""
    from .degradation import apply_degradation, make_kernel

    y4 = _to4(y)
    x4 = _to4(x)
    hx = apply_degradation(x4, spec)
    prior = compute_xi(y4, hx, hp)
    kernels = make_kernel(spec.kernel)[None] if spec.kernel is not None else None
    batch = Batch(y=y4, x=x4, beta0=prior.beta0, alpha0=prior.alpha0, kernels=kernels, scale=spec.scale)
    q_z = GaussianPosterior(_reshape_like(q_z.mu, x4), _reshape_like(q_z.m2, x4))
    q_s = InvGammaPosterior(_reshape_like(q_s.alpha, y4), _reshape_like(q_s.beta, y4))
    return elbo_batch(batch, q_z, q_s, hp.eps0_sq, rng, mc_samples)


def _to4(a) -> np.ndarray:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    while a.ndim < 4:
        a = a[None]
    return a


def _reshape_like(t: Tensor, ref: np.ndarray) -> Tensor:
    t = T._lift(t)
    if t.shape == ref.shape:
        return t
    if t.data.size != ref.size:
        raise ShapeError(f"posterior map {t.shape} does not match image {ref.shape}")
    if t.requires_grad:
        raise ShapeError(f"posterior map {t.shape} must already have shape {ref.shape}")
    return Tensor(t.data.reshape(ref.shape))


def forward_posteriors(batch: Batch, params: Params, cfg: NetworkConfig):
    q_s = snet_forward(batch.y, params, cfg)
    q_z = rnet_forward(batch.y, params, cfg, batch.code)
    return q_z, q_s


def loss(batch: Batch, params: Params, cfg: NetworkConfig, hp: HyperParams,
         rng: np.random.Generator | None = None, mc_samples: int = 1) -> tuple[Tensor, ElboTerms]:
    """Negative ELBO per observed pixel, averaged over the batch."""
    if len(batch) == 0:
        raise ContractError("empty batch")
    q_z, q_s = forward_posteriors(batch, params, cfg)
    terms = elbo_batch(batch, q_z, q_s, hp.eps0_sq, rng, mc_samples)
    return -terms.total * (1.0 / batch.pixels), terms


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.ravel(), b.ravel()
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def mse_degeneracy_check(batch: Batch, params: Params, cfg: NetworkConfig, hp: HyperParams,
                         rng: np.random.Generator | None = None) -> float:
    """Cosine similarity of d(-ELBO)/d(mu) and d(MSE)/d(mu) at the network's current mu."""
    if hp.eps0_sq > 1e-10:
        raise ContractError(f"the MSE limit needs eps0_sq <= 1e-10, got {hp.eps0_sq}")
    return _mu_gradient_cosine(batch, params, cfg, hp.eps0_sq, rng)


def _mu_gradient_cosine(batch, params, cfg, eps0_sq, rng=None) -> float:
    with T.no_grad():
        q_z, q_s = forward_posteriors(batch, params, cfg)
    mu = Tensor(q_z.mu.data, requires_grad=True)
    terms = elbo_batch(batch, GaussianPosterior(mu, q_z.m2.data), q_s, eps0_sq,
                       rng or np.random.default_rng(0))
    T.backward(-terms.total)
    return _cosine(mu.grad, 2.0 * (mu.data - batch.x))


def mu_gradient_cosine(batch: Batch, params: Params, cfg: NetworkConfig, eps0_sq: float,
                       rng: np.random.Generator | None = None) -> float:
    """Same probe as :func:`mse_degeneracy_check` for any eps0_sq."""
    return _mu_gradient_cosine(batch, params, cfg, eps0_sq, rng)
