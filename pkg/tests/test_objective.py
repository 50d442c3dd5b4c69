import math

import mpmath
import numpy as np
import pytest

from virnet import tensor as T
from virnet.degradation import DegradationSpec, NoiseFieldSpec
from virnet.distributions import (GaussianPosterior, InvGammaPosterior, log_normal_pdf, reparameterize,
                                  sample_inverse_gamma)
from virnet.errors import ContractError, ShapeError
from virnet.networks import init_params, rnet_params, snet_params
from virnet.objective import (Batch, elbo, elbo_batch, likelihood_general, likelihood_identity, loss,
                              mse_degeneracy_check, mu_gradient_cosine, reweighted_fidelity)
from virnet.oracles import relative_error
from virnet.priors import HyperParams, compute_xi
from virnet.specfun import digamma
from virnet.verify import _toy_batch


def _posteriors(rng, shape, m2=None):
    mu = rng.uniform(0, 1, shape)
    m2 = rng.uniform(1e-3, 1e-2, shape) if m2 is None else np.full(shape, m2)
    alpha = rng.uniform(2, 30, shape)
    beta = rng.uniform(0.05, 2, shape)
    return GaussianPosterior(mu, m2), InvGammaPosterior(alpha, beta)


def test_identity_likelihood_without_quadratic():
    rng = np.random.default_rng(0)
    q_z, q_s = _posteriors(rng, (1, 1, 4, 4), m2=1e-300)
    a, b = q_s.alpha.data, q_s.beta.data
    expected = np.sum(-0.5 * math.log(2 * math.pi) - 0.5 * (np.log(b) - digamma(a)))
    got = likelihood_identity(q_z.mu.data, q_z, q_s).item()
    assert got == pytest.approx(expected, rel=1e-13)


def test_single_pixel_against_mpmath():
    q_z = GaussianPosterior(np.array([0.3]), np.array([1.0]))
    q_s = InvGammaPosterior(np.array([23.5]), np.array([24.5]))
    got = likelihood_identity(np.array([0.3]), q_z, q_s).item()
    mpmath.mp.dps = 40
    a, b = mpmath.mpf("23.5"), mpmath.mpf("24.5")
    ref = -mpmath.log(2 * mpmath.pi) / 2 - (mpmath.log(b) - mpmath.digamma(a)) / 2 - a / (2 * b)
    assert abs(got - float(ref)) < 1e-13


def test_identity_likelihood_matches_monte_carlo():
    rng = np.random.default_rng(1)
    shape = (1, 1, 2, 3)
    q_z, q_s = _posteriors(rng, shape)
    q_z = GaussianPosterior(q_z.mu, np.full(shape, 0.02))
    y = q_z.mu.data + rng.normal(0, 0.1, shape)
    count = 1_000_000
    total = np.zeros(count)
    for i in np.ndindex(shape):
        z = q_z.mu.data[i] + math.sqrt(q_z.m2.data[i]) * rng.standard_normal(count)
        s = sample_inverse_gamma(q_s.alpha.data[i], q_s.beta.data[i], count, rng)
        total += log_normal_pdf(y[i], z, s)
    se = total.std(ddof=1) / math.sqrt(count)
    assert abs(likelihood_identity(y, q_z, q_s).item() - total.mean()) < 3 * se


def test_general_equals_identity_at_vanishing_variance():
    rng = np.random.default_rng(2)
    q_z, q_s = _posteriors(rng, (2, 1, 4, 4), m2=1e-300)
    y = rng.uniform(0, 1, (2, 1, 4, 4))
    z_tilde = reparameterize(q_z, np.zeros((2, 1, 4, 4)))
    a = likelihood_general(y, z_tilde, None, 1, q_s).item()
    b = likelihood_identity(y, q_z, q_s).item()
    assert a == b


def test_quadratic_term_is_reweighted_fidelity():
    rng = np.random.default_rng(3)
    _, q_s = _posteriors(rng, (1, 1, 4, 4))
    y = rng.uniform(0, 1, (1, 1, 4, 4))
    z = T.Tensor(rng.uniform(0, 1, (1, 1, 4, 4)))
    with_quad = likelihood_general(y, z, None, 1, q_s).item()
    without = likelihood_general(y, T.Tensor(y), None, 1, q_s).item()
    assert without - with_quad == pytest.approx(reweighted_fidelity(y, z.data, q_s), rel=1e-12)


def test_general_likelihood_resolution_mismatch():
    rng = np.random.default_rng(4)
    _, q_s = _posteriors(rng, (1, 1, 4, 4))
    k = np.full((1, 3, 3), 1 / 9)
    with pytest.raises(ShapeError):
        likelihood_general(np.zeros((1, 1, 4, 4)), T.Tensor(np.zeros((1, 1, 4, 4))), k, 2, q_s)
    with pytest.raises(ShapeError):
        likelihood_general(np.zeros((4, 4)), T.Tensor(np.zeros((4, 4))), None, 1, q_s)


def test_single_sample_estimates_are_unbiased():
    rng = np.random.default_rng(5)
    q_z, q_s = _posteriors(rng, (1, 1, 8, 8))
    q_z = GaussianPosterior(q_z.mu, np.full((1, 1, 8, 8), 0.05))
    y = rng.uniform(0, 1, (1, 1, 8, 8))
    k = np.full((1, 3, 3), 1 / 9)
    ys = np.zeros((1, 1, 4, 4)) + y[..., ::2, ::2]
    q_s_lr = InvGammaPosterior(q_s.alpha.data[..., ::2, ::2], q_s.beta.data[..., ::2, ::2])
    singles = np.array([likelihood_general(ys, reparameterize(q_z, rng.standard_normal((1, 1, 8, 8))),
                                           k, 2, q_s_lr).item() for _ in range(10_000)])
    half_a, half_b = singles[:5000].mean(), singles[5000:].mean()
    se = singles.std(ddof=1) / math.sqrt(5000)
    assert abs(half_a - half_b) < 3 * math.sqrt(2) * se
    batch = Batch(y=ys, x=q_z.mu.data, beta0=np.ones_like(ys), alpha0=2.0, kernels=k, scale=2)
    mean8 = np.mean([elbo_batch(batch, q_z, q_s_lr, 1e-2, rng, mc_samples=8).likelihood.item()
                     for _ in range(500)])
    se8 = singles.std(ddof=1) / math.sqrt(4000)
    assert abs(mean8 - singles.mean()) < 3 * math.hypot(se8, se / math.sqrt(2))


def test_matched_posteriors_have_zero_kl():
    rng = np.random.default_rng(6)
    hp = HyperParams(eps0_sq=1e-3, p=3)
    x = rng.uniform(0, 1, (12, 12))
    y = x + 0.05 * rng.standard_normal(x.shape)
    prior = compute_xi(y[None, None], x[None, None], hp)
    q_z = GaussianPosterior(x, np.full(x.shape, hp.eps0_sq))
    q_s = InvGammaPosterior(np.full(x.shape, prior.alpha0), prior.beta0[0, 0])
    spec = DegradationSpec("denoise", noise=NoiseFieldSpec("constant", {"value": 0.05}))
    terms = elbo(y, x, spec, hp, q_z, q_s).floats()
    assert abs(terms["kl_z"]) < 1e-12 and abs(terms["kl_sigma"]) < 1e-10
    assert terms["total"] == pytest.approx(terms["likelihood"], abs=1e-10)


def test_total_never_exceeds_likelihood():
    rng = np.random.default_rng(7)
    for _ in range(20):
        batch, cfg, hp = _toy_batch(rng, "denoise")
        params = init_params(cfg, rng)
        _, terms = loss(batch, params, cfg, hp)
        f = terms.floats()
        assert f["total"] <= f["likelihood"]
        assert f["total"] == f["likelihood"] - f["kl_z"] - f["kl_sigma"]


def test_single_sample_loss_is_negative_elbo():
    rng = np.random.default_rng(8)
    batch, cfg, hp = _toy_batch(rng, "denoise", n=1)
    params = init_params(cfg, rng)
    value, terms = loss(batch, params, cfg, hp)
    assert value.item() == pytest.approx(-terms.total.item() / batch.pixels, rel=1e-14)
    with pytest.raises(ContractError):
        loss(Batch(y=batch.y[:0], x=batch.x[:0], beta0=batch.beta0[:0], alpha0=2.0), params, cfg, hp)


def test_batch_loss_is_mean_of_singles():
    rng = np.random.default_rng(9)
    batch, cfg, hp = _toy_batch(rng, "denoise", n=3)
    params = init_params(cfg, rng)
    full = loss(batch, params, cfg, hp)[0].item()
    singles = [loss(Batch(y=batch.y[i:i + 1], x=batch.x[i:i + 1], beta0=batch.beta0[i:i + 1],
                          alpha0=batch.alpha0), params, cfg, hp)[0].item() for i in range(3)]
    assert full == pytest.approx(np.mean(singles), rel=1e-12)


def _touched(params, names):
    return {n for n in names if params[n].grad is not None and np.any(params[n].grad != 0)}


def test_kl_gradients_decouple_and_likelihood_reaches_both():
    rng = np.random.default_rng(10)
    batch, cfg, hp = _toy_batch(rng, "denoise")
    params = init_params(cfg, rng)
    r_names, s_names = rnet_params(params), snet_params(params)
    for term, owner, other in (("kl_z", r_names, s_names), ("kl_sigma", s_names, r_names),
                               ("likelihood", r_names + s_names, [])):
        for p in params.values():
            p.grad = None
        _, terms = loss(batch, params, cfg, hp)
        T.backward(getattr(terms, term))
        assert _touched(params, owner), term
        assert not _touched(params, other), term
    assert _touched(params, r_names) and _touched(params, s_names)


def test_loss_gradcheck_three_parameters():
    rng = np.random.default_rng(11)
    batch, cfg, hp = _toy_batch(rng, "sr")
    params = init_params(cfg, rng)
    T.backward(loss(batch, params, cfg, hp, np.random.default_rng(3))[0])
    for name in ("snet.conv1.weight", "rnet.enc2b.weight", "rnet.head.bias"):
        data = params[name].data
        i = np.unravel_index(int(rng.integers(data.size)), data.shape)
        orig, h = data[i], 1e-6
        data[i] = orig + h
        up = loss(batch, params, cfg, hp, np.random.default_rng(3))[0].item()
        data[i] = orig - h
        down = loss(batch, params, cfg, hp, np.random.default_rng(3))[0].item()
        data[i] = orig
        assert relative_error(params[name].grad[i], (up - down) / (2 * h), floor=1e-3) < 1e-4


def test_mse_degeneracy():
    rng = np.random.default_rng(12)
    batch, cfg, hp = _toy_batch(rng, "denoise")
    params = init_params(cfg, rng)
    tiny = HyperParams(eps0_sq=1e-12, p=3)
    c12 = mse_degeneracy_check(batch, params, cfg, tiny)
    c4 = mu_gradient_cosine(batch, params, cfg, 1e-4)
    assert c12 > 0.999
    assert c4 < c12
    with pytest.raises(ContractError):
        mse_degeneracy_check(batch, params, cfg, HyperParams(eps0_sq=1e-4, p=3))
