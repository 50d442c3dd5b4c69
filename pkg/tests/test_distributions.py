import math

import numpy as np
import pytest
from scipy import stats

from virnet import distributions as D
from virnet import tensor as T
from virnet.errors import DomainError, ShapeError
from virnet.oracles import gradcheck
from virnet.verify import _kl_gauss_value, _kl_ig_value, random_gaussian_case, random_invgamma_case


def gauss(mu, m2):
    return D.GaussianPosterior(np.atleast_1d(np.asarray(mu, float)), np.atleast_1d(np.asarray(m2, float)))


def invgamma(a, b):
    return D.InvGammaPosterior(np.atleast_1d(np.asarray(a, float)), np.atleast_1d(np.asarray(b, float)))


# ------------------------------------------------------------------ types


def test_posterior_invariants():
    with pytest.raises(DomainError):
        gauss([0.1], [0.0])
    with pytest.raises(DomainError):
        invgamma([1.0], [1.0])
    with pytest.raises(DomainError):
        invgamma([2.0], [-1.0])
    with pytest.raises(ShapeError):
        gauss([0.1, 0.2], [1.0])
    with pytest.raises(DomainError):
        D.ZPrior(np.zeros(2), 0.0)
    with pytest.raises(DomainError):
        D.SigmaPrior(2.0, np.array([0.0]))


# ------------------------------------------------------------------ KL


def test_kl_gaussian_closed_form_examples():
    x = np.linspace(0, 1, 9).reshape(3, 3)
    kl = D.kl_gaussian(D.GaussianPosterior(x.copy(), np.full((3, 3), 1e-6)), D.ZPrior(x, 1e-6))
    assert kl.item() == pytest.approx(0.0, abs=1e-12)
    assert D.kl_gaussian(gauss(1.0, 1.0), D.ZPrior(np.zeros(1), 1.0)).item() == pytest.approx(0.5, abs=1e-15)


def test_kl_gaussian_against_monte_carlo():
    rng = np.random.default_rng(1)
    est, se = D.kl_mc_gaussian(0.0, 2.0, 0.0, 1.0, 10**6, rng)
    analytic = D.kl_gaussian(gauss(0.0, 2.0), D.ZPrior(np.zeros(1), 1.0)).item()
    assert abs(analytic - est) <= 3 * se
    assert analytic == pytest.approx(0.5 * (2 - math.log(2) - 1), abs=1e-15)


def test_kl_inverse_gamma_examples():
    a0, b0 = 23.5, np.array([0.3, 0.01])
    kl = D.kl_inverse_gamma(D.InvGammaPosterior(np.full(2, a0), b0.copy()), D.SigmaPrior(a0, b0))
    assert kl.item() == pytest.approx(0.0, abs=1e-12)
    prior = D.SigmaPrior.from_xi(np.array([0.02]), 7)
    assert prior.alpha0 == 23.5
    assert prior.beta0[0] == pytest.approx(24.5 * 0.02, rel=1e-15)


def test_kl_inverse_gamma_against_monte_carlo():
    rng = np.random.default_rng(2)
    est, se = D.kl_mc_invgamma(3.0, 2.0, 2.0, 1.0, 10**6, rng)
    analytic = D.kl_inverse_gamma(invgamma(3.0, 2.0), D.SigmaPrior(2.0, np.array([1.0]))).item()
    assert abs(analytic - est) <= 3 * se


def test_kl_inverse_gamma_against_numerical_integration():
    import mpmath

    a, b, a0, b0 = 4.2, 0.7, 2.5, 1.9

    def log_ig(s, al, be):
        return al * mpmath.log(be) - mpmath.loggamma(al) - (al + 1) * mpmath.log(s) - be / s

    val = mpmath.quad(lambda s: mpmath.exp(log_ig(s, a, b)) * (log_ig(s, a, b) - log_ig(s, a0, b0)), [0, 0.2, 1, mpmath.inf])
    analytic = D.kl_inverse_gamma(invgamma(a, b), D.SigmaPrior(a0, np.array([b0]))).item()
    assert analytic == pytest.approx(float(val), rel=1e-10)


def test_kl_nonnegative_and_zero_only_at_match():
    rng = np.random.default_rng(3)
    for _ in range(200):
        g = random_gaussian_case(rng)
        assert _kl_gauss_value(D.kl_gaussian, g) >= 0
        g["mu"], g["m2"] = g["x"], g["eps0_sq"]
        assert abs(_kl_gauss_value(D.kl_gaussian, g)) <= 1e-12
        c = random_invgamma_case(rng)
        assert _kl_ig_value(D.kl_inverse_gamma, c) >= 0
        c["alpha"], c["beta"] = c["alpha0"], c["beta0"]
        assert abs(_kl_ig_value(D.kl_inverse_gamma, c)) <= 1e-12


def test_kl_shape_mismatch():
    with pytest.raises(ShapeError):
        D.kl_gaussian(gauss([0.1, 0.2], [1.0, 1.0]), D.ZPrior(np.zeros(3), 1.0))


def test_kl_gradients():
    rng = np.random.default_rng(4)
    mu = T.tensor(rng.uniform(0, 1, (4, 4)), requires_grad=True)
    m2 = T.tensor(rng.uniform(0.1, 1, (4, 4)), requires_grad=True)
    prior = D.ZPrior(rng.uniform(0, 1, (4, 4)), 0.3)
    assert gradcheck(lambda t: D.kl_gaussian(D.GaussianPosterior(t[0], t[1]), prior), [mu, m2], rng) <= 1e-4
    a = T.tensor(rng.uniform(1.5, 9, (4, 4)), requires_grad=True)
    b = T.tensor(rng.uniform(0.05, 3, (4, 4)), requires_grad=True)
    sp = D.SigmaPrior(23.5, rng.uniform(0.01, 1, (4, 4)))
    assert gradcheck(lambda t: D.kl_inverse_gamma(D.InvGammaPosterior(t[0], t[1]), sp), [a, b], rng) <= 1e-4


# ------------------------------------------------------------------ sampling


def test_reparameterize_limits_and_moments():
    rng = np.random.default_rng(5)
    q = gauss([0.3], [0.04])
    assert D.reparameterize(q, np.zeros(1)).data[0] == 0.3
    tiny = gauss([0.3], [1e-30])
    assert D.reparameterize(tiny, np.array([2.0])).data[0] == pytest.approx(0.3, abs=1e-14)
    n = 10**5
    big = D.GaussianPosterior(np.full(n, 0.3), np.full(n, 0.04))
    z = D.reparameterize(big, rng.standard_normal(n)).data
    assert abs(z.mean() - 0.3) <= 3 * 0.2 / math.sqrt(n)
    assert abs(z.var(ddof=1) - 0.04) <= 3 * 0.04 * math.sqrt(2 / (n - 1))
    with pytest.raises(ShapeError):
        D.reparameterize(q, np.zeros(2))


def test_reparameterize_gradient():
    rng = np.random.default_rng(6)
    mu = T.tensor(rng.uniform(0, 1, 5), requires_grad=True)
    m2 = T.tensor(rng.uniform(0.1, 1, 5), requires_grad=True)
    eps = rng.standard_normal(5)
    w = rng.standard_normal(5)
    fn = lambda t: T.sum(D.reparameterize(D.GaussianPosterior(t[0], t[1]), eps) * w)  # noqa: E731
    assert gradcheck(fn, [mu, m2], rng) <= 1e-4


def test_inverse_gamma_sampler_moments():
    rng = np.random.default_rng(7)
    n = 10**6
    s = D.sample_inverse_gamma(5.0, 8.0, n, rng)
    assert np.all(s > 0)
    # Var = beta^2 / ((a-1)^2 (a-2)) = 64 / 48
    se = math.sqrt(64 / 48 / n)
    assert abs(s.mean() - 2.0) <= 3 * se
    inv = 1 / s
    assert abs(inv.mean() - 5.0 / 8.0) <= 3 * inv.std() / math.sqrt(n)


@pytest.mark.parametrize("shape", [0.3, 1.0, 2.5, 40.0])
def test_gamma_sampler_distribution(shape):
    rng = np.random.default_rng(8)
    draws = D.sample_gamma(shape, 20000, rng)
    assert stats.kstest(draws, stats.gamma(shape).cdf).pvalue > 1e-3


def test_sigma_mode_recovers_xi_at_the_prior():
    q = invgamma(23.5, 24.5 * 0.013)
    assert D.sigma_mode(q)[0] == pytest.approx(0.013, rel=1e-15)


def test_sigma_mode_formula_at_alpha_one():
    # alpha = 1 lies outside the posterior invariant, so bypass the constructor
    shim = type("Q", (), {"alpha": T.tensor([1.0]), "beta": T.tensor([4.0])})
    assert D.sigma_mode(shim)[0] == 2.0


def test_sigma_mode_matches_histogram_peak():
    rng = np.random.default_rng(9)
    a, b = 6.0, 3.5
    s = D.sample_inverse_gamma(a, b, 10**7, rng)
    counts, edges = np.histogram(s, bins=200, range=(0, 2))
    width = edges[1] - edges[0]
    peak = 0.5 * (edges[np.argmax(counts)] + edges[np.argmax(counts) + 1])
    assert abs(peak - D.sigma_mode(invgamma(a, b))[0]) <= width
