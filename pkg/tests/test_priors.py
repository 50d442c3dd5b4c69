import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from virnet import oracles
from virnet.errors import ContractError, DomainError, ShapeError
from virnet.priors import HyperParams, compute_xi, default_hyperparams, filter_weights


def test_defaults_per_task():
    assert default_hyperparams("denoise") == HyperParams(1e-6, 7, "gaussian")
    assert default_hyperparams("deblock") == HyperParams(1e-6, 7, "gaussian")
    assert default_hyperparams("sr") == HyperParams(1e-6, 11, "average")
    with pytest.raises(ContractError):
        default_hyperparams("inpaint")


def test_hyperparam_validation():
    for kw in ({"eps0_sq": 0.0}, {"p": 4}, {"p": 1}, {"filter_kind": "median"}):
        with pytest.raises(DomainError):
            HyperParams(**kw)


@pytest.mark.parametrize("kind", ["gaussian", "average"])
@pytest.mark.parametrize("p", [3, 7, 11])
def test_filter_weights_are_normalised(kind, p):
    w = filter_weights(p, kind)
    assert w.shape == (p, p)
    assert abs(w.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(w, w.T)


def test_constant_residual_gives_its_square():
    y = np.full((10, 12), 0.5)
    prior = compute_xi(y, y - 0.03, HyperParams(p=7))
    np.testing.assert_allclose(prior.xi, 0.03**2, rtol=1e-12)


def test_prior_arithmetic_for_p7():
    rng = np.random.default_rng(0)
    y, hx = rng.uniform(0, 1, (2, 9, 9))
    prior = compute_xi(y, hx, default_hyperparams("denoise"))
    assert prior.alpha0 == 23.5
    np.testing.assert_array_equal(prior.beta0, 24.5 * prior.xi)
    sp = prior.as_sigma_prior()
    assert sp.alpha0 == 23.5


def test_xi_matches_windowed_sum_oracle():
    rng = np.random.default_rng(1)
    y, hx = rng.uniform(0, 1, (2, 16, 16))
    hp = HyperParams(p=7, filter_kind="gaussian")
    ref = oracles.naive_filter((y - hx) ** 2, filter_weights(7, "gaussian"))
    np.testing.assert_allclose(compute_xi(y, hx, hp).xi, ref, atol=1e-12, rtol=0)


def test_xi_floor_on_zero_residual():
    y = np.zeros((8, 8))
    prior = compute_xi(y, y, HyperParams(p=3))
    assert np.all(prior.xi == 1e-8) and np.all(prior.beta0 > 0)


def test_xi_batched_and_shape_errors():
    rng = np.random.default_rng(2)
    y = rng.uniform(0, 1, (3, 1, 12, 12))
    hx = rng.uniform(0, 1, (3, 1, 12, 12))
    batched = compute_xi(y, hx, HyperParams(p=5)).xi
    for i in range(3):
        np.testing.assert_allclose(batched[i, 0], compute_xi(y[i, 0], hx[i, 0], HyperParams(p=5)).xi)
    with pytest.raises(ShapeError):
        compute_xi(np.zeros((4, 4)), np.zeros((4, 5)), HyperParams(p=3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([3, 5, 7, 11]), st.sampled_from(["gaussian", "average"]))
def test_xi_ignores_the_residual_sign(seed, p, kind):
    rng = np.random.default_rng(seed)
    r = rng.standard_normal((12, 12)) * 0.1
    zero = np.zeros_like(r)
    hp = HyperParams(p=p, filter_kind=kind)
    np.testing.assert_array_equal(compute_xi(r, zero, hp).xi, compute_xi(zero, r, hp).xi)
