import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oponerf.prob import (
    ProbConfig,
    ProbHeads,
    adaptiveness,
    fuse_point,
    invariant_head,
    kl_loss,
    kl_loss_from_log,
    posterior,
    rec_loss,
    sample_variance,
)
from oponerf.tensor import Tensor, finite_difference_check


def heads(seed=0, random_bias=True):
    rng = np.random.default_rng(seed)
    h = ProbHeads(rng, ProbConfig(channels=6, latent=4, n_layers=3))
    if random_bias:
        for p in h.parameters().values():
            if p.ndim == 1:
                p.data = rng.standard_normal(p.shape) * 0.3
    return h


def zero_module(m):
    for p in m.parameters().values():
        p.data = np.zeros(p.shape)


def naive_mlp(mlp, x):
    for i, layer in enumerate(mlp.layers):
        x = x @ layer.weight.data + layer.bias.data
        if i < len(mlp.layers) - 1:
            x = np.maximum(x, 0.0)
    return x


def naive_linear(layer, x):
    return x @ layer.weight.data + layer.bias.data


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


X = np.random.default_rng(99).standard_normal((5, 6))


# -- invariance ---------------------------------------------------------------


def test_invariant_head_deterministic_zero_and_oracle():
    h = heads()
    a, b = invariant_head(h, Tensor(X)).data, invariant_head(h, Tensor(X)).data
    assert np.array_equal(a, b)
    assert np.allclose(a, naive_mlp(h.invariance, X), rtol=0, atol=1e-14)
    zero_module(h.invariance)
    assert np.all(invariant_head(h, Tensor(X)).data == 0)


# -- posterior and sampling ---------------------------------------------------


def test_posterior_zero_heads():
    h = heads()
    zero_module(h.mu_head)
    zero_module(h.logsigma_head)
    mu, sigma = posterior(h, Tensor(X))
    assert np.all(mu.data == 0) and np.all(sigma.data == 1)


def test_posterior_matches_oracle():
    h = heads(1)
    mu, sigma = posterior(h, Tensor(X))
    assert np.allclose(mu.data, naive_linear(h.mu_head, X), rtol=0, atol=1e-14)
    assert np.allclose(sigma.data, np.exp(naive_linear(h.logsigma_head, X)), rtol=1e-14)


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 50))
def test_sigma_positive(seed, scale):
    h = heads(seed % 11)
    x = np.random.default_rng(seed).standard_normal((4, 6)) * scale
    assert np.all(posterior(h, Tensor(x))[1].data > 0)


def test_small_sigma_limit_and_inference_mode():
    mu = Tensor(np.arange(6.0).reshape(2, 3))
    tiny = Tensor(np.full((2, 3), 1e-300))
    assert np.allclose(sample_variance(mu, tiny, seed=3).data, mu.data, rtol=1e-15, atol=1e-290)
    big = Tensor(np.full((2, 3), 5.0))
    assert np.array_equal(sample_variance(mu, big).data, mu.data)


def test_monte_carlo_moments():
    mu = Tensor(np.ones(100_000))
    sigma = Tensor(np.full(100_000, 2.0))
    draw = sample_variance(mu, sigma, seed=0).data
    assert abs(draw.mean() - 1.0) < 0.02
    assert abs(draw.std() - 2.0) < 0.04


def test_sampling_is_seeded_and_rejects_bad_sigma():
    mu, sigma = Tensor(np.zeros(8)), Tensor(np.ones(8))
    assert np.array_equal(sample_variance(mu, sigma, seed=4).data, sample_variance(mu, sigma, seed=4).data)
    with pytest.raises(ValueError):
        sample_variance(mu, Tensor(np.zeros(8)), seed=1)


def test_reparameterized_gradient():
    eps = np.random.default_rng(5).standard_normal((3, 4))
    s = np.random.default_rng(6).uniform(0.5, 2.0, (3, 4))
    w = np.random.default_rng(7).standard_normal((3, 4))
    assert finite_difference_check(lambda m: (sample_variance(m, Tensor(s), eps=eps) * w).sum(), np.zeros((3, 4))) < 1e-4
    assert finite_difference_check(lambda t: (sample_variance(Tensor(np.zeros((3, 4))), t, eps=eps) * w).sum(), s) < 1e-4


# -- KL -----------------------------------------------------------------------


def test_kl_matched_prior_is_zero():
    assert kl_loss(Tensor(np.zeros((4, 3))), Tensor(np.ones((4, 3)))).item() == 0.0


def test_kl_unit_mean():
    assert kl_loss(Tensor([[1.0]]), Tensor([[1.0]])).item() == pytest.approx(0.5, abs=1e-15)


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_kl_non_negative_and_closed_form(seed):
    rng = np.random.default_rng(seed)
    mu = rng.standard_normal((5, 3)) * 2
    sigma = np.exp(rng.standard_normal((5, 3)))
    got = kl_loss(Tensor(mu), Tensor(sigma)).item()
    closed = np.mean(np.sum((mu**2 + sigma**2 - 1 - np.log(sigma**2)) / 2, axis=1))
    assert got >= -1e-12
    assert got == pytest.approx(closed, rel=1e-12, abs=1e-12)
    assert kl_loss_from_log(Tensor(mu), Tensor(np.log(sigma))).item() == pytest.approx(closed, rel=1e-12, abs=1e-12)


def test_kl_zero_only_at_prior():
    assert kl_loss(Tensor(np.full((2, 2), 1e-3)), Tensor(np.ones((2, 2)))).item() > 0
    assert kl_loss(Tensor(np.zeros((2, 2))), Tensor(np.full((2, 2), 1.01))).item() > 0
    assert abs(kl_loss(Tensor(np.zeros((3, 2))), Tensor(np.ones((3, 2)))).item()) <= 1e-10


# -- reconstruction -----------------------------------------------------------


def test_rec_loss_zero_maps_and_identical_latents():
    h = heads(2)
    zero_module(h.enc)
    zero_module(h.dec)
    assert rec_loss(h, Tensor(X), Tensor(X * 3)).item() == 0.0
    h = heads(3)
    # copy Enc into Dec so identical inputs give identical latents
    for (_, a), (_, b) in zip(h.enc.named_parameters(), h.dec.named_parameters()):
        b.data = a.data.copy()
    assert rec_loss(h, Tensor(X), Tensor(X)).item() == 0.0


def test_rec_loss_loop_oracle():
    h = heads(4)
    Y = np.random.default_rng(8).standard_normal((5, 6))
    acc = 0.0
    for i in range(5):
        d = naive_mlp(h.enc, X[i]) - naive_mlp(h.dec, Y[i])
        acc += float(d @ d)
    assert rec_loss(h, Tensor(X), Tensor(Y)).item() == pytest.approx(acc / 5, rel=1e-13)
    with pytest.raises(ValueError):
        rec_loss(h, Tensor(X), Tensor(Y[:, :3]))


# -- fusion -------------------------------------------------------------------


def test_fuse_point_limits_and_arithmetic():
    f = Tensor(X)
    fi, fv = Tensor(np.ones((5, 6))), Tensor(np.full((5, 6), 2.0))
    assert np.array_equal(fuse_point(f, fi, fv, 0.0).data, X)
    assert np.array_equal(fuse_point(f, Tensor(np.zeros((5, 6))), Tensor(np.zeros((5, 6))), 0.7).data, X)
    e = Tensor(np.ones((1, 4)))
    assert np.allclose(fuse_point(e, e, e, 0.3).data, 1.6, rtol=0, atol=1e-15)
    assert np.array_equal(fuse_point(f, fi, fv, 0.3).data, X + 0.3 * (fi.data + fv.data))
    with pytest.raises(ValueError):
        fuse_point(f, fi, fv, -0.1)


def test_fuse_point_without_residual_and_parts():
    f = Tensor(X)
    fi = Tensor(np.ones((5, 6)))
    assert np.array_equal(fuse_point(f, fi, None, 0.5, residual=False).data, np.full((5, 6), 0.5))
    assert np.array_equal(fuse_point(f, None, None, 0.5).data, X)


def test_adaptiveness_zero_head_is_half():
    h = heads(5)
    zero_module(h.fusion)
    a = Tensor(np.random.default_rng(0).standard_normal((5, 3)))
    assert np.all(adaptiveness(h, a, Tensor(X)).data == 0.5)


def test_adaptiveness_matches_oracle_and_range():
    h = heads(6)
    a = np.random.default_rng(1).standard_normal((5, 3)) * 4
    expected = sigmoid(naive_linear(h.fusion, np.concatenate([a, naive_linear(h.proj, X)], axis=1)))
    out = adaptiveness(h, Tensor(a), Tensor(X)).data
    assert np.allclose(out, expected, rtol=0, atol=1e-14)
    assert np.all((out > 0) & (out < 1))
    direct = adaptiveness(h, Tensor(a), Tensor(X), direct=True).data
    assert np.allclose(direct, sigmoid(naive_linear(h.direct, X)), rtol=0, atol=1e-14)
    with pytest.raises(ValueError):
        adaptiveness(h, Tensor(a[:, :2]), Tensor(X))
