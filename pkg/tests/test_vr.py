import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vrdp.model import ModelConfig, PolicyModel, VRConfig
from vrdp.nets import UNetConfig
from vrdp.numerics import Tensor, backward, grad_check_many, no_grad, ops, stream
from vrdp.vr import (
    BYPASS,
    DETERMINISTIC,
    STOCHASTIC,
    VariationalRegularizer,
    inverse_softplus,
    kl_to_standard_normal,
)

C, E, L = 16, 8, 4


def _vr(seed=0, **kw):
    return VariationalRegularizer(C, E, stream(seed, "vr"), **kw)


def _perturb(vr, seed, scale=0.3):
    rng = stream(seed, "perturb")
    for p in vr.parameters():
        p.data += scale * rng.standard_normal(p.shape)


def _inputs(seed, B=2):
    rng = stream(seed, "vr.in")
    return Tensor(rng.standard_normal((B, C, L))), Tensor(rng.standard_normal((B, E)))


def test_kl_analytic_values():
    assert kl_to_standard_normal(np.zeros(10), np.ones(10)).data == 0.0
    assert abs(kl_to_standard_normal(np.array([1.0]), np.array([1.0])).data - 0.5) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(0.05, 4)), min_size=1, max_size=8))
def test_kl_nonnegative_and_zero_only_at_standard(pairs):
    mu, sigma = map(np.array, zip(*pairs))
    kl = kl_to_standard_normal(mu, sigma).data
    assert kl >= 0
    if kl == 0:
        assert np.allclose(mu, 0) and np.allclose(sigma, 1)


def test_kl_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        kl_to_standard_normal(np.zeros(2), np.array([1.0, 0.0]))


def test_kl_gradients_closed_form():
    rng = stream(0, "klgrad")
    mu = Tensor(rng.standard_normal(6))
    sigma = Tensor(rng.uniform(0.2, 3.0, 6))
    mu.requires_grad = sigma.requires_grad = True
    backward(kl_to_standard_normal(mu, sigma))
    assert np.abs(mu.grad - mu.data).max() <= 1e-12
    assert np.abs(sigma.grad - (sigma.data - 1.0 / sigma.data)).max() <= 1e-12
    assert grad_check_many(lambda: kl_to_standard_normal(mu, sigma), [mu, sigma]) <= 1e-6


def test_reparameterisation_gradients():
    rng = stream(1, "reparam")
    mu = Tensor(rng.standard_normal(5))
    sigma = Tensor(rng.uniform(0.5, 2.0, 5))
    eps = rng.standard_normal(5)
    w = rng.standard_normal(5)
    mu.requires_grad = sigma.requires_grad = True
    backward(ops.sum_(ops.mul(mu + sigma * Tensor(eps), Tensor(w))))
    assert np.array_equal(mu.grad, w)
    assert np.allclose(sigma.grad, w * eps, rtol=0, atol=1e-15)
    f = lambda: ops.sum_(ops.square(mu + sigma * Tensor(eps)))  # noqa: E731
    assert grad_check_many(f, [mu, sigma]) <= 1e-6


def test_identity_at_init():
    vr = _vr()
    z, temb = _inputs(0)
    out = vr(z, temb, DETERMINISTIC)
    assert np.array_equal(out.mu.data, z.data)
    assert np.allclose(out.sigma.data, 1.0, atol=1e-12)


def test_near_floor_sigma_passes_z_through():
    vr = _vr(sigma_floor=1e-4, init_sigma=2e-4)
    z, temb = _inputs(1)
    eps = stream(1, "eps").standard_normal(z.shape)
    out = vr(z, temb, STOCHASTIC, eps)
    assert np.abs(out.z_hat.data - z.data).max() <= 1e-3


def test_deterministic_mode_returns_mu():
    vr = _vr()
    _perturb(vr, 2)
    z, temb = _inputs(2)
    out = vr(z, temb, DETERMINISTIC)
    assert out.z_hat is out.mu or np.array_equal(out.z_hat.data, out.mu.data)


def test_stochastic_mode_requires_matching_eps():
    vr = _vr()
    z, temb = _inputs(0)
    with pytest.raises(ValueError):
        vr(z, temb, STOCHASTIC, None)
    with pytest.raises(ValueError):
        vr(z, temb, "sometimes", None)


def test_sample_moments_match_heads():
    vr = _vr()
    _perturb(vr, 3)
    z, temb = _inputs(3, B=1)
    with no_grad():
        mu, sigma = vr.heads(z, temb)
    n = 100_000
    eps = stream(3, "mc").standard_normal((n,) + mu.shape[1:])
    draws = mu.data + sigma.data * eps
    se_mean = sigma.data / math.sqrt(n)
    assert (np.abs(draws.mean(0) - mu.data) <= 4 * se_mean).mean() >= 0.99
    se_std = sigma.data / math.sqrt(2 * n)
    assert (np.abs(draws.std(0) - sigma.data) <= 4 * se_std).mean() >= 0.99


def test_sigma_is_above_floor():
    vr = _vr(sigma_floor=1e-3)
    _perturb(vr, 4, scale=5.0)
    z, temb = _inputs(4)
    _, sigma = vr.heads(z, temb)
    assert (sigma.data >= 1e-3).all() and (sigma.data > 0).all()


def test_inverse_softplus():
    for y in (1e-3, 0.5, 1.0, 7.0):
        assert math.isclose(math.log1p(math.exp(inverse_softplus(y))), y, rel_tol=1e-12)


def test_disabled_timestep_is_time_independent():
    vr = _vr(use_timestep=False)
    _perturb(vr, 5)
    z, _ = _inputs(5)
    m = PolicyModel(ModelConfig(unet=UNetConfig(down_dims=(8, 8, 16), time_embed_dim=E)), seed=0)
    t1, t99 = m.unet.time_embedding(np.array([1, 1])), m.unet.time_embedding(np.array([99, 99]))
    eps = stream(5, "eps").standard_normal(z.shape)
    a = vr(z, t1, STOCHASTIC, eps)
    b = vr(z, t99, STOCHASTIC, eps)
    assert np.array_equal(a.z_hat.data, b.z_hat.data) and a.kl.data == b.kl.data


def test_timestep_changes_output_once_trained():
    vr = _vr()
    z, _ = _inputs(6)
    m = PolicyModel(ModelConfig(unet=UNetConfig(down_dims=(8, 8, 16), time_embed_dim=E)), seed=0)
    t1, t99 = m.unet.time_embedding(np.array([1, 1])), m.unet.time_embedding(np.array([99, 99]))
    assert np.array_equal(vr(z, t1, DETERMINISTIC).mu.data, vr(z, t99, DETERMINISTIC).mu.data)
    # a few gradient steps on the KL move the zero-initialised FiLM away from identity
    for _ in range(3):
        vr.zero_grad()
        backward(vr(z, t1, DETERMINISTIC).kl)
        for p in vr.parameters():
            if p.grad is not None:
                p.data -= 1e-2 * p.grad
    assert not np.array_equal(vr(z, t1, DETERMINISTIC).mu.data, vr(z, t99, DETERMINISTIC).mu.data)


def test_module_gradients():
    vr = _vr()
    _perturb(vr, 7)
    z, temb = _inputs(7)
    eps = stream(7, "eps").standard_normal(z.shape)

    def f():
        out = vr(z, temb, STOCHASTIC, eps)
        return ops.mean(ops.square(out.z_hat)) + 1e-3 * out.kl

    assert grad_check_many(f, [z, temb] + vr.parameters(), max_coords=6, rng=stream(7, "gc")) <= 1e-4


def test_parameter_budget():
    m = PolicyModel(ModelConfig(), seed=0)
    assert m.vr_parameter_count() / m.num_parameters() <= 0.02


def test_bypass_and_disabled_models_agree():
    rng = stream(8, "in")
    points = rng.uniform(0, 1, (2, 2, 32, 3))
    proprio = rng.uniform(-1, 1, (2, 2, 4))
    a_t = Tensor(rng.standard_normal((2, 16, 2)))
    on = PolicyModel(ModelConfig(), seed=1)
    off = PolicyModel(ModelConfig(vr=VRConfig(enabled=False)), seed=1)
    with no_grad():
        a, _, kl_a = on.forward(a_t, [3, 70], points, proprio, mode=BYPASS)
        b, _, kl_b = off.forward(a_t, [3, 70], points, proprio)
    assert np.array_equal(a.data, b.data) and kl_a.data == kl_b.data == 0.0
