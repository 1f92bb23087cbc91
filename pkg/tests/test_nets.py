import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vrdp.model import ModelConfig, PolicyModel, VRConfig
from vrdp.nets import EncoderConfig, PointEncoder, TemporalUNet, UNetConfig, film
from vrdp.numerics import ShapeError, Tensor, grad_check_many, no_grad, stream


def _np_mish(x):
    return x * np.tanh(np.log1p(np.exp(x)))


def _encoder_loop(enc, points, proprio):
    """Reference encoder: one point and one observation at a time."""
    cfg = enc._cfg
    W0, b0 = enc.point0.weight.data, enc.point0.bias.data
    W1, b1 = enc.point1.weight.data, enc.point1.bias.data
    Wp, bp = enc.proj.weight.data, enc.proj.bias.data
    out = np.zeros((points.shape[0], cfg.n_obs * cfg.cond_dim))
    for b in range(points.shape[0]):
        for o in range(cfg.n_obs):
            pooled = np.full(cfg.hidden, -np.inf)
            for k in range(cfg.k_points):
                h = W1 @ _np_mish(W0 @ points[b, o, k] + b0) + b1
                pooled = np.maximum(pooled, h)
            feat = np.concatenate([pooled, proprio[b, o]])
            out[b, o * cfg.cond_dim:(o + 1) * cfg.cond_dim] = Wp @ feat + bp
    return out


@pytest.fixture(scope="module")
def encoder():
    return PointEncoder(EncoderConfig(), stream(0, "enc"))


def _obs(seed, B=3, cfg=EncoderConfig()):
    rng = stream(seed, "obs")
    return (rng.uniform(0, 1, (B, cfg.n_obs, cfg.k_points, cfg.point_dim)),
            rng.uniform(0, 1, (B, cfg.n_obs, cfg.proprio_dim)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_encoder_point_permutation_invariance(encoder, seed):
    points, proprio = _obs(seed)
    perm = stream(seed, "perm").permutation(points.shape[2])
    assert np.array_equal(encoder(points, proprio).data, encoder(points[:, :, perm], proprio).data)


def test_encoder_duplication_invariance():
    cfg = EncoderConfig(k_points=64)
    enc = PointEncoder(cfg, stream(0, "enc"))
    points, proprio = _obs(1, cfg=EncoderConfig())
    doubled = np.concatenate([points, points], axis=2)
    small = PointEncoder(EncoderConfig(), stream(0, "enc"))
    assert np.array_equal(small(points, proprio).data, enc(doubled, proprio).data)


def test_encoder_matches_loop_oracle(encoder):
    points, proprio = _obs(7)
    assert np.abs(encoder(points, proprio).data - _encoder_loop(encoder, points, proprio)).max() <= 1e-12


def test_encoder_rejects_wrong_shapes(encoder):
    points, proprio = _obs(0)
    with pytest.raises(ShapeError):
        encoder(points[:, :, :31], proprio)
    with pytest.raises(ShapeError):
        encoder(points[:, :1], proprio[:, :1])


def test_film_identity_and_scale_minus_one():
    rng = stream(0, "film")
    x = Tensor(rng.standard_normal((2, 5, 7)))
    zero = Tensor(np.zeros((2, 5)))
    assert np.array_equal(film(x, zero, zero).data, x.data)
    shift = rng.standard_normal((2, 5))
    y = film(x, Tensor(-np.ones((2, 5))), Tensor(shift))
    assert np.array_equal(y.data, np.broadcast_to(shift[:, :, None], (2, 5, 7)))


def test_film_gradient():
    rng = stream(1, "film")
    x, s, b = (Tensor(rng.standard_normal(shape)) for shape in [(2, 3, 4), (2, 3), (2, 3)])
    from vrdp.numerics import ops
    err = grad_check_many(lambda: ops.sum_(ops.square(film(x, s, b))), [x, s, b])
    assert err <= 1e-4


def test_film_channel_mismatch():
    with pytest.raises(ShapeError):
        film(Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))))


@pytest.fixture(scope="module")
def unet():
    return TemporalUNet(2, 128, UNetConfig(), stream(0, "unet"))


def _unet_inputs(seed, B=2, H=16):
    rng = stream(seed, "unet.in")
    return rng.standard_normal((B, H, 2)), rng.integers(1, 101, B), Tensor(rng.standard_normal((B, 128)))


def test_unet_shapes(unet):
    a_t, t, c = _unet_inputs(0)
    with no_grad():
        out, taps = unet(Tensor(a_t), t, c)
    assert out.shape == (2, 16, 2) and np.isfinite(out.data).all()
    assert taps.backbone.shape == (2, 128, 4)
    assert taps.skips[0].shape == (2, 64, 8)  # deep
    assert taps.skips[1].shape == (2, 32, 16)  # shallow


@pytest.mark.parametrize("H", [8, 16, 32])
def test_bottleneck_length_is_quarter_horizon(unet, H):
    a_t, t, c = _unet_inputs(1, H=H)
    with no_grad():
        _, taps = unet(Tensor(a_t), t, c)
    assert taps.backbone.shape[2] == H // 4


def test_unet_rejects_bad_horizon(unet):
    a_t, t, c = _unet_inputs(0, H=10)
    with pytest.raises(ShapeError):
        unet(Tensor(a_t), t, c)


def test_tap_replacement_is_bit_exact(unet):
    a_t, t, c = _unet_inputs(2)
    with no_grad():
        out, taps = unet(Tensor(a_t), t, c)
        hooks = {"backbone": lambda _: Tensor(taps.backbone.data.copy()),
                 "skip0": lambda _: Tensor(taps.skips[0].data.copy()),
                 "skip1": lambda _: Tensor(taps.skips[1].data.copy())}
        again, _ = unet(Tensor(a_t), t, c, hooks=hooks)
    assert np.array_equal(out.data, again.data)


def test_zeroed_up_path_leaves_only_final_bias():
    net = TemporalUNet(2, 16, UNetConfig(down_dims=(8, 8, 16)), stream(3, "unet"))
    for name, p in net.named_parameters():
        if name.startswith(("mid.", "up.", "final_block.", "final.")) and not name.endswith("norm.weight"):
            p.data[:] = 0.0
    net.final.bias.data[:] = [0.25, -0.5]
    rng = stream(3, "in")
    with no_grad():
        out, _ = net(Tensor(rng.standard_normal((3, 16, 2))), rng.integers(1, 101, 3),
                     Tensor(rng.standard_normal((3, 16))))
    assert np.array_equal(out.data, np.broadcast_to([0.25, -0.5], (3, 16, 2)))


def test_conditioning_changes_output(unet):
    a_t, t, c = _unet_inputs(4)
    with no_grad():
        a, _ = unet(Tensor(a_t), t, c)
        b, _ = unet(Tensor(a_t), t, Tensor(c.data + 1.0))
        d, _ = unet(Tensor(a_t), t + 1, c)
    assert not np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, d.data)


def test_unet_config_validation():
    with pytest.raises(ValueError):
        UNetConfig(down_dims=(8, 16))
    with pytest.raises(ValueError):
        UNetConfig(kernel=4)
    with pytest.raises(ValueError):
        UNetConfig(down_dims=(8, 12, 16))


def test_parameter_names_are_stable():
    a = PolicyModel(ModelConfig(), seed=0)
    b = PolicyModel(ModelConfig(), seed=0)
    assert [n for n, _ in a.named_parameters()] == [n for n, _ in b.named_parameters()]
    sa, sb = a.state_dict(), b.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_vr_shares_init_with_baseline():
    base = PolicyModel(ModelConfig(vr=VRConfig(enabled=False)), seed=5).state_dict()
    vr = PolicyModel(ModelConfig(vr=VRConfig(enabled=True)), seed=5).state_dict()
    assert set(base) < set(vr)
    assert all(np.array_equal(base[k], vr[k]) for k in base)
