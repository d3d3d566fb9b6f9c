import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cascadeseg.blocks import (
    AttentionGateParams,
    ConvParams,
    ResBlockParams,
    VaeHeadParams,
    attention_gate,
    downsample,
    res_block_forward,
    upsample_block,
    vae_head,
)
from cascadeseg.tensor import Tensor, check_gradients, mul, tsum

from conftest import SEEDS, draw_kink_free, kink_aware_errors

TOL = 1e-4


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def weighted(out, w):
    return tsum(mul(out, Tensor(w)))


def params_of(group):
    return [t for _, t in group.named_tensors()]


def randomize(group, rng, scale=0.5):
    # move GN affine and biases away from their init so every path carries gradient
    for _, t in group.named_tensors():
        t.data = rng.normal(0, scale, size=t.shape)
        t.requires_grad = True


# ---------------------------------------------------------------------------
# residual block


@given(c=st.sampled_from([1, 2, 4, 8]), d=st.integers(1, 4))
@settings(max_examples=15, deadline=None)
def test_res_block_identity_with_zero_convs(c, d):
    rng = np.random.default_rng(c * 10 + d)
    p = ResBlockParams.init(rng, c, np.float64)
    p.conv1_w.data[:] = 0
    p.conv2_w.data[:] = 0
    x = Tensor(rng.normal(size=(1, c, d, d + 1, d)))
    np.testing.assert_array_equal(res_block_forward(x, p).data, x.data)


def test_res_block_shape_and_channel_check(rng):
    p = ResBlockParams.init(rng, 4, np.float64)
    x = Tensor(rng.normal(size=(1, 4, 8, 8, 8)))
    assert res_block_forward(x, p).shape == x.shape
    with pytest.raises(ValueError):
        res_block_forward(Tensor(np.zeros((1, 2, 8, 8, 8))), p)


@pytest.mark.parametrize("seed", SEEDS)
def test_res_block_gradient(seed, monkeypatch):
    def make(rng):
        p = ResBlockParams.init(rng, 2, np.float64)
        randomize(p, rng)
        x = leaf(rng, 1, 2, 3, 3, 3)
        w = rng.normal(size=x.shape)
        return (lambda: weighted(res_block_forward(x, p), w)), [x] + params_of(p)

    fn, inputs = draw_kink_free(make, monkeypatch, np.random.default_rng(seed))
    assert max(check_gradients(fn, inputs)) < TOL


# ---------------------------------------------------------------------------
# resampling


def test_downsample_shapes(rng):
    p = ConvParams.init(rng, 4, 8, 3, np.float64)
    assert downsample(Tensor(np.zeros((1, 4, 8, 8, 8))), p).shape == (1, 8, 4, 4, 4)
    with pytest.raises(ValueError, match="odd"):
        downsample(Tensor(np.zeros((1, 4, 8, 7, 8))), p)


def test_upsample_block_shapes(rng):
    p = ConvParams.init(rng, 8, 4, 1, np.float64)
    assert upsample_block(Tensor(np.zeros((1, 8, 4, 4, 4))), p).shape == (1, 4, 8, 8, 8)
    with pytest.raises(ValueError, match="odd"):
        upsample_block(Tensor(np.zeros((1, 7, 4, 4, 4))), ConvParams.init(rng, 7, 3, 1))


@pytest.mark.parametrize("seed", SEEDS)
def test_resampling_gradients(seed):
    rng = np.random.default_rng(seed)
    pd = ConvParams.init(rng, 2, 4, 3, np.float64)
    randomize(pd, rng)
    x = leaf(rng, 1, 2, 4, 4, 4)
    w = rng.normal(size=(1, 4, 2, 2, 2))
    assert max(check_gradients(lambda: weighted(downsample(x, pd), w), [x, pd.w, pd.b])) < TOL
    pu = ConvParams.init(rng, 4, 2, 1, np.float64)
    randomize(pu, rng)
    y = leaf(rng, 1, 4, 2, 2, 2)
    w2 = rng.normal(size=(1, 2, 4, 4, 4))
    assert max(check_gradients(lambda: weighted(upsample_block(y, pu), w2), [y, pu.w, pu.b])) < TOL


# ---------------------------------------------------------------------------
# attention gate


def test_gate_shapes_and_range(rng):
    p = AttentionGateParams.init(rng, 4, np.float64)
    assert p.w_x.shape == (2, 4, 1, 1, 1) and p.w_g.shape == (2, 8, 1, 1, 1)
    x = Tensor(rng.normal(size=(1, 4, 8, 8, 8)))
    g = Tensor(rng.normal(size=(1, 8, 4, 4, 4)))
    x_hat, alpha = attention_gate(x, g, p)
    assert x_hat.shape == x.shape and alpha.shape == (1, 1, 8, 8, 8)
    assert np.all((alpha.data > 0) & (alpha.data < 1))


def test_gate_zero_projection_gives_half(rng):
    p = AttentionGateParams.init(rng, 4, np.float64)
    p.w_int.data[:] = 0
    x = Tensor(rng.normal(size=(1, 4, 4, 4, 4)))
    g = Tensor(rng.normal(size=(1, 8, 2, 2, 2)))
    x_hat, alpha = attention_gate(x, g, p)
    np.testing.assert_array_equal(alpha.data, 0.5)
    np.testing.assert_array_equal(x_hat.data, 0.5 * x.data)


def test_gate_saturates_to_identity(rng):
    p = AttentionGateParams.init(rng, 4, np.float64)
    p.w_int.data[:] = 0
    p.b_int.data[:] = 50.0
    x = Tensor(rng.normal(size=(1, 4, 4, 4, 4)))
    g = Tensor(rng.normal(size=(1, 8, 2, 2, 2)))
    x_hat, _ = attention_gate(x, g, p)
    np.testing.assert_allclose(x_hat.data, x.data, atol=1e-6)


def test_gate_rejects_wrong_ratio(rng):
    p = AttentionGateParams.init(rng, 4, np.float64)
    with pytest.raises(ValueError, match="ratio"):
        attention_gate(Tensor(np.zeros((1, 4, 8, 8, 8))), Tensor(np.zeros((1, 8, 8, 8, 8))), p)


def test_gate_x_path_has_no_bias(rng):
    p = AttentionGateParams.init(rng, 4)
    names = dict(p.named_tensors())
    assert set(names) == {"w_x", "w_g", "b_g", "w_int", "b_int"}


@pytest.mark.parametrize("seed", SEEDS)
def test_gate_gradient(seed, monkeypatch):
    def make(rng):
        p = AttentionGateParams.init(rng, 2, np.float64)
        randomize(p, rng)
        x = leaf(rng, 1, 2, 4, 4, 4)
        g = leaf(rng, 1, 4, 2, 2, 2)
        w = rng.normal(size=x.shape)
        return (lambda: weighted(attention_gate(x, g, p)[0], w)), [x, g] + params_of(p)

    fn, inputs = draw_kink_free(make, monkeypatch, np.random.default_rng(seed))
    assert max(check_gradients(fn, inputs)) < TOL


# ---------------------------------------------------------------------------
# VAE head


def small_head(rng, dtype=np.float64):
    # endpoint 1x8x4x4x4 mirrors back to 4 channels at 8^3 over 2 levels; the 2^3 reduced
    # grid keeps decoder activations spatially varying so GroupNorm is well conditioned
    return VaeHeadParams.init(rng, 8, (4, 4, 4), 2, 4, 3, reduce_channels=2, dtype=dtype)


def test_vae_shapes_at_tiny_scale(rng):
    p = VaeHeadParams.init(rng, 32, (2, 2, 2), 4, 4, 8)
    recon, mu, sigma = vae_head(Tensor(rng.normal(size=(1, 32, 2, 2, 2)).astype(np.float32)), p, rng)
    assert recon.shape == (1, 4, 16, 16, 16)
    assert mu.shape == sigma.shape == (1, 8)
    assert np.all(sigma.data > 0)


def test_vae_mean_mode_uses_mu(rng):
    p = small_head(rng)
    # zero the encoder FC so mu = 0 and log sigma^2 = 0
    p.fc_enc.w.data[:] = 0
    e = Tensor(rng.normal(size=(1, 8, 4, 4, 4)))
    r1, mu, sigma = vae_head(e, p, None, sample=False)
    np.testing.assert_array_equal(mu.data, 0.0)
    np.testing.assert_array_equal(sigma.data, 1.0)
    p.fc_enc.b.data[3:] = 5.0  # change sigma only
    r2, _, _ = vae_head(e, p, None, sample=False)
    np.testing.assert_array_equal(r1.data, r2.data)


def test_vae_sampling_deterministic_per_seed(rng):
    p = small_head(rng)
    p.out.w.data = rng.normal(size=p.out.w.shape)  # the output conv starts at zero
    e = Tensor(rng.normal(size=(1, 8, 4, 4, 4)))
    a = vae_head(e, p, np.random.default_rng(7))[0].data
    b = vae_head(e, p, np.random.default_rng(7))[0].data
    c = vae_head(e, p, np.random.default_rng(8))[0].data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_vae_latent_variance_matches_sigma():
    # z = mu + sigma * eps with fixed (mu, sigma): sample variance over 10^4 draws within 5% of sigma^2
    rng = np.random.default_rng(0)
    mu, sigma = 0.3, 1.7
    z = mu + sigma * rng.standard_normal((10_000, 1))
    assert abs(z.var() / sigma ** 2 - 1) < 0.05


def test_vae_rejects_odd_endpoint(rng):
    p = small_head(rng)
    with pytest.raises(ValueError, match="even"):
        vae_head(Tensor(np.zeros((1, 8, 3, 4, 4))), p, rng)


@pytest.mark.parametrize("seed", SEEDS)
def test_vae_gradient(seed, monkeypatch):
    rng = np.random.default_rng(seed)
    p = small_head(rng)
    randomize(p, rng, 0.3)
    e = leaf(rng, 1, 8, 4, 4, 4)
    w = rng.normal(size=(1, 4, 8, 8, 8))

    def fn():
        recon, mu, sigma = vae_head(e, p, np.random.default_rng(seed), sample=True)
        return weighted(recon, w) + tsum(mul(mu, mu)) + tsum(sigma)

    errors, skipped = kink_aware_errors(fn, [e] + params_of(p), monkeypatch)
    assert skipped < 0.05
    assert max(errors) < TOL
