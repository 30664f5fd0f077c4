import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magnet import ops
from magnet.fusion import (
    HOTSPOT_THRESHOLD,
    DiscriminatorHead,
    GuidedAttention,
    MAGNet,
    discriminator_forward,
    fuse_outputs,
    guided_channel_attention,
    guided_spatial_attention,
    magnet_forward,
    threshold_binarize,
)
from magnet.gradcheck import gradcheck, random_projection_loss
from magnet.gradsuite import random_pins, run_micro
from magnet.graph import build_graph_from_pins
from magnet.tensor import Parameter, ShapeError, Tensor, no_grad
from magnet.unet import (
    ChannelAttention,
    MDUnet,
    MSCMBlock,
    SpatialAttention,
    UNetConfig,
    channel_attention_forward,
    mdunet_forward,
    mscm_forward,
    spatial_attention_forward,
)


def _sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def _zero(module):
    for p in module.parameters():
        p.data[...] = 0.0
    return module


# -- MSCM ------------------------------------------------------------------------
def test_mscm_selects_single_branch():
    rng = np.random.default_rng(0)
    block = MSCMBlock(rng, 2, 3)
    block.mix.data[...] = [1.0, 0.0, 0.0]
    x = Tensor(rng.standard_normal((6, 6, 2)))
    ref = ops.conv2d(x, block.kernels[0], block.biases[0]).data
    np.testing.assert_array_equal(mscm_forward(block, x).data, ref)


def test_mscm_identity_kernels_triple_input():
    rng = np.random.default_rng(1)
    block = MSCMBlock(rng, 2, 2)
    for kern in block.kernels:
        kern.data[...] = 0.0
        c = kern.shape[0] // 2
        kern.data[c, c] = np.eye(2)
    block.mix.data[...] = 1.0
    x = rng.standard_normal((5, 5, 2))
    np.testing.assert_allclose(mscm_forward(block, Tensor(x)).data, 3 * x, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(3, 9), st.integers(0, 10_000))
def test_mscm_equals_manual_weighted_sum(cin, cout, size, seed):
    rng = np.random.default_rng(seed)
    block = MSCMBlock(rng, cin, cout)
    block.mix.data[...] = rng.standard_normal(3)
    for b in block.biases:
        b.data[...] = rng.standard_normal(cout)
    x = Tensor(rng.standard_normal((size, size, cin)))
    parts = [ops.conv2d(x, Parameter(k.data.copy()), Parameter(b.data.copy())).data for k, b in zip(block.kernels, block.biases)]
    manual = block.mix.data[0] * parts[0] + block.mix.data[1] * parts[1] + block.mix.data[2] * parts[2]
    assert mscm_forward(block, x).data.tobytes() == manual.tobytes()


# -- channel / spatial attention -------------------------------------------------------
def test_channel_attention_zero_weights():
    att = _zero(ChannelAttention(np.random.default_rng(0), 8, 4))
    x = np.random.default_rng(1).standard_normal((3, 3, 8))
    out, a = channel_attention_forward(att, Tensor(x))
    assert a.shape == (1, 1, 8) and np.all(a.data == 0.5)
    np.testing.assert_array_equal(out.data, 0.5 * x)


def test_channel_attention_scalar_oracle():
    att = ChannelAttention(np.random.default_rng(0), 2, reduction=1)
    att.w1.data[...] = [[1.0, -1.0], [0.5, 2.0]]
    att.b1.data[...] = [0.1, -0.2]
    att.w2.data[...] = [[0.3, 0.0], [-1.0, 1.5]]
    att.b2.data[...] = [0.0, 0.4]
    x = np.stack([np.full((2, 2), 1.0), np.full((2, 2), 3.0)], -1)
    _, a = channel_attention_forward(att, Tensor(x))
    z1, z2 = 1.0, 3.0
    h1, h2 = 1.0 * z1 - 1.0 * z2 + 0.1, 0.5 * z1 + 2.0 * z2 - 0.2
    expected = [_sig(0.3 * h1), _sig(-1.0 * h1 + 1.5 * h2 + 0.4)]
    np.testing.assert_allclose(a.data.ravel(), expected, rtol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 20.0))
def test_attention_gates_in_open_interval(seed, scale):
    rng = np.random.default_rng(seed)
    x = Tensor(scale * rng.standard_normal((4, 4, 16)))
    _, a = channel_attention_forward(ChannelAttention(rng, 16, 16), x)
    _, fc = spatial_attention_forward(SpatialAttention(rng, 3), x)
    assert np.all((a.data > 0) & (a.data < 1))
    assert np.all((fc.data > 0) & (fc.data < 1))


def test_spatial_attention_zero_kernel():
    att = _zero(SpatialAttention(np.random.default_rng(0)))
    x = np.random.default_rng(1).standard_normal((4, 4, 3))
    out, fc = spatial_attention_forward(att, Tensor(x))
    assert np.all(fc.data == 0.5)
    np.testing.assert_array_equal(out.data, 0.5 * x)


def test_spatial_attention_single_channel_hand_case():
    att = SpatialAttention(np.random.default_rng(0), kernel=1)
    att.conv.data[...] = np.array([0.5, 1.5]).reshape(1, 1, 2, 1)
    att.bias.data[...] = -1.0
    x = np.array([[1.0, -2.0], [0.0, 3.0]])[..., None]
    _, fc = spatial_attention_forward(att, Tensor(x))
    np.testing.assert_allclose(fc.data, _sig(2.0 * x - 1.0), rtol=1e-14)


# -- MD-Unet -----------------------------------------------------------------------
@pytest.mark.parametrize("size", [32, 64])
def test_mdunet_shape_contract(size):
    model = MDUnet(UNetConfig(tile_size=size, base_filters=2))
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (size, size, 9)))
    bottom, skips = model.encode(x)
    assert bottom.shape == (size // 16, size // 16, 16)
    assert [s.shape[0] for s in skips] == [size, size // 2, size // 4, size // 8]
    y = mdunet_forward(model, x)
    assert y.shape == (size, size, 1)
    assert np.all((y.data > 0) & (y.data < 1))


def test_mdunet_zero_input_gives_half():
    model = MDUnet(UNetConfig(tile_size=32, base_filters=2))
    np.testing.assert_array_equal(model(np.zeros((32, 32, 9))).data, np.full((32, 32, 1), 0.5))


def test_mdunet_rejects_wrong_shape():
    with pytest.raises(ShapeError):
        MDUnet(UNetConfig(tile_size=32, base_filters=2))(np.zeros((32, 32, 8)))
    with pytest.raises(ValueError):
        UNetConfig(tile_size=40)


def test_micro_network_gradcheck():
    for seed in range(3):
        assert run_micro(seed).max_rel_err < 1e-4


# -- guided attention -----------------------------------------------------------------
@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_guided_channel_zero_map_is_unguided(seed):
    rng = np.random.default_rng(seed)
    att = ChannelAttention(rng, 16, 16)
    w_s = Parameter(rng.standard_normal((16, 1)))
    f = Tensor(rng.standard_normal((2, 2, 16)))
    out_g, a_g = guided_channel_attention(att, w_s, f, np.zeros((32, 32, 1)))
    out_u, a_u = channel_attention_forward(att, f)
    assert a_g.data.tobytes() == a_u.data.tobytes()
    assert out_g.data.tobytes() == out_u.data.tobytes()
    assert np.all((a_g.data > 0) & (a_g.data < 1))


def test_guided_channel_scalar_oracle():
    att = ChannelAttention(np.random.default_rng(0), 2, reduction=1)
    att.w1.data[...] = np.eye(2)
    att.b1.data[...] = 0.0
    att.w2.data[...] = [[1.0, 0.0], [0.5, -1.0]]
    att.b2.data[...] = [0.2, 0.0]
    w_s = Parameter(np.array([[2.0], [-1.0]]))
    f = np.stack([np.full((2, 2), 0.5), np.full((2, 2), -1.0)], -1)
    s = np.zeros((4, 4, 1))
    s[:2] = 1.0  # mean 0.5
    _, a = guided_channel_attention(att, w_s, Tensor(f), Tensor(s))
    z = np.array([0.5 + 2.0 * 0.5, -1.0 - 1.0 * 0.5])
    expected = [_sig(z[0] + 0.2), _sig(0.5 * z[0] - z[1])]
    np.testing.assert_allclose(a.data.ravel(), expected, rtol=1e-14)


def test_guided_spatial_zero_kernel():
    guided = _zero(GuidedAttention(np.random.default_rng(0), 4))
    f = Tensor(np.random.default_rng(1).standard_normal((2, 2, 4)))
    _, fc = guided_spatial_attention(guided, f, np.random.default_rng(2).uniform(0, 1, (32, 32, 1)))
    assert np.all(fc.data == 0.5)


def test_guided_spatial_zero_map_reduces_to_mean_map_attention():
    rng = np.random.default_rng(3)
    guided = GuidedAttention(rng, 4, kernel=3)
    f = rng.standard_normal((4, 4, 4))
    _, fc = guided_spatial_attention(guided, Tensor(f), np.zeros((64, 64, 1)))
    stacked = np.concatenate([f.mean(-1, keepdims=True), np.zeros((4, 4, 1))], -1)
    ref = ops.sigmoid(ops.conv2d(Tensor(stacked), Tensor(guided.conv.data), Tensor(guided.bias.data))).data
    np.testing.assert_allclose(fc.data, ref, rtol=1e-14)
    assert np.all((fc.data > 0) & (fc.data < 1))


def test_guided_warm_start_matches_spatial_mean_taps():
    rng = np.random.default_rng(4)
    spatial, guided = SpatialAttention(rng), GuidedAttention(rng, 4)
    guided.warm_start(spatial)
    f = Tensor(rng.standard_normal((4, 4, 4)))
    spatial.conv.data[..., 0, :] = 0.0
    _, fc_u = spatial_attention_forward(spatial, f)
    _, fc_g = guided_spatial_attention(guided, f, np.zeros((64, 64, 1)))
    np.testing.assert_allclose(fc_g.data, fc_u.data, rtol=1e-13)


# -- fusion, discriminator, threshold -------------------------------------------------------
def test_fuse_outputs_contract():
    rng = np.random.default_rng(0)
    u, g = rng.uniform(0, 1, (64, 64, 1)), rng.uniform(0, 1, (64, 64, 1))
    fused = fuse_outputs(u, g)
    assert fused.shape == (64, 64, 2)
    a, b = ops.split_channels(fused, [1, 1])
    assert a.data.tobytes() == u.tobytes() and b.data.tobytes() == g.tobytes()
    zero = fuse_outputs(u, np.zeros_like(u))
    assert zero.data[..., :1].tobytes() == u.tobytes()
    with pytest.raises(ShapeError):
        fuse_outputs(u, np.zeros((32, 32, 1)))


def test_discriminator_contract():
    head = DiscriminatorHead(np.random.default_rng(0))
    y = discriminator_forward(head, np.random.default_rng(1).uniform(0, 1, (64, 64, 2)))
    assert y.shape == (64, 64, 1)
    assert np.all((y.data > 0) & (y.data < 1))
    assert np.all(discriminator_forward(_zero(head), np.ones((8, 8, 2))).data == 0.5)


def test_discriminator_gradcheck():
    rng = np.random.default_rng(2)
    head = DiscriminatorHead(rng, 4)
    x = Tensor(rng.uniform(-1, 1, (8, 8, 2)), requires_grad=True)
    w = rng.standard_normal((8, 8, 1))
    res = gradcheck(lambda: random_projection_loss(discriminator_forward(head, x), w), [x, *head.parameters()], max_coords=40, rng=rng)
    assert res.max_rel_err < 1e-5


def test_threshold_binarize_cases():
    assert HOTSPOT_THRESHOLD == 0.1
    assert threshold_binarize(np.array([0.1])).tolist() == [1.0]
    assert threshold_binarize(np.array([0.0999])).tolist() == [0.0]
    assert np.all(threshold_binarize(np.ones((4, 4, 1))) == 1.0)


# -- end to end -------------------------------------------------------------------------
def test_magnet_forward_empty_graph_and_ranges():
    model = MAGNet(UNetConfig(tile_size=32, base_filters=2, seed=1))
    x = np.random.default_rng(0).uniform(0, 1, (32, 32, 9))
    with no_grad():
        out = magnet_forward(model, x, build_graph_from_pins([], 32, 3, 8.0))
    assert not out.gnn_map.data.any()
    for m in (out.density_map, out.prob_map):
        assert m.shape == (32, 32, 1) and np.all((m.data > 0) & (m.data < 1))
    assert set(np.unique(out.binary_map)) <= {0.0, 1.0}


def test_magnet_forward_deterministic():
    rng = np.random.default_rng(5)
    graph = build_graph_from_pins(random_pins(rng, 12, 32), 32, 3, 8.0)
    x = rng.uniform(0, 1, (32, 32, 9))
    a = magnet_forward(MAGNet(UNetConfig(tile_size=32, base_filters=2, seed=2)), x, graph)
    b = magnet_forward(MAGNet(UNetConfig(tile_size=32, base_filters=2, seed=2)), x, graph)
    for name in ("density_map", "gnn_map", "prob_map"):
        assert getattr(a, name).data.tobytes() == getattr(b, name).data.tobytes()
    assert a.binary_map.tobytes() == b.binary_map.tobytes()
    assert a.gnn_map.data.any()


def test_magnet_zero_guidance_matches_unguided_channel_path():
    model = MAGNet(UNetConfig(tile_size=32, base_filters=2, seed=3))
    f = Tensor(np.random.default_rng(0).standard_normal((2, 2, 16)))
    model.guided.w_s.data[...] = 5.0
    a = guided_channel_attention(model.unet.channel_att, model.guided.w_s, f, np.zeros((32, 32, 1)))[1]
    b = channel_attention_forward(model.unet.channel_att, f)[1]
    assert a.data.tobytes() == b.data.tobytes()
