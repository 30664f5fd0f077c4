"""Finite-difference gradient suite over every differentiable op and a micro network."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .data import Pin
from .fusion import (
    DiscriminatorHead,
    GuidedAttention,
    MAGNet,
    discriminator_forward,
    guided_channel_attention,
    guided_spatial_attention,
    magnet_forward,
)
from .gnn import GnnLayer, GnnParams, edge_message, gnn_forward, node_update
from .gradcheck import GradcheckResult, gradcheck, random_projection_loss
from .graph import build_graph_from_pins
from .nn import Module
from .tensor import Parameter, Tensor
from .unet import ChannelAttention, MSCMBlock, SpatialAttention, UNetConfig, channel_attention_forward, mscm_forward
from .unet import spatial_attention_forward

PRIMITIVE_TOL = 1e-5
NETWORK_TOL = 1e-4

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.uniform(-1.0, 1.0, shape), requires_grad=True)


def _projected(rng, make: Callable[[], Tensor]) -> Callable[[], Tensor]:
    w = rng.standard_normal(make().shape)
    return lambda: random_projection_loss(make(), w)


def _unary(op, shape=(3, 4, 2)) -> Case:
    def case(rng):
        x = _t(rng, *shape)
        return _projected(rng, lambda: op(x)), [x]

    return case


def _binary(op, shape_b) -> Case:
    def case(rng):
        a, b = _t(rng, 3, 4, 2), _t(rng, *shape_b)
        return _projected(rng, lambda: op(a, b)), [a, b]

    return case


def _conv(padding: str, stride: int, k: int) -> Case:
    def case(rng):
        x, w, b = _t(rng, 4, 4, 2), _t(rng, k, k, 2, 3), _t(rng, 3)
        return _projected(rng, lambda: ops.conv2d(x, w, b, padding=padding, stride=stride)), [x, w, b]

    return case


def _tconv(rng):
    x, w, b = _t(rng, 3, 3, 2), _t(rng, 2, 2, 2, 3), _t(rng, 3)
    return _projected(rng, lambda: ops.transposed_conv2d(x, w, b)), [x, w, b]


def _linear(rng):
    x, w, b = _t(rng, 5, 4), _t(rng, 3, 4), _t(rng, 3)
    return _projected(rng, lambda: ops.linear(x, w, b)), [x, w, b]


def _segment(op) -> Case:
    def case(rng):
        v = _t(rng, 7, 3)
        seg = rng.integers(0, 4, size=7)
        return _projected(rng, lambda: op(v, seg, 5)), [v]

    return case


def _take_rows(rng):
    v = _t(rng, 4, 3)
    idx = rng.integers(0, 4, size=6)
    return _projected(rng, lambda: ops.take_rows(v, idx)), [v]


def _mse(rng):
    p, y = _t(rng, 4, 4, 1), rng.uniform(0, 1, (4, 4, 1))
    return (lambda: ops.mse_loss(p, y)), [p]


def _bce(rng):
    p = Tensor(rng.uniform(0.05, 0.95, (4, 4, 1)), requires_grad=True)
    y = (rng.uniform(0, 1, (4, 4, 1)) > 0.5).astype(float)
    return (lambda: ops.bce_loss(p, y)), [p]


def _chain(rng):
    x, w, lw, lb = _t(rng, 4, 4, 2), _t(rng, 3, 3, 2, 2), _t(rng, 3, 8), _t(rng, 3)

    def make():
        h = ops.max_pool2(ops.relu(ops.conv2d(x, w)))
        return ops.linear(ops.reshape(h, (8,)), lw, lb)

    return _projected(rng, make), [x, w, lw, lb]


def _mscm(rng):
    block = MSCMBlock(rng, 2, 3)
    x = _t(rng, 8, 8, 2)
    return _projected(rng, lambda: mscm_forward(block, x)), [x, *block.parameters()]


def _channel_att(rng):
    att = ChannelAttention(rng, 4, 2)
    for p in att.parameters():
        p.data = rng.uniform(-1, 1, p.shape)
    x = _t(rng, 4, 4, 4)
    return _projected(rng, lambda: channel_attention_forward(att, x)[0]), [x, *att.parameters()]


def _spatial_att(rng):
    att = SpatialAttention(rng, 3)
    x = _t(rng, 5, 5, 3)
    return _projected(rng, lambda: spatial_attention_forward(att, x)[0]), [x, *att.parameters()]


def _guided_channel(rng):
    att = ChannelAttention(rng, 4, 2)
    w_s = Parameter(rng.uniform(-1, 1, (4, 1)))
    x, s = _t(rng, 2, 2, 4), _t(rng, 32, 32, 1)
    return _projected(rng, lambda: guided_channel_attention(att, w_s, x, s)[0]), [x, s, w_s, *att.parameters()]


def _guided_spatial(rng):
    guided = GuidedAttention(rng, 4, 3)
    x, s = _t(rng, 2, 2, 4), _t(rng, 32, 32, 1)
    return _projected(rng, lambda: guided_spatial_attention(guided, x, s)[0]), [x, s, guided.conv, guided.bias]


def _discriminator(rng):
    head = DiscriminatorHead(rng, 4)
    x = _t(rng, 8, 8, 2)
    return _projected(rng, lambda: discriminator_forward(head, x)), [x, *head.parameters()]


def _edge_message(rng):
    layer = GnnLayer(rng, 3, 4, hidden=5, d_emb=4)
    vi, vj, e = _t(rng, 6, 3), _t(rng, 6, 3), _t(rng, 6, 2)
    return _projected(rng, lambda: edge_message(layer, vi, vj, e)), [vi, vj, e, layer.f_w1, layer.f_b1, layer.f_w2]


def _node_update(rng):
    layer = GnnLayer(rng, 3, 4, hidden=5, d_emb=4)
    e, v = _t(rng, 6, 4), _t(rng, 6, 3)
    return _projected(rng, lambda: node_update(layer, e, v)), [e, v, layer.g_w, layer.g_b]


def _generic(rng, module: Module, scale: float = 0.5) -> None:
    """Fill all-zero (freshly initialised) parameters with small random values.

    Zero biases put hidden ReLUs of nodes with no input exactly on the kink,
    where the central difference sees half a slope.
    """
    for p in module.parameters():
        if not p.data.any():
            p.data = rng.uniform(-scale, scale, p.shape)


def random_pins(rng, n: int, size: int, n_layers: int = 3) -> list[Pin]:
    pins = []
    for _ in range(n):
        w, h = rng.integers(1, 4, size=2)
        x0, y0 = rng.integers(0, size - 3, size=2)
        pins.append(Pin(int(x0), int(y0), int(x0 + w), int(y0 + h), int(rng.integers(1, n_layers + 1)), int(rng.integers(0, 3))))
    return pins


def _gnn(rng):
    params = GnnParams(seed=int(rng.integers(1 << 30)), dims=(3, 4, 4, 4), hidden=6, d_emb=4)
    _generic(rng, params)
    graph = build_graph_from_pins(random_pins(rng, 7, 16), 16, 3, 8.0, 0, 0)
    return (lambda: gnn_forward(params, graph).scalars.sum()), params.parameters()


def micro_config(seed: int = 0) -> UNetConfig:
    return UNetConfig(tile_size=16, base_filters=2, reduction=16, spatial_kernel=7, seed=seed)


def _micro_net(rng):
    model = MAGNet(micro_config(int(rng.integers(1 << 30))))
    _generic(rng, model, 0.1)
    graph = build_graph_from_pins(random_pins(rng, 8, 16), 16, 3, 8.0, 0, 0)
    x = Tensor(rng.uniform(0, 1, (16, 16, 9)), requires_grad=True)
    w = rng.standard_normal((16, 16, 1))

    def make():
        out = magnet_forward(model, x, graph)
        return ops.add(random_projection_loss(out.prob_map, w), random_projection_loss(out.density_map, w))

    return make, [x, *model.parameters()]


PRIMITIVES: dict[str, Case] = {
    "add": _binary(ops.add, (4, 2)),
    "sub": _binary(ops.sub, (3, 4, 2)),
    "mul": _binary(ops.mul, (1, 4, 2)),
    "relu": _unary(ops.relu),
    "sigmoid": _unary(ops.sigmoid),
    "linear": _linear,
    "conv2d_same": _conv("same", 1, 3),
    "conv2d_valid": _conv("valid", 1, 3),
    "conv2d_stride2": _conv("same", 2, 3),
    "conv2d_1x1": _conv("same", 1, 1),
    "transposed_conv2d": _tconv,
    "max_pool2": _unary(ops.max_pool2, (4, 6, 2)),
    "avg_pool": _unary(lambda x: ops.avg_pool(x, 2), (4, 6, 2)),
    "global_avg_pool": _unary(ops.global_avg_pool),
    "channel_stat_maps": _unary(ops.channel_stat_maps),
    "concat_channels": _binary(ops.concat_channels, (3, 4, 3)),
    "scale_channels": _binary(ops.scale_channels, (1, 1, 2)),
    "scale_spatial": _binary(ops.scale_spatial, (3, 4, 1)),
    "take_rows": _take_rows,
    "segment_sum": _segment(ops.segment_sum),
    "segment_mean": _segment(ops.segment_mean),
    "mse_loss": _mse,
    "bce_loss": _bce,
    "chain_conv_relu_pool_linear": _chain,
}

COMPONENTS: dict[str, Case] = {
    "mscm": _mscm,
    "channel_attention": _channel_att,
    "spatial_attention": _spatial_att,
    "guided_channel_attention": _guided_channel,
    "guided_spatial_attention": _guided_spatial,
    "discriminator": _discriminator,
    "edge_message": _edge_message,
    "node_update": _node_update,
    "gnn_forward": _gnn,
}


def run_case(name: str, case: Case, seed: int, max_coords: int | None = None) -> GradcheckResult:
    rng = np.random.default_rng([seed, 7])
    fn, inputs = case(rng)
    return gradcheck(fn, inputs, max_coords=max_coords, rng=rng, name=name)


def run_micro(seed: int, n_tensors: int = 6, coords: int = 3) -> GradcheckResult:
    """End-to-end check of the 16x16 micro network on a random subset of coordinates."""
    rng = np.random.default_rng([seed, 8])
    fn, inputs = _micro_net(rng)
    pick = [inputs[0]] + [inputs[i] for i in rng.choice(np.arange(1, len(inputs)), n_tensors, replace=False)]
    return gradcheck(fn, pick, max_coords=coords, rng=rng, name="micro_network")


def run_suite(seeds: int = 20, micro: bool = True) -> list[tuple[GradcheckResult, float]]:
    """All cases over ``seeds`` seeds; returns ``(worst result per case, tolerance)``."""
    out = []
    groups = [(PRIMITIVES, PRIMITIVE_TOL, None), (COMPONENTS, PRIMITIVE_TOL, 40)]
    for cases, tol, coords in groups:
        for name, case in cases.items():
            worst = max((run_case(name, case, s, coords) for s in range(seeds)), key=lambda r: r.max_rel_err)
            out.append((worst, tol))
    if micro:
        worst = max((run_micro(s) for s in range(seeds)), key=lambda r: r.max_rel_err)
        out.append((worst, NETWORK_TOL))
    return out
