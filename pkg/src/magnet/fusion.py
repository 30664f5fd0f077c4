"""Map-guided attention, output fusion and the discriminator head.

In joint mode the bottleneck attention of the MD-Unet is replaced by two
guided variants that also look at the GNN guidance map ``S``::

    a   = sigmoid(MLP(mean_hw F + W_s * mean(S)))        channel
    F_c = sigmoid(conv7([mean_c F; avgpool16(S)]))       spatial

The MLP is the one the MD-Unet channel attention already owns, so a zero
guidance map reproduces the unguided channel gate exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .gnn import GnnParams, gnn_forward, project_tile
from .graph import TileGraph
from .nn import Module, conv_param, he_normal, zeros_param
from .tensor import Parameter, ShapeError, Tensor
from .unet import ChannelAttention, MDUnet, SpatialAttention, UNetConfig

HOTSPOT_THRESHOLD = 0.1


class GuidedAttention(Module):
    def __init__(self, rng, channels: int, kernel: int = 7):
        self.w_s = zeros_param("", channels, 1)
        self.conv = Parameter(he_normal(rng, (kernel, kernel, 2, 1), kernel * kernel * 2))
        self.bias = zeros_param("", 1)

    def warm_start(self, spatial: SpatialAttention) -> None:
        """Seed the F-channel of the guided conv from a pretrained spatial attention.

        The mean-map taps are copied over and the S taps start at zero.
        """
        self.conv.data[..., 0, :] = spatial.conv.data[..., 1, :]
        self.conv.data[..., 1, :] = 0.0
        self.bias.data[...] = spatial.bias.data


class DiscriminatorHead(Module):
    def __init__(self, rng, hidden: int = 16):
        self.conv1 = conv_param(rng, "", 3, 2, hidden)
        self.b1 = zeros_param("", hidden)
        self.conv2 = conv_param(rng, "", 1, hidden, 1)
        self.b2 = zeros_param("", 1)


def _pool_to(s: Tensor, size: int) -> Tensor:
    if s.shape[-2] != s.shape[-3] or s.shape[-3] % size:
        raise ShapeError(f"guidance map {s.shape} cannot be pooled to {size}x{size}")
    factor = s.shape[-3] // size
    return ops.avg_pool(s, factor) if factor > 1 else s


def guided_channel_attention(att: ChannelAttention, w_s: Tensor, f: Tensor, s) -> tuple[Tensor, Tensor]:
    """Return ``(a * F, a)`` where ``a`` also sees the globally pooled guidance map."""
    s = s if isinstance(s, Tensor) else Tensor(s)
    if f.shape[-1] != att.channels or w_s.shape != (att.channels, 1):
        raise ShapeError(f"guided channel attention: F {f.shape}, W_s {w_s.shape}, C={att.channels}")
    z = ops.global_avg_pool(f)
    zs = ops.linear(ops.global_avg_pool(s), w_s)
    a = ops.sigmoid(att.mlp(ops.add(z, zs)))
    return ops.scale_channels(f, a), a


def guided_spatial_attention(guided: GuidedAttention, f: Tensor, s) -> tuple[Tensor, Tensor]:
    """Return ``(F * F_c, F_c)`` with the guidance map as a second conv input."""
    s = s if isinstance(s, Tensor) else Tensor(s)
    s_b = _pool_to(s, f.shape[-2])
    if s_b.shape[-3:-1] != f.shape[-3:-1]:
        raise ShapeError(f"guidance {s_b.shape} does not align with features {f.shape}")
    avg = ops.mean(f, axis=-1, keepdims=True)
    fc = ops.sigmoid(ops.conv2d(ops.concat_channels(avg, s_b), guided.conv, guided.bias))
    return ops.scale_spatial(f, fc), fc


def fuse_outputs(unet_map, gnn_map) -> Tensor:
    unet_map = unet_map if isinstance(unet_map, Tensor) else Tensor(unet_map)
    gnn_map = gnn_map if isinstance(gnn_map, Tensor) else Tensor(gnn_map)
    if unet_map.shape != gnn_map.shape or unet_map.shape[-1] != 1:
        raise ShapeError(f"cannot fuse {unet_map.shape} with {gnn_map.shape}")
    return ops.concat_channels(unet_map, gnn_map)


def discriminator_forward(head: DiscriminatorHead, fused) -> Tensor:
    fused = fused if isinstance(fused, Tensor) else Tensor(fused)
    if fused.shape[-1] != 2:
        raise ShapeError(f"discriminator expects 2 channels, got {fused.shape[-1]}")
    h = ops.relu(ops.conv2d(fused, head.conv1, head.b1))
    return ops.sigmoid(ops.conv2d(h, head.conv2, head.b2))


def threshold_binarize(prob_map, thresh: float = HOTSPOT_THRESHOLD) -> np.ndarray:
    p = prob_map.data if isinstance(prob_map, Tensor) else np.asarray(prob_map, dtype=np.float64)
    return (p >= thresh).astype(np.float64)


class MAGNet(Module):
    """MD-Unet, GNN, guided attention and discriminator under one parameter namespace."""

    def __init__(self, config: UNetConfig):
        self.config = config
        self.unet = MDUnet(config)
        self.gnn = GnnParams(seed=config.seed)
        rng = np.random.default_rng([config.seed, 3])
        self.guided = GuidedAttention(rng, config.ladder[-1], config.spatial_kernel)
        self.disc = DiscriminatorHead(rng)
        for name, p in self.named_parameters():
            p.name = name

    def unet_parameters(self) -> list[Parameter]:
        return self.unet.parameters()

    def guided_attention(self, s: Tensor):
        def attend(f: Tensor) -> Tensor:
            f, _ = guided_channel_attention(self.unet.channel_att, self.guided.w_s, f, s)
            f, _ = guided_spatial_attention(self.guided, f, s)
            return f

        return attend


@dataclass
class MagnetOutput:
    density_map: Tensor  # MD-Unet branch, S x S x 1
    gnn_map: Tensor  # projected node scalars, S x S x 1
    prob_map: Tensor  # discriminator output, S x S x 1
    binary_map: np.ndarray  # 0.0 / 1.0

    def as_dict(self) -> dict:
        return {"density_map": self.density_map, "prob_map": self.prob_map, "binary_map": self.binary_map}


def magnet_forward(model: MAGNet, features, graph: TileGraph, thresh: float = HOTSPOT_THRESHOLD) -> MagnetOutput:
    """Full pipeline for one tile: GNN projection guides the MD-Unet, then both maps are fused."""
    s = model.config.tile_size
    if graph.tile_size != s:
        raise ShapeError(f"graph tile_size {graph.tile_size} != model tile_size {s}")
    gnn_map = project_tile(gnn_forward(model.gnn, graph), graph)
    density = model.unet.forward(features, attention=model.guided_attention(gnn_map))
    prob = discriminator_forward(model.disc, fuse_outputs(density, gnn_map))
    return MagnetOutput(density, gnn_map, prob, threshold_binarize(prob, thresh))
