"""MD-Unet: a U-Net whose convolutions are multi-scale blocks, with channel and
spatial attention applied once at the bottleneck.

Layout for ``base_filters=b`` and channel ladder ``b, 2b, 4b, 8b``::

    encoder level k (k=0..3): MSCM -> ReLU -> max_pool2     (skip taken pre-pool)
    bottleneck (S/16):        channel attention -> spatial attention
    decoder stage d (d=1..4): up-conv x2 -> concat skip of level 4-d -> MSCM -> ReLU
    stage 5:                  3x3 conv -> ReLU -> 1x1 conv -> sigmoid
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .nn import Module, conv_param, he_normal, xavier_uniform, zeros_param
from .tensor import Parameter, ShapeError, Tensor

MSCM_KERNELS = (3, 5, 7)


@dataclass
class UNetConfig:
    tile_size: int = 64
    in_channels: int = 9
    base_filters: int = 16
    reduction: int = 16
    spatial_kernel: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.tile_size <= 0 or self.tile_size % 16:
            raise ValueError(f"tile_size must be a positive multiple of 16, got {self.tile_size}")

    @property
    def ladder(self) -> list[int]:
        return [self.base_filters * m for m in (1, 2, 4, 8)]

    @property
    def bottleneck_size(self) -> int:
        return self.tile_size // 16


class MSCMBlock(Module):
    """Parallel 3x3 / 5x5 / 7x7 convolutions mixed by learnable scalar weights."""

    def __init__(self, rng, cin: int, cout: int):
        self.cin, self.cout = cin, cout
        n = len(MSCM_KERNELS)
        self.kernels = [conv_param(rng, "", k, cin, cout) for k in MSCM_KERNELS]
        # with 1/n mix weights the branch sum would shrink He variance n-fold
        for kern in self.kernels:
            kern.data *= np.sqrt(n)
        self.biases = [zeros_param("", cout) for _ in MSCM_KERNELS]
        self.mix = Parameter(np.full(n, 1.0 / n))

    def branches(self, f: Tensor) -> list[Tensor]:
        return [ops.conv2d(f, k, b) for k, b in zip(self.kernels, self.biases)]


def mscm_forward(block: MSCMBlock, f: Tensor) -> Tensor:
    if f.shape[-1] != block.cin:
        raise ShapeError(f"MSCM expects {block.cin} channels, got {f.shape[-1]}")
    out = None
    for i, branch in enumerate(block.branches(f)):
        term = ops.mul(branch, ops.getitem(block.mix, i))
        out = term if out is None else ops.add(out, term)
    return out


class ChannelAttention(Module):
    def __init__(self, rng, channels: int, reduction: int = 16):
        r = reduction if channels >= reduction else channels
        if channels % r:
            raise ValueError(f"channels {channels} not divisible by reduction {r}")
        self.channels, self.reduction = channels, r
        hidden = channels // r
        self.w1 = Parameter(xavier_uniform(rng, hidden, channels))
        self.b1 = zeros_param("", hidden)
        self.w2 = Parameter(xavier_uniform(rng, channels, hidden))
        self.b2 = zeros_param("", channels)

    def mlp(self, z: Tensor) -> Tensor:
        """``w2 (w1 z + b1) + b2`` on the trailing axis (no inner nonlinearity)."""
        return ops.linear(ops.linear(z, self.w1, self.b1), self.w2, self.b2)


def channel_attention_forward(att: ChannelAttention, f: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(a_c * F, a_c)`` with ``a_c = sigmoid(mlp(mean_hw F))`` of shape 1x1xC."""
    if f.shape[-1] != att.channels:
        raise ShapeError(f"channel attention expects {att.channels} channels, got {f.shape[-1]}")
    a = ops.sigmoid(att.mlp(ops.global_avg_pool(f)))
    return ops.scale_channels(f, a), a


class SpatialAttention(Module):
    def __init__(self, rng, kernel: int = 7, in_maps: int = 2):
        self.conv = Parameter(he_normal(rng, (kernel, kernel, in_maps, 1), kernel * kernel * in_maps))
        self.bias = zeros_param("", 1)


def spatial_attention_forward(att: SpatialAttention, f: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(F * F_c, F_c)`` with ``F_c = sigmoid(conv([max_c F; mean_c F]))``."""
    fc = ops.sigmoid(ops.conv2d(ops.channel_stat_maps(f), att.conv, att.bias))
    return ops.scale_spatial(f, fc), fc


class MDUnet(Module):
    def __init__(self, config: UNetConfig):
        self.config = config
        rng = np.random.default_rng([config.seed, 1])
        c = config.ladder
        self.enc = [MSCMBlock(rng, cin, cout) for cin, cout in zip([config.in_channels] + c[:-1], c)]
        self.channel_att = ChannelAttention(rng, c[-1], config.reduction)
        self.spatial_att = SpatialAttention(rng, config.spatial_kernel)
        self.up = []
        self.up_bias = []
        self.dec = []
        prev = c[-1]
        for level in (3, 2, 1, 0):
            skip = c[level]
            out = c[level - 1] if level > 0 else c[0]
            self.up.append(conv_param_t(rng, prev, skip))
            self.up_bias.append(zeros_param("", skip))
            self.dec.append(MSCMBlock(rng, 2 * skip, out))
            prev = out
        self.refine = conv_param(rng, "", 3, prev, prev)
        self.refine_bias = zeros_param("", prev)
        self.head = conv_param(rng, "", 1, prev, 1)
        self.head_bias = zeros_param("", 1)
        for name, p in self.named_parameters():
            p.name = name

    def dam(self, f: Tensor) -> Tensor:
        f, _ = channel_attention_forward(self.channel_att, f)
        f, _ = spatial_attention_forward(self.spatial_att, f)
        return f

    def encode(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        skips = []
        for block in self.enc:
            x = ops.relu(mscm_forward(block, x))
            skips.append(x)
            x = ops.max_pool2(x)
        return x, skips

    def decode(self, x: Tensor, skips: list[Tensor]) -> Tensor:
        for stage, (k, b, block) in enumerate(zip(self.up, self.up_bias, self.dec)):
            x = ops.transposed_conv2d(x, k, b)
            x = ops.concat_channels(x, skips[3 - stage])
            x = ops.relu(mscm_forward(block, x))
        x = ops.relu(ops.conv2d(x, self.refine, self.refine_bias))
        return ops.sigmoid(ops.conv2d(x, self.head, self.head_bias))

    def forward(self, x, attention: Callable[[Tensor], Tensor] | None = None) -> Tensor:
        """Map ``S x S x C_in`` (optionally batched) features to an ``S x S x 1`` map.

        ``attention`` replaces the bottleneck DAM when given.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        s, cin = self.config.tile_size, self.config.in_channels
        if x.shape[-3:] != (s, s, cin):
            raise ShapeError(f"MD-Unet expects ... x {s} x {s} x {cin}, got {x.shape}")
        bottom, skips = self.encode(x)
        bottom = (attention or self.dam)(bottom)
        return self.decode(bottom, skips)

    __call__ = forward


def conv_param_t(rng, cin: int, cout: int) -> Parameter:
    """2x2 up-convolution kernel, He-initialised on its input fan."""
    return Parameter(he_normal(rng, (2, 2, cin, cout), cin))


def mdunet_forward(model: MDUnet, features) -> Tensor:
    return model.forward(features)
