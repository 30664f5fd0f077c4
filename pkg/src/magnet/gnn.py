"""Three-layer edge-conditioned message passing over tile pin graphs.

Per layer, for every directed edge ``src -> dst``::

    message = f(V_dst || V_src || e)        (MLP, ReLU)
    e_i     = sum of messages arriving at i
    V_i'    = f'(e_i || V_i)                 (linear, ReLU)

A linear + sigmoid readout turns each final node vector into a scalar, which
is then scattered onto the pin-centre pixel of its tile.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .graph import TileGraph, assemble_guidance
from .nn import Module, xavier_uniform, zeros_param
from .tensor import Parameter, ShapeError, Tensor

NODE_DIM = 3
EDGE_DIM = 2


class GnnLayer(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, hidden: int = 32, d_emb: int = 16):
        self.d_in, self.d_out, self.d_emb = d_in, d_out, d_emb
        msg_in = 2 * d_in + EDGE_DIM
        self.f_w1 = Parameter(xavier_uniform(rng, hidden, msg_in))
        self.f_b1 = zeros_param("", hidden)
        self.f_w2 = Parameter(xavier_uniform(rng, d_emb, hidden))
        self.f_b2 = zeros_param("", d_emb)
        self.g_w = Parameter(xavier_uniform(rng, d_out, d_emb + d_in))
        self.g_b = zeros_param("", d_out)


class GnnParams(Module):
    def __init__(self, seed: int = 0, dims=(NODE_DIM, 16, 16, 16), hidden: int = 32, d_emb: int = 16):
        rng = np.random.default_rng([seed, 2])
        self.layers = [GnnLayer(rng, a, b, hidden, d_emb) for a, b in zip(dims[:-1], dims[1:])]
        self.readout_w = Parameter(xavier_uniform(rng, 1, dims[-1]))
        self.readout_b = zeros_param("", 1)
        for name, p in self.named_parameters():
            p.name = name


@dataclass
class NodeEmbedding:
    layers: list[Tensor]  # node vectors after each layer, (n, d)
    scalars: Tensor  # (n, 1) readout in (0, 1)

    @property
    def n_nodes(self) -> int:
        return self.scalars.shape[0]


def edge_message(layer: GnnLayer, v_i: Tensor, v_j: Tensor, e_ij) -> Tensor:
    """``f(V_i || V_j || e_ij)`` for a batch of edges (rows)."""
    v_i, v_j, e_ij = (x if isinstance(x, Tensor) else Tensor(x) for x in (v_i, v_j, e_ij))
    if v_i.shape[-1] != layer.d_in or v_j.shape[-1] != layer.d_in or e_ij.shape[-1] != EDGE_DIM:
        raise ShapeError(f"edge_message dims {v_i.shape}, {v_j.shape}, {e_ij.shape} vs layer d_in={layer.d_in}")
    h = ops.concat([v_i, v_j, e_ij], axis=-1)
    h = ops.relu(ops.linear(h, layer.f_w1, layer.f_b1))
    return ops.relu(ops.linear(h, layer.f_w2, layer.f_b2))


def aggregate(messages: Tensor, dst: np.ndarray, n_nodes: int) -> Tensor:
    """Sum of incoming messages per node; nodes without in-edges get zeros."""
    return ops.segment_sum(messages, dst, n_nodes)


def node_update(layer: GnnLayer, e_i: Tensor, v_i: Tensor) -> Tensor:
    """``f'(e_i || V_i)``."""
    if e_i.shape[-1] != layer.d_emb or v_i.shape[-1] != layer.d_in:
        raise ShapeError(f"node_update dims {e_i.shape}, {v_i.shape}")
    return ops.relu(ops.linear(ops.concat([e_i, v_i], axis=-1), layer.g_w, layer.g_b))


def gnn_forward(params: GnnParams, graph: TileGraph) -> NodeEmbedding:
    n = graph.n_nodes
    if n == 0:
        return NodeEmbedding(layers=[], scalars=Tensor(np.zeros((0, 1))))
    v = Tensor(graph.node_feats)
    src = graph.edge_index[:, 0] if len(graph.edge_index) else np.zeros(0, dtype=np.int64)
    dst = graph.edge_index[:, 1] if len(graph.edge_index) else np.zeros(0, dtype=np.int64)
    efeat = Tensor(graph.edge_feats.reshape(-1, EDGE_DIM))
    history = []
    for layer in params.layers:
        if len(src):
            msgs = edge_message(layer, ops.take_rows(v, dst), ops.take_rows(v, src), efeat)
            e = aggregate(msgs, dst, n)
        else:
            e = Tensor(np.zeros((n, layer.d_emb)))
        v = node_update(layer, e, v)
        history.append(v)
    scalars = ops.sigmoid(ops.linear(v, params.readout_w, params.readout_b))
    return NodeEmbedding(layers=history, scalars=scalars)


def project_tile(emb: NodeEmbedding, graph: TileGraph) -> Tensor:
    """Scatter node scalars to their pin-centre pixels (collisions averaged).

    Returns a ``tile_size x tile_size x 1`` map that is zero away from pins.
    """
    s = graph.tile_size
    if emb.n_nodes == 0:
        return Tensor(np.zeros((s, s, 1)))
    pix = graph.center_pixels()
    if np.any(pix < 0) or np.any(pix >= s):
        raise ValueError(f"pin centre outside the {s}x{s} tile")
    flat = pix[:, 1] * s + pix[:, 0]
    return ops.reshape(ops.segment_mean(emb.scalars, flat, s * s), (s, s, 1))


def project_to_grid(embeddings, graphs, dims=None):
    """Project every tile's embeddings and assemble the layout-level guidance map.

    Returns ``(guidance_map, tile_maps)`` where ``tile_maps`` are the per-tile
    differentiable projections.
    """
    tile_maps = [project_tile(e, g) for e, g in zip(embeddings, graphs)]
    gmap = assemble_guidance([m.data for m in tile_maps], graphs, dims)
    return gmap, tile_maps
