"""Per-tile pin graphs and the tile-to-pixel guidance map.

One node per pin with features ``[coord_norm, layer_norm, obstacle_density]``;
directed edges in both directions between same-layer pins whose centres are
closer than the edge threshold, with features ``[dist_norm, dir_flag]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import LayoutTile, Pin

VERTICAL = "V"
HORIZONTAL = "H"


def routing_direction(layer: int) -> str:
    """Odd layers route vertically, even layers horizontally."""
    return VERTICAL if layer % 2 == 1 else HORIZONTAL


def node_coord_feature(pin: Pin, direction: str, tile_size: int) -> float:
    """Normalised x-centre on horizontal layers, y-centre on vertical layers."""
    cx, cy = pin.center
    return (cx if direction == HORIZONTAL else cy) / tile_size


def _covered_area(target: Pin, rects: Sequence[Pin]) -> float:
    """Area of ``target`` covered by the union of ``rects`` (coordinate compression)."""
    clipped = []
    for r in rects:
        x0, x1 = max(r.x0, target.x0), min(r.x1, target.x1)
        y0, y1 = max(r.y0, target.y0), min(r.y1, target.y1)
        if x0 < x1 and y0 < y1:
            clipped.append((x0, y0, x1, y1))
    if not clipped:
        return 0.0
    boxes = np.array(clipped)
    xs = np.unique(boxes[:, [0, 2]])
    ys = np.unique(boxes[:, [1, 3]])
    cover = np.zeros((len(ys) - 1, len(xs) - 1), dtype=bool)
    for x0, y0, x1, y1 in clipped:
        i0, i1 = np.searchsorted(xs, x0), np.searchsorted(xs, x1)
        j0, j1 = np.searchsorted(ys, y0), np.searchsorted(ys, y1)
        cover[j0:j1, i0:i1] = True
    cell = np.outer(np.diff(ys), np.diff(xs))
    return float(cell[cover].sum())


def obstacle_density(pin: Pin, all_pins: Sequence[Pin], n_layers: int | None = None) -> float:
    """Mean fraction of ``pin`` covered by pins on each existing adjacent layer."""
    if pin.area <= 0:
        raise ValueError(f"pin has zero area: {pin}")
    if n_layers is None:
        n_layers = max((p.layer for p in all_pins), default=pin.layer)
    fractions = []
    for layer in (pin.layer - 1, pin.layer + 1):
        if 1 <= layer <= n_layers:
            same = [p for p in all_pins if p.layer == layer]
            fractions.append(_covered_area(pin, same) / pin.area)
    return float(np.mean(fractions)) if fractions else 0.0


def _rectilinear(a: Pin, b: Pin) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return abs(ax - bx) + abs(ay - by)


def net_mst_neighbors(pins: Sequence[Pin]) -> list[list[int]]:
    """Adjacency of per-net rectilinear minimum spanning trees (Prim, index tie-break)."""
    neighbors: list[list[int]] = [[] for _ in pins]
    nets: dict[int, list[int]] = {}
    for i, p in enumerate(pins):
        nets.setdefault(p.net_id, []).append(i)
    for members in nets.values():
        if len(members) < 2:
            continue
        in_tree = {members[0]}
        best = {m: (_rectilinear(pins[members[0]], pins[m]), members[0]) for m in members[1:]}
        while best:
            nxt = min(best, key=lambda m: (best[m][0], m, best[m][1]))
            _, parent = best.pop(nxt)
            neighbors[nxt].append(parent)
            neighbors[parent].append(nxt)
            in_tree.add(nxt)
            for m in best:
                d = _rectilinear(pins[nxt], pins[m])
                if (d, nxt) < best[m]:
                    best[m] = (d, nxt)
    return [sorted(n) for n in neighbors]


def direction_flag(i: int, j: int, pins: Sequence[Pin], mst: Sequence[Sequence[int]]) -> int:
    """1 if ``i``'s tree edge toward the neighbour nearest ``j`` heads in the
    positive routing-axis direction (+y on vertical layers, +x on horizontal).

    Pins with no tree neighbours (single-pin nets) get 0. Ties on distance to
    ``j`` go to the lower pin index.
    """
    if not mst[i]:
        return 0
    pj = pins[j]
    nearest = min(mst[i], key=lambda n: (_rectilinear(pins[n], pj), n))
    axis = 1 if routing_direction(pins[i].layer) == VERTICAL else 0
    return int(pins[nearest].center[axis] > pins[i].center[axis])


def _center_distance(a: Pin, b: Pin) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def brute_force_edges(pins: Sequence[Pin], thresh: float) -> set[tuple[int, int]]:
    """Exhaustive pairwise edge rule: same layer and centre distance < ``thresh``."""
    edges = set()
    for i in range(len(pins)):
        for j in range(len(pins)):
            if i != j and pins[i].layer == pins[j].layer and _center_distance(pins[i], pins[j]) < thresh:
                edges.add((i, j))
    return edges


def _candidate_pairs(pins: Sequence[Pin], thresh: float) -> list[tuple[int, int]]:
    """Same-layer pairs within ``thresh`` found through a uniform hash grid."""
    buckets: dict[tuple[int, int, int], list[int]] = {}
    for i, p in enumerate(pins):
        cx, cy = p.center
        buckets.setdefault((p.layer, int(cx // thresh), int(cy // thresh)), []).append(i)
    pairs = []
    for (layer, bx, by), members in buckets.items():
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for j in buckets.get((layer, bx + dx, by + dy), ()):
                    for i in members:
                        if i != j and _center_distance(pins[i], pins[j]) < thresh:
                            pairs.append((i, j))
    return sorted(pairs)


@dataclass
class TileGraph:
    grid_x: int
    grid_y: int
    tile_size: int
    node_feats: np.ndarray  # (n, 3)
    edge_index: np.ndarray  # (E, 2) rows of (src, dst)
    edge_feats: np.ndarray  # (E, 2)
    centers: np.ndarray  # (n, 2) pin centres (x, y), tile-local pixels
    pin_refs: list[int] = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return len(self.node_feats) == 0

    @property
    def n_nodes(self) -> int:
        return len(self.node_feats)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(s), int(d)) for s, d in self.edge_index}

    def center_pixels(self) -> np.ndarray:
        """(n, 2) integer (col, row) of each node's pin centre."""
        return np.floor(self.centers).astype(np.int64).reshape(-1, 2)

    def permuted(self, perm: Sequence[int]) -> TileGraph:
        """Relabel nodes so old node ``perm[k]`` becomes new node ``k``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return TileGraph(
            self.grid_x,
            self.grid_y,
            self.tile_size,
            self.node_feats[perm],
            inv[self.edge_index] if len(self.edge_index) else self.edge_index.copy(),
            self.edge_feats.copy(),
            self.centers[perm],
            [self.pin_refs[k] for k in perm] if self.pin_refs else [],
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "tile": [self.grid_x, self.grid_y],
                "tile_size": self.tile_size,
                "is_empty": self.is_empty,
                "nodes": [
                    {"pin": int(r), "center": [float(v) for v in c], "features": [float(v) for v in f]}
                    for r, c, f in zip(self.pin_refs, self.centers, self.node_feats)
                ],
                "edges": [
                    {"src": int(s), "dst": int(d), "features": [float(v) for v in f]}
                    for (s, d), f in zip(self.edge_index, self.edge_feats)
                ],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> TileGraph:
        obj = json.loads(text)
        nodes, edges = obj["nodes"], obj["edges"]
        return cls(
            grid_x=int(obj["tile"][0]),
            grid_y=int(obj["tile"][1]),
            tile_size=int(obj["tile_size"]),
            node_feats=np.array([n["features"] for n in nodes], dtype=np.float64).reshape(-1, 3),
            edge_index=np.array([[e["src"], e["dst"]] for e in edges], dtype=np.int64).reshape(-1, 2),
            edge_feats=np.array([e["features"] for e in edges], dtype=np.float64).reshape(-1, 2),
            centers=np.array([n["center"] for n in nodes], dtype=np.float64).reshape(-1, 2),
            pin_refs=[int(n["pin"]) for n in nodes],
        )


def build_graph_from_pins(
    pins: Sequence[Pin],
    tile_size: int,
    n_layers: int,
    edge_thresh_px: float,
    grid_x: int = 0,
    grid_y: int = 0,
) -> TileGraph:
    if not edge_thresh_px > 0:
        raise ValueError(f"edge threshold must be positive, got {edge_thresh_px}")
    feats = [
        [
            node_coord_feature(p, routing_direction(p.layer), tile_size),
            p.layer / n_layers,
            obstacle_density(p, pins, n_layers),
        ]
        for p in pins
    ]
    mst = net_mst_neighbors(pins)
    pairs = _candidate_pairs(pins, edge_thresh_px)
    efeats = [
        [_center_distance(pins[s], pins[d]) / edge_thresh_px, direction_flag(s, d, pins, mst)]
        for s, d in pairs
    ]
    return TileGraph(
        grid_x=grid_x,
        grid_y=grid_y,
        tile_size=tile_size,
        node_feats=np.array(feats, dtype=np.float64).reshape(-1, 3),
        edge_index=np.array(pairs, dtype=np.int64).reshape(-1, 2),
        edge_feats=np.array(efeats, dtype=np.float64).reshape(-1, 2),
        centers=np.array([p.center for p in pins], dtype=np.float64).reshape(-1, 2),
        pin_refs=list(range(len(pins))),
    )


def build_tile_graph(tile: LayoutTile, edge_thresh_px: float = 8.0) -> TileGraph:
    """Pin graph for one tile; a pinless tile yields an empty graph."""
    return build_graph_from_pins(
        tile.pins, tile.tile_size, tile.n_layers, edge_thresh_px, tile.grid_x, tile.grid_y
    )


@dataclass
class GuidanceMap:
    grid: np.ndarray  # (H, W, 1) layout-pixel resolution
    provenance: np.ndarray  # (H, W) index of the producing graph, -1 where uncovered
    tile_size: int

    def region(self, grid_x: int, grid_y: int) -> np.ndarray:
        s = self.tile_size
        return self.grid[grid_y * s : (grid_y + 1) * s, grid_x * s : (grid_x + 1) * s]


def layout_dims(graphs: Sequence[TileGraph], tile_size: int) -> tuple[int, int]:
    cols = 1 + max((g.grid_x for g in graphs), default=0)
    rows = 1 + max((g.grid_y for g in graphs), default=0)
    return rows * tile_size, cols * tile_size


def _empty_guidance(graphs, dims, tile_size) -> GuidanceMap:
    h, w = dims
    if h % tile_size or w % tile_size:
        raise ValueError(f"layout dims {dims} are not a multiple of tile size {tile_size}")
    prov = np.full((h, w), -1, dtype=np.int64)
    for k, g in enumerate(graphs):
        if g.tile_size != tile_size:
            raise ValueError(f"graph tile size {g.tile_size} != {tile_size}")
        y0, x0 = g.grid_y * tile_size, g.grid_x * tile_size
        if y0 + tile_size > h or x0 + tile_size > w:
            raise ValueError(f"tile ({g.grid_x}, {g.grid_y}) lies outside layout {dims}")
        block = prov[y0 : y0 + tile_size, x0 : x0 + tile_size]
        if np.any(block >= 0):
            raise ValueError(f"tile ({g.grid_x}, {g.grid_y}) overlaps an earlier tile")
        block[...] = k
    return GuidanceMap(np.zeros((h, w, 1)), prov, tile_size)


def build_guidance_map(
    graphs: Sequence[TileGraph], dims: tuple[int, int] | None = None, tile_size: int | None = None
) -> GuidanceMap:
    """Structural prior: each tile region holds its node count over the max count."""
    if tile_size is None:
        if not graphs:
            raise ValueError("tile_size is required when there are no graphs")
        tile_size = graphs[0].tile_size
    dims = dims or layout_dims(graphs, tile_size)
    gmap = _empty_guidance(graphs, dims, tile_size)
    top = max((g.n_nodes for g in graphs), default=0)
    if top == 0:
        return gmap
    for g in graphs:
        gmap.region(g.grid_x, g.grid_y)[...] = g.n_nodes / top
    return gmap


def assemble_guidance(
    tile_maps: Sequence[np.ndarray], graphs: Sequence[TileGraph], dims=None
) -> GuidanceMap:
    """Place per-tile projected maps (S x S x 1) into a layout-level guidance map."""
    tile_size = graphs[0].tile_size if graphs else tile_maps[0].shape[0]
    dims = dims or layout_dims(graphs, tile_size)
    gmap = _empty_guidance(graphs, dims, tile_size)
    for g, m in zip(graphs, tile_maps):
        gmap.region(g.grid_x, g.grid_y)[...] = m
    return gmap
