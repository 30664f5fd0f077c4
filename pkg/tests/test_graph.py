import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magnet.data import Pin, SynthConfig, synth_generate
from magnet.graph import (
    HORIZONTAL,
    VERTICAL,
    TileGraph,
    brute_force_edges,
    build_graph_from_pins,
    build_guidance_map,
    build_tile_graph,
    direction_flag,
    net_mst_neighbors,
    node_coord_feature,
    obstacle_density,
)


def _graph(pins, size=64, thresh=8.0, layers=3, gx=0, gy=0):
    return build_graph_from_pins(pins, size, layers, thresh, gx, gy)


pin_strategy = st.builds(
    lambda x, y, w, h, layer, net: Pin(x, y, x + w, y + h, layer=layer, net_id=net),
    st.integers(0, 28),
    st.integers(0, 28),
    st.integers(1, 3),
    st.integers(1, 3),
    st.integers(1, 3),
    st.integers(0, 4),
)


# -- build_tile_graph ----------------------------------------------------------
def test_empty_tile_gives_empty_graph():
    g = _graph([])
    assert g.is_empty and g.n_nodes == 0 and len(g.edge_index) == 0
    assert json_round_trip(g).is_empty


def test_half_threshold_pair():
    pins = [Pin(10, 10, 12, 12, layer=1), Pin(14, 10, 16, 12, layer=1)]
    g = _graph(pins, thresh=8.0)
    assert g.edge_set() == {(0, 1), (1, 0)}
    np.testing.assert_allclose(g.edge_feats[:, 0], [0.5, 0.5])


def test_exact_threshold_excluded():
    pins = [Pin(10, 10, 12, 12, layer=2), Pin(18, 10, 20, 12, layer=2)]
    assert _graph(pins, thresh=8.0).edge_set() == set()
    assert _graph(pins, thresh=8.0 + 1e-9).edge_set() == {(0, 1), (1, 0)}


def test_different_layers_never_connect():
    pins = [Pin(10, 10, 12, 12, layer=1), Pin(10, 10, 12, 12, layer=2)]
    assert _graph(pins).edge_set() == set()


# -- node features --------------------------------------------------------------
def test_node_coord_feature_cases():
    pin = Pin(31, 9, 33, 11, layer=2)
    assert node_coord_feature(pin, HORIZONTAL, 64) == 0.5
    assert node_coord_feature(pin, VERTICAL, 64) == 10 / 64
    corner = Pin(0, 0, 2, 2)
    assert node_coord_feature(corner, HORIZONTAL, 64) == 1 / 64
    assert node_coord_feature(corner, VERTICAL, 64) == 1 / 64


def test_obstacle_density_hand_cases():
    middle = Pin(4, 4, 8, 8, layer=2)
    above = Pin(0, 0, 10, 10, layer=3)
    below = Pin(20, 20, 22, 22, layer=1)
    assert obstacle_density(middle, [middle, above, below], 3) == 0.5
    assert obstacle_density(middle, [middle, below], 3) == 0.0


def _raster_cover(target, others):
    size = 40
    cover = np.zeros((size, size), bool)
    for r in others:
        cover[r.y0 : r.y1, r.x0 : r.x1] = True
    return cover[target.y0 : target.y1, target.x0 : target.x1].sum()


@settings(max_examples=60, deadline=None)
@given(st.lists(pin_strategy, min_size=1, max_size=12), st.data())
def test_obstacle_density_matches_rasterization(pins, data):
    i = data.draw(st.integers(0, len(pins) - 1))
    target = pins[i]
    got = obstacle_density(target, pins, 3)
    fracs = []
    for layer in (target.layer - 1, target.layer + 1):
        if 1 <= layer <= 3:
            fracs.append(_raster_cover(target, [p for p in pins if p.layer == layer]) / target.area)
    expected = float(np.mean(fracs)) if fracs else 0.0
    assert abs(got - expected) < 1.0 / target.area


# -- direction flag -------------------------------------------------------------
def test_direction_flag_vertical_two_pin_net():
    pins = [Pin(10, 10, 12, 12, layer=1, net_id=0), Pin(10, 14, 12, 16, layer=1, net_id=0)]
    mst = net_mst_neighbors(pins)
    assert direction_flag(0, 1, pins, mst) == 1
    assert direction_flag(1, 0, pins, mst) == 0


def test_direction_flag_single_pin_net():
    pins = [Pin(10, 10, 12, 12, layer=1, net_id=0), Pin(10, 14, 12, 16, layer=1, net_id=1)]
    mst = net_mst_neighbors(pins)
    assert direction_flag(0, 1, pins, mst) == 0
    assert direction_flag(1, 0, pins, mst) == 0


def test_mst_is_spanning_tree_per_net():
    rng = np.random.default_rng(0)
    pins = [Pin(int(x), int(y), int(x) + 1, int(y) + 1, net_id=int(n)) for x, y, n in rng.integers(0, 20, (15, 3)) % [20, 20, 3]]
    mst = net_mst_neighbors(pins)
    for net in {p.net_id for p in pins}:
        members = [i for i, p in enumerate(pins) if p.net_id == net]
        edges = sum(len([j for j in mst[i] if j in members]) for i in members) // 2
        assert edges == len(members) - 1


# -- brute force oracle ------------------------------------------------------------
def test_brute_force_degenerate_sets():
    assert brute_force_edges([], 8.0) == set()
    assert brute_force_edges([Pin(0, 0, 1, 1)], 8.0) == set()
    pins = [Pin(0, 0, 1, 1, layer=1), Pin(1, 0, 2, 1, layer=2), Pin(0, 1, 1, 2, layer=3)]
    assert brute_force_edges(pins, 8.0) == set()


@settings(max_examples=60, deadline=None)
@given(st.lists(pin_strategy, max_size=30), st.floats(0.5, 20.0))
def test_builder_equals_brute_force(pins, thresh):
    g = _graph(pins, size=32, thresh=thresh)
    assert g.edge_set() == brute_force_edges(pins, thresh)
    for (s, d), (dist, flag) in zip(g.edge_index, g.edge_feats):
        assert pins[s].layer == pins[d].layer
        (ax, ay), (bx, by) = pins[s].center, pins[d].center
        assert math.hypot(ax - bx, ay - by) < thresh
        assert 0 <= dist < 1 and flag in (0.0, 1.0)


def json_round_trip(g):
    return TileGraph.from_json(g.to_json())


def test_graph_json_round_trip():
    tile = synth_generate(SynthConfig(tiles=1, tile_size=32, seed=2)).tiles[0]
    g = build_tile_graph(tile, 6.0)
    back = json_round_trip(g)
    for name in ("node_feats", "edge_index", "edge_feats", "centers"):
        assert getattr(back, name).tobytes() == getattr(g, name).tobytes()


# -- guidance map ---------------------------------------------------------------
def test_guidance_all_empty():
    graphs = [_graph([], size=16, gx=i) for i in range(2)]
    gm = build_guidance_map(graphs)
    assert gm.grid.shape == (16, 32, 1)
    assert not gm.grid.any()


def test_guidance_single_tile():
    pins = [Pin(1, 1, 2, 2), Pin(5, 5, 6, 6), Pin(9, 9, 10, 10)]
    gm = build_guidance_map([_graph(pins, size=16)])
    assert np.all(gm.grid == 1.0)


def test_guidance_two_tiles():
    g0 = _graph([Pin(1, 1, 2, 2)], size=16, gx=0)
    g1 = _graph([Pin(1, 1, 2, 2), Pin(4, 4, 5, 5)], size=16, gx=1)
    gm = build_guidance_map([g0, g1])
    assert np.all(gm.region(0, 0) == 0.5)
    assert np.all(gm.region(1, 0) == 1.0)


def test_guidance_rejects_overlap():
    with pytest.raises(ValueError):
        build_guidance_map([_graph([], size=16), _graph([], size=16)])
