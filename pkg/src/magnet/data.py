"""Layout tiles, the congestion label oracle and a synthetic tile generator.

Each tile carries a channels-last feature stack built from per-layer pin and
obstacle geometry. For the default three routing layers the nine channels are

    0-2  per-layer pin density (3x3 mean of pin coverage)
    3-5  per-layer obstacle mask (macros block every layer)
    6    windowed congestion (pin centres within Chebyshev radius 4, / 24)
    7    macro mask
    8    net density (net bounding boxes covering the pixel, / 4)

and the label is the congestion oracle evaluated from the same geometry.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .npy import load_array, save_npy

LABEL_RADIUS = 2
LABEL_PIN_SCALE = 12.0
CONGESTION_RADIUS = 4
CONGESTION_SCALE = 24.0
NET_DENSITY_SCALE = 4.0
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle covering ``x0 <= x < x1``, ``y0 <= y < y1`` (pixels)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate rectangle {self}")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0

    @property
    def center_pixel(self) -> tuple[int, int]:
        """(col, row) of the pixel holding the centre."""
        cx, cy = self.center
        return int(math.floor(cx)), int(math.floor(cy))

    def within(self, size: int) -> bool:
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 <= size and self.y1 <= size


@dataclass(frozen=True)
class Pin(Rect):
    layer: int = 1
    net_id: int = 0


@dataclass(frozen=True)
class Obstacle(Rect):
    layer: int = 1


@dataclass
class LayoutTile:
    grid_x: int
    grid_y: int
    features: np.ndarray
    label: np.ndarray
    pins: list[Pin]
    obstacles: list[Obstacle] = field(default_factory=list)
    macros: list[Rect] = field(default_factory=list)
    n_layers: int = 3

    def __post_init__(self):
        h, w = self.features.shape[:2]
        if h != w:
            raise ValueError(f"tiles must be square, got {h}x{w}")
        if self.label.shape != (h, w, 1):
            raise ValueError(f"label shape {self.label.shape} does not match features {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite feature values")
        for pin in self.pins:
            if not pin.within(h):
                raise ValueError(f"pin outside tile: {pin}")
            if not 1 <= pin.layer <= self.n_layers:
                raise ValueError(f"pin layer {pin.layer} outside [1, {self.n_layers}]")

    @property
    def tile_size(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    tiles: list[LayoutTile]
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tiles)

    def __iter__(self):
        return iter(self.tiles)


@dataclass
class SynthConfig:
    tiles: int = 64
    tile_size: int = 64
    n_layers: int = 3
    pin_rate: float = 14.0  # expected pins per 32x32 px
    obstacle_rate: float = 1.5  # expected obstacle rectangles per 32x32 px per layer
    macro_prob: float = 0.3
    seed: int = 0


# ---------------------------------------------------------------------------
# rasterisation helpers
# ---------------------------------------------------------------------------
def _box_sum(a: np.ndarray, r: int) -> np.ndarray:
    """Sum over the (2r+1)x(2r+1) neighbourhood with zero padding."""
    p = np.pad(a, r)
    c = np.zeros((p.shape[0] + 1, p.shape[1] + 1))
    c[1:, 1:] = p.cumsum(0).cumsum(1)
    k = 2 * r + 1
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


def _raster(rects, size: int) -> np.ndarray:
    m = np.zeros((size, size))
    for r in rects:
        x0, y0 = int(math.floor(r.x0)), int(math.floor(r.y0))
        x1, y1 = int(math.ceil(r.x1)), int(math.ceil(r.y1))
        m[max(y0, 0) : min(y1, size), max(x0, 0) : min(x1, size)] = 1.0
    return m


def pin_center_counts(pins, size: int) -> np.ndarray:
    counts = np.zeros((size, size))
    for pin in pins:
        col, row = pin.center_pixel
        counts[row, col] += 1.0
    return counts


def obstacle_layer_masks(obstacles, macros, n_layers: int, size: int) -> np.ndarray:
    """(n_layers, size, size) obstacle occupancy; macros block every layer."""
    masks = np.zeros((n_layers, size, size))
    for layer in range(1, n_layers + 1):
        masks[layer - 1] = _raster([o for o in obstacles if o.layer == layer], size)
    if macros:
        masks = np.maximum(masks, _raster(macros, size)[None])
    return masks


def congestion_label(pins, obstacles, macros, n_layers: int, size: int) -> np.ndarray:
    """Label oracle: ``min(1, 0.6 c + 0.4 c o)`` per pixel, shape ``size x size x 1``.

    ``c = min(1, pins within Chebyshev radius 2 / 12)`` counts pin centres and
    ``o`` flags pixels blocked on at least two layers. Evaluated as
    ``c (3 + 2 o) / 5``, which rounds correctly where ``0.6 c`` does not
    (two pins give exactly 0.1).
    """
    c = np.minimum(1.0, _box_sum(pin_center_counts(pins, size), LABEL_RADIUS) / LABEL_PIN_SCALE)
    o = (obstacle_layer_masks(obstacles, macros, n_layers, size).sum(axis=0) >= 2).astype(np.float64)
    return np.minimum(1.0, c * (3.0 + 2.0 * o) / 5.0)[..., None]


def build_features(pins, obstacles, macros, n_layers: int, size: int) -> np.ndarray:
    chans = []
    for layer in range(1, n_layers + 1):
        cover = _raster([p for p in pins if p.layer == layer], size)
        chans.append(_box_sum(cover, 1) / 9.0)
    chans.extend(obstacle_layer_masks(obstacles, macros, n_layers, size))
    centers = pin_center_counts(pins, size)
    chans.append(np.minimum(1.0, _box_sum(centers, CONGESTION_RADIUS) / CONGESTION_SCALE))
    chans.append(_raster(macros, size))
    nets: dict[int, list[Pin]] = {}
    for p in pins:
        nets.setdefault(p.net_id, []).append(p)
    net_cover = np.zeros((size, size))
    for members in nets.values():
        if len(members) < 2:
            continue
        xs = [m.center_pixel[0] for m in members]
        ys = [m.center_pixel[1] for m in members]
        net_cover[max(min(ys) - 1, 0) : max(ys) + 2, max(min(xs) - 1, 0) : max(xs) + 2] += 1.0
    chans.append(np.minimum(1.0, net_cover / NET_DENSITY_SCALE))
    return np.stack(chans, axis=-1)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------
def _overlaps(r: Rect, others) -> bool:
    return any(r.x0 < o.x1 and o.x0 < r.x1 and r.y0 < o.y1 and o.y0 < r.y1 for o in others)


def _synth_tile(cfg: SynthConfig, index: int, cols: int) -> LayoutTile:
    rng = np.random.default_rng([cfg.seed, index])
    size, n_layers = cfg.tile_size, cfg.n_layers
    area_units = size * size / 1024.0

    macros: list[Rect] = []
    if rng.random() < cfg.macro_prob:
        w, h = (int(v) for v in rng.integers(size // 8, size // 4 + 1, size=2))
        x0, y0 = int(rng.integers(0, size - w + 1)), int(rng.integers(0, size - h + 1))
        macros.append(Rect(x0, y0, x0 + w, y0 + h))

    obstacles: list[Obstacle] = []
    for layer in range(1, n_layers + 1):
        for _ in range(rng.poisson(cfg.obstacle_rate * area_units)):
            w, h = (int(v) for v in rng.integers(2, max(3, size // 6) + 1, size=2))
            x0, y0 = int(rng.integers(0, size - w + 1)), int(rng.integers(0, size - h + 1))
            obstacles.append(Obstacle(x0, y0, x0 + w, y0 + h, layer=layer))

    target = rng.poisson(cfg.pin_rate * area_units)
    pins: list[Pin] = []
    net_id = 0
    attempts = 0
    while len(pins) < target and attempts < 50 * (target + 1):
        attempts += 1
        cx, cy = rng.uniform(0, size, size=2)
        n_members = int(rng.integers(3, 7))
        spread = rng.uniform(0.8, 2.0)
        placed = 0
        for _ in range(n_members):
            w, h = (int(v) for v in rng.integers(1, 4, size=2))
            px = int(np.clip(round(cx + rng.normal(0, spread)), 0, size - w))
            py = int(np.clip(round(cy + rng.normal(0, spread)), 0, size - h))
            pin = Pin(px, py, px + w, py + h, layer=int(rng.integers(1, n_layers + 1)), net_id=net_id)
            if _overlaps(pin, macros):
                continue
            pins.append(pin)
            placed += 1
            if len(pins) >= target:
                break
        if placed:
            net_id += 1

    features = build_features(pins, obstacles, macros, n_layers, size)
    label = congestion_label(pins, obstacles, macros, n_layers, size)
    return LayoutTile(
        grid_x=index % cols,
        grid_y=index // cols,
        features=features,
        label=label,
        pins=pins,
        obstacles=obstacles,
        macros=macros,
        n_layers=n_layers,
    )


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Deterministically generate ``cfg.tiles`` tiles laid out on a square grid."""
    if cfg.tile_size <= 0 or cfg.tile_size % 16:
        raise ValueError(f"tile_size must be a positive multiple of 16, got {cfg.tile_size}")
    if cfg.n_layers < 1:
        raise ValueError(f"n_layers must be >= 1, got {cfg.n_layers}")
    if cfg.tiles < 0:
        raise ValueError(f"tiles must be non-negative, got {cfg.tiles}")
    cols = max(1, math.ceil(math.sqrt(cfg.tiles)))
    tiles = [_synth_tile(cfg, i, cols) for i in range(cfg.tiles)]
    return Dataset(tiles=tiles, split="all", meta=_meta(cfg.tile_size, cfg.n_layers, cfg.seed))


def _meta(tile_size: int, n_layers: int, seed: int) -> dict:
    return {"tile_size": tile_size, "n_layers": n_layers, "seed": seed}


def split_dataset(ds: Dataset, n_val: int, n_test: int) -> tuple[Dataset, Dataset, Dataset]:
    """Partition in index order: leading tiles train, then val, then test."""
    n = len(ds)
    if n_val < 0 or n_test < 0 or n_val + n_test >= n:
        raise ValueError(f"cannot carve {n_val} val + {n_test} test tiles out of {n}")
    cut1, cut2 = n - n_val - n_test, n - n_test
    return (
        Dataset(ds.tiles[:cut1], "train", dict(ds.meta)),
        Dataset(ds.tiles[cut1:cut2], "val", dict(ds.meta)),
        Dataset(ds.tiles[cut2:], "test", dict(ds.meta)),
    )


# ---------------------------------------------------------------------------
# label transforms
# ---------------------------------------------------------------------------
def amplify_labels(tile: LayoutTile, factor: float) -> LayoutTile:
    """Copy of ``tile`` with its label scaled by ``factor`` (no clamping)."""
    if not factor > 0:
        raise ValueError(f"amplification factor must be positive, got {factor}")
    return replace(tile, label=tile.label * factor)


def binarize_truth(label) -> np.ndarray:
    """Ground-truth hotspot map: 1 where the label is strictly positive."""
    arr = np.asarray(getattr(label, "data", label))
    return (arr > 0).astype(np.float64)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------
def _geom_dict(tile: LayoutTile) -> dict:
    def rect(r):
        return {k: v for k, v in asdict(r).items()}

    return {
        "pins": [rect(p) for p in tile.pins],
        "obstacles": [rect(o) for o in tile.obstacles],
        "macros": [rect(m) for m in tile.macros],
    }


def write_dataset(splits: list[Dataset], out_dir: str | os.PathLike) -> Path:
    """Write NPY tiles, per-tile geometry JSON and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = None
    entries = []
    index = 0
    for ds in splits:
        if meta is None:
            meta = dict(ds.meta)
        elif ds.meta != meta:
            raise ValueError(f"inconsistent dataset meta: {ds.meta} vs {meta}")
        for tile in ds.tiles:
            stem = f"tile_{index:04d}"
            save_npy(tile.features, out / f"{stem}_features.npy")
            save_npy(tile.label, out / f"{stem}_label.npy")
            (out / f"{stem}_geom.json").write_text(json.dumps(_geom_dict(tile), sort_keys=True))
            entries.append(
                {
                    "index": index,
                    "grid_x": tile.grid_x,
                    "grid_y": tile.grid_y,
                    "split": ds.split,
                    "features": f"{stem}_features.npy",
                    "label": f"{stem}_label.npy",
                    "geometry": f"{stem}_geom.json",
                }
            )
            index += 1
    manifest = {"format": "magnet-dataset", "version": 1, "meta": meta or {}, "tiles": entries}
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_manifest(data_dir: str | os.PathLike) -> dict:
    path = Path(data_dir) / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "magnet-dataset":
        raise ValueError(f"{path} is not a dataset manifest")
    return manifest


def read_dataset(data_dir: str | os.PathLike, split: str | None = None) -> Dataset:
    """Load every tile (or only one split) listed in the manifest."""
    root = Path(data_dir)
    manifest = read_manifest(root)
    meta = manifest["meta"]
    n_layers = int(meta["n_layers"])
    tiles = []
    for entry in manifest["tiles"]:
        if split is not None and entry["split"] != split:
            continue
        geom = json.loads((root / entry["geometry"]).read_text())
        tiles.append(
            LayoutTile(
                grid_x=int(entry["grid_x"]),
                grid_y=int(entry["grid_y"]),
                features=load_array(root / entry["features"]),
                label=load_array(root / entry["label"]),
                pins=[Pin(**p) for p in geom["pins"]],
                obstacles=[Obstacle(**o) for o in geom["obstacles"]],
                macros=[Rect(**m) for m in geom["macros"]],
                n_layers=n_layers,
            )
        )
    return Dataset(tiles=tiles, split=split or "all", meta=meta)
