"""Command-line entry point: ``magnet <command> [options]``.

Exit codes: 0 success, 2 usage/config error, 3 data/format error,
4 numerical-check failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, config_hash, load_checkpoint, save_checkpoint
from .data import MANIFEST_NAME, SynthConfig, read_dataset, read_manifest, split_dataset, synth_generate, write_dataset
from .fusion import HOTSPOT_THRESHOLD, magnet_forward, threshold_binarize
from .graph import TileGraph, build_guidance_map, build_tile_graph
from .metrics import evaluate
from .npy import NpyFormatError, load_array, save_npy
from .tensor import no_grad
from .trainer import (
    ConfigMismatchError,
    NumericalError,
    TrainConfig,
    load_joint_model,
    load_unet_model,
    stage1_pretrain,
    stage2_joint,
    write_log,
)
from .unet import UNetConfig

log = logging.getLogger("magnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
GRAPH_MANIFEST = "graphs.json"
LOCK_NAME = ".magnet.lock"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------
@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    tiles: int = 64
    tile_size: int = 64
    n_layers: int = 3
    pin_rate: float = 14.0
    obstacle_rate: float = 1.5
    macro_prob: float = 0.3
    n_val: int = 8
    n_test: int = 8
    edge_thresh_px: float = 8.0
    base_filters: int = 16
    reduction: int = 16
    spatial_kernel: int = 7
    epoch_divisor: float = 5.0
    stage1_epochs: tuple = ()
    stage1_lrs: tuple = (1e-3, 5e-4, 1e-4)
    stage2_epochs: tuple = (4, 6)
    stage2_lrs: tuple = (1e-2, 1e-4)
    amplification: float = 10.0
    batch_size: int = 4
    loss: str = "mse"
    threshold: float = HOTSPOT_THRESHOLD

    def update(self, values: dict) -> None:
        fields = {f.name: f for f in dataclasses.fields(self)}
        for key, raw in values.items():
            if key not in fields:
                raise UsageError(f"unknown config key {key!r}")
            setattr(self, key, _coerce(key, raw, getattr(self, key)))

    def hash(self) -> str:
        return config_hash(dataclasses.asdict(self))

    def synth(self) -> SynthConfig:
        return SynthConfig(
            tiles=self.tiles,
            tile_size=self.tile_size,
            n_layers=self.n_layers,
            pin_rate=self.pin_rate,
            obstacle_rate=self.obstacle_rate,
            macro_prob=self.macro_prob,
            seed=self.seed,
        )

    def unet(self, tile_size: int | None = None) -> UNetConfig:
        return UNetConfig(
            tile_size=tile_size or self.tile_size,
            base_filters=self.base_filters,
            reduction=self.reduction,
            spatial_kernel=self.spatial_kernel,
            seed=self.seed,
        )

    def train(self) -> TrainConfig:
        return TrainConfig(
            seed=self.seed,
            epoch_divisor=self.epoch_divisor,
            stage1_epochs=tuple(self.stage1_epochs) or None,
            stage1_lrs=tuple(self.stage1_lrs),
            stage2_epochs=tuple(self.stage2_epochs),
            stage2_lrs=tuple(self.stage2_lrs),
            amplification=self.amplification,
            batch_size=self.batch_size,
            loss=self.loss,
        )


def _coerce(key: str, raw, default):
    try:
        if isinstance(default, tuple):
            items = raw if isinstance(raw, (list, tuple)) else [s for s in str(raw).split(",") if s.strip()]
            kind = int if key.endswith("epochs") else float
            return tuple(kind(v) for v in items)
        if isinstance(default, bool):
            return str(raw).lower() in ("1", "true", "yes")
        return type(default)(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value for {key}: {raw!r}") from exc


def parse_config_text(text: str) -> dict:
    """JSON object, or ``key = value`` lines (``#`` comments allowed)."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            return json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from exc
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n} is not key=value: {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            cfg.update(parse_config_text(Path(args.config).read_text()))
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    overrides = {}
    for key in ("seed", "tiles", "tile_size", "n_layers", "edge_thresh_px", "threshold"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    cfg.update(overrides)
    log.info("config hash %s", cfg.hash())
    return cfg


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
@contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise UsageError(f"{out_dir} is locked by another run ({lock})") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def _ensure_writable(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")
    return path


def _require_manifest(data_dir: str) -> dict:
    try:
        return read_manifest(data_dir)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc


def _entries(manifest: dict, split: str | None) -> list[dict]:
    return [e for e in manifest["tiles"] if split in (None, "all") or e["split"] == split]


def _load_split(data_dir: str, split: str | None):
    manifest = _require_manifest(data_dir)
    split = None if split == "all" else split
    return _entries(manifest, split), read_dataset(data_dir, split)


def _load_graphs(graph_dir: str, entries: list[dict]) -> list[TileGraph]:
    root = Path(graph_dir)
    if not (root / GRAPH_MANIFEST).is_file():
        raise UsageError(f"no graph manifest at {root / GRAPH_MANIFEST}")
    graphs = []
    for e in entries:
        path = root / f"tile_{e['index']:04d}_graph.json"
        try:
            graphs.append(TileGraph.from_json(path.read_text()))
        except FileNotFoundError as exc:
            raise UsageError(f"missing graph for tile {e['index']}: {path}") from exc
        except (KeyError, ValueError) as exc:
            raise NpyFormatError(f"malformed graph file {path}: {exc}") from exc
    return graphs


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _write_config(out: Path, cfg: RunConfig) -> None:
    _write_json(out / "run_config.json", {"config": dataclasses.asdict(cfg), "config_hash": cfg.hash()})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    if cfg.tile_size <= 0 or cfg.tile_size % 16:
        raise UsageError(f"--size must be a positive multiple of 16, got {cfg.tile_size}")
    out = _ensure_writable(Path(args.out))
    with output_lock(out):
        ds = synth_generate(cfg.synth())
        splits = split_dataset(ds, cfg.n_val, cfg.n_test) if cfg.n_val + cfg.n_test else [ds]
        write_dataset(list(splits), out)
    print(f"wrote {len(ds)} tiles to {out / MANIFEST_NAME}")
    return EXIT_OK


def cmd_build_graphs(args) -> int:
    cfg = resolve_config(args)
    entries, ds = _load_split(args.data, None)
    out = _ensure_writable(Path(args.out))
    with output_lock(out):
        graphs = [build_tile_graph(t, cfg.edge_thresh_px) for t in ds.tiles]
        rows = []
        for e, g in zip(entries, graphs):
            name = f"tile_{e['index']:04d}_graph.json"
            (out / name).write_text(g.to_json())
            rows.append({"index": e["index"], "graph": name, "nodes": g.n_nodes, "edges": len(g.edge_index), "is_empty": g.is_empty})
        gmap = build_guidance_map(graphs, tile_size=int(ds.meta["tile_size"]))
        save_npy(gmap.grid, out / "guidance.npy")
        _write_json(out / GRAPH_MANIFEST, {"edge_thresh_px": cfg.edge_thresh_px, "graphs": rows})
    print(f"built {len(graphs)} graphs ({sum(r['is_empty'] for r in rows)} empty) in {out}")
    return EXIT_OK


def cmd_train_unet(args) -> int:
    cfg = resolve_config(args)
    _, train = _load_split(args.data, "train")
    _, val = _load_split(args.data, "val")
    if len(train) == 0:
        raise UsageError("dataset has no train split")
    out = _ensure_writable(Path(args.out))
    with output_lock(out):
        _write_config(out, cfg)
        result = stage1_pretrain(train, val, cfg.unet(int(train.meta["tile_size"])), cfg.train())
        save_checkpoint(result.checkpoint, out / "unet.ckpt")
        write_log(result.log, out / "train_log.csv")
        if args.figures:
            from .plotting import plot_loss_curves

            plot_loss_curves(result.log, out / "loss_stage1.png", "stage 1")
    _print_log(result.log)
    return EXIT_OK


def cmd_train_joint(args) -> int:
    cfg = resolve_config(args)
    train_entries, train = _load_split(args.data, "train")
    val_entries, val = _load_split(args.data, "val")
    if len(train) == 0:
        raise UsageError("dataset has no train split")
    ckpt = load_checkpoint(args.unet_ckpt)
    train_graphs = _load_graphs(args.graphs, train_entries)
    val_graphs = _load_graphs(args.graphs, val_entries)
    out = _ensure_writable(Path(args.out))
    with output_lock(out):
        _write_config(out, cfg)
        result = stage2_joint(
            train, train_graphs, val, val_graphs, ckpt, cfg.unet(int(train.meta["tile_size"])), cfg.train()
        )
        save_checkpoint(result.checkpoint, out / "joint.ckpt")
        write_log(result.log, out / "train_log.csv")
        if args.figures:
            from .plotting import plot_loss_curves

            plot_loss_curves(result.log, out / "loss_stage2.png", "stage 2")
    _print_log(result.log)
    return EXIT_OK


def _print_log(rows) -> None:
    w = csv.writer(sys.stdout)
    w.writerow(["epoch", "phase", "lr", "train_loss", "val_loss"])
    for r in rows:
        w.writerow([r.epoch, r.phase, f"{r.lr:g}", f"{r.train_loss:.6g}", f"{r.val_loss:.6g}"])


def cmd_predict(args) -> int:
    cfg = resolve_config(args)
    entries, ds = _load_split(args.data, args.split)
    ckpt = load_checkpoint(args.ckpt)
    out = _ensure_writable(Path(args.out))
    with output_lock(out), no_grad():
        if ckpt.stage == 1:
            unet = load_unet_model(ckpt)
            _check_tile_size(unet.config, ds)
            for e, tile in zip(entries, ds.tiles):
                prob = unet(tile.features).data
                _save_maps(out, e["index"], prob, prob, threshold_binarize(prob, cfg.threshold))
        else:
            if not args.graphs:
                raise UsageError("--graphs is required for a stage-2 checkpoint")
            model = load_joint_model(ckpt)
            _check_tile_size(model.config, ds)
            graphs = _load_graphs(args.graphs, entries)
            for e, tile, g in zip(entries, ds.tiles, graphs):
                res = magnet_forward(model, tile.features, g, cfg.threshold)
                _save_maps(out, e["index"], res.density_map.data, res.prob_map.data, res.binary_map)
        _write_json(
            out / "predictions.json",
            {"checkpoint_stage": ckpt.stage, "split": args.split, "threshold": cfg.threshold, "tiles": [e["index"] for e in entries]},
        )
    print(f"wrote predictions for {len(entries)} tiles to {out}")
    return EXIT_OK


def _check_tile_size(ucfg: UNetConfig, ds) -> None:
    size = int(ds.meta["tile_size"])
    if ucfg.tile_size != size:
        raise ConfigMismatchError(f"tile_size: checkpoint has {ucfg.tile_size}, dataset has {size}")


def _save_maps(out: Path, index: int, density, prob, binary) -> None:
    stem = f"tile_{index:04d}"
    save_npy(density, out / f"{stem}_density.npy")
    save_npy(prob, out / f"{stem}_prob.npy")
    save_npy(binary, out / f"{stem}_binary.npy")


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    entries, ds = _load_split(args.data, args.split)
    pred_dir = Path(args.pred)
    preds = []
    for e in entries:
        path = pred_dir / f"tile_{e['index']:04d}_prob.npy"
        if not path.is_file():
            raise UsageError(f"missing prediction for tile {e['index']}: {path}")
        preds.append(load_array(path))
    truths = [t.label for t in ds.tiles]
    report = evaluate(truths, preds, cfg.threshold)
    out = _ensure_writable(Path(args.out)) if args.out else None
    if out is not None:
        with output_lock(out):
            (out / "report.json").write_text(report.to_json())
            with open(out / "per_tile.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["index", "nrmse", "ssim", "tp", "fp", "tn", "fn", "range_fallback"])
                for e, t in zip(entries, report.tiles):
                    w.writerow([e["index"], f"{t.nrmse:.6g}", f"{t.ssim:.6g}", t.tp, t.fp, t.tn, t.fn, int(t.range_fallback)])
            if args.figures:
                from .plotting import plot_prediction_panel, plot_roc

                scores = np.concatenate([p.ravel() for p in preds])
                truth = np.concatenate([y.ravel() > 0 for y in truths])
                plot_roc({"model": (scores, truth)}, out / "roc.png")
                for e, y, p in list(zip(entries, truths, preds))[: args.panels]:
                    plot_prediction_panel(
                        y, p, threshold_binarize(p, cfg.threshold), out / f"panel_{e['index']:04d}.png", f"tile {e['index']}"
                    )
    print(report.table())
    if report.degenerate:
        print(f"degenerate: {','.join(report.degenerate)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(seeds=args.seeds, micro=not args.no_micro)
    failed = 0
    print("check,max_rel_err,n_checked,tolerance,status")
    for res, tol in results:
        ok = res.passed(tol)
        failed += not ok
        print(f"{res.name},{res.max_rel_err:.3e},{res.n_checked},{tol:g},{'pass' if ok else 'FAIL'}")
    if failed:
        print(f"{failed} gradient check(s) exceeded tolerance", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="magnet", description="U-Net + tile-graph GNN DRC hotspot prediction")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value or JSON run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return sp

    sp = common(sub.add_parser("gen-data", help="generate a synthetic layout dataset"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--tiles", type=int)
    sp.add_argument("--size", dest="tile_size", type=int)
    sp.add_argument("--layers", dest="n_layers", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("build-graphs", help="build per-tile pin graphs and the guidance map"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--edge-thresh-px", dest="edge_thresh_px", type=float)
    sp.set_defaults(func=cmd_build_graphs)

    sp = common(sub.add_parser("train-unet", help="stage 1: pretrain the MD-Unet"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--no-figures", dest="figures", action="store_false")
    sp.set_defaults(func=cmd_train_unet)

    sp = common(sub.add_parser("train-joint", help="stage 2: joint training with the GNN"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--graphs", required=True)
    sp.add_argument("--unet-ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--no-figures", dest="figures", action="store_false")
    sp.set_defaults(func=cmd_train_joint)

    sp = common(sub.add_parser("predict", help="write density/probability/binary maps"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--graphs")
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    sp.add_argument("--threshold", type=float)
    sp.set_defaults(func=cmd_predict)

    sp = common(sub.add_parser("eval", help="score predictions against labels"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--out")
    sp.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--panels", type=int, default=4, help="prediction panels to render")
    sp.add_argument("--no-figures", dest="figures", action="store_false")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--no-micro", action="store_true", help="skip the end-to-end micro network")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NpyFormatError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
