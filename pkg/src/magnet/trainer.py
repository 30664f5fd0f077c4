"""Two-stage training: MD-Unet pretraining, then joint training with the GNN branch.

Stage 1 runs three phases. The first trains against amplified labels and the
other two against the originals, each at its own learning rate. Stage 2 first
trains everything except the MD-Unet (frozen), then unfreezes it; batch size
is 1 because every tile has its own graph.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ops
from .checkpoint import Checkpoint, CheckpointError, apply_checkpoint, config_hash
from .data import Dataset, LayoutTile, amplify_labels, binarize_truth
from .fusion import MAGNet, magnet_forward
from .graph import TileGraph
from .nn import Adam
from .tensor import Tensor, no_grad
from .unet import MDUnet, UNetConfig

log = logging.getLogger(__name__)

FULL_STAGE1_EPOCHS = (10, 190, 310)
LOG_FIELDS = ("epoch", "phase", "lr", "train_loss", "val_loss")


class NumericalError(RuntimeError):
    """Loss became non-finite during training."""


class ConfigMismatchError(ValueError):
    """A checkpoint was produced under an incompatible model configuration."""


@dataclass
class TrainConfig:
    seed: int = 0
    epoch_divisor: float = 5.0
    stage1_epochs: tuple[int, int, int] | None = None
    stage1_lrs: tuple[float, float, float] = (1e-3, 5e-4, 1e-4)
    stage2_epochs: tuple[int, int] = (4, 6)
    stage2_lrs: tuple[float, float] = (1e-2, 1e-4)
    amplification: float = 10.0
    batch_size: int = 4
    loss: str = "mse"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.loss not in ("mse", "mse+bce"):
            raise ValueError(f"loss must be 'mse' or 'mse+bce', got {self.loss!r}")
        if self.amplification <= 0:
            raise ValueError(f"amplification must be > 0, got {self.amplification}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epoch_divisor <= 0:
            raise ValueError(f"epoch_divisor must be > 0, got {self.epoch_divisor}")
        for name in ("stage1_epochs", "stage2_epochs"):
            value = getattr(self, name)
            if value is not None and (len(value) != (3 if name == "stage1_epochs" else 2) or min(value) < 0):
                raise ValueError(f"{name} must list non-negative per-phase epoch counts, got {value}")
        if len(self.stage1_lrs) != 3 or len(self.stage2_lrs) != 2:
            raise ValueError("stage1_lrs needs 3 values and stage2_lrs needs 2")

    def phase_epochs(self) -> tuple[int, int, int]:
        """Stage-1 epochs per phase; derived from the 10/190/310 schedule unless given."""
        if self.stage1_epochs is not None:
            return tuple(int(e) for e in self.stage1_epochs)
        return tuple(max(1, int(round(e / self.epoch_divisor))) for e in FULL_STAGE1_EPOCHS)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage1_epochs"] = list(self.phase_epochs())
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class LogRow:
    epoch: int
    phase: str
    lr: float
    train_loss: float
    val_loss: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class StageResult:
    checkpoint: Checkpoint
    log: list[LogRow] = field(default_factory=list)
    model: MDUnet | MAGNet | None = None

    @property
    def final_val_loss(self) -> float:
        return self.log[-1].val_loss if self.log else float("nan")


StepCallback = Callable[[str, int, object], None]


def write_log(rows: list[LogRow], path: str | os.PathLike, append: bool = True) -> None:
    new = not os.path.exists(path) or not append
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.as_dict().items()})


def _loss(pred: Tensor, target: np.ndarray, kind: str) -> Tensor:
    loss = ops.mse_loss(pred, target)
    if kind == "mse+bce":
        loss = ops.add(loss, ops.bce_loss(pred, binarize_truth(target)))
    return loss


def _check_finite(value: float, where: str) -> float:
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at {where}")
    return value


def _stack(tiles: list[LayoutTile], labels: bool = True) -> np.ndarray:
    return np.stack([t.label if labels else t.features for t in tiles])


def _run_config(unet_cfg: UNetConfig, cfg: TrainConfig, stage: int, extra: dict | None = None) -> dict:
    out = {"stage": stage, "unet": dataclasses.asdict(unet_cfg), "train": cfg.to_dict()}
    if extra:
        out.update(extra)
    return out


def unet_val_loss(model: MDUnet, tiles: list[LayoutTile], kind: str = "mse", batch: int = 8) -> float:
    """Mean per-tile training objective of the MD-Unet on unamplified labels."""
    if not tiles:
        return float("nan")
    total = 0.0
    with no_grad():
        for s in range(0, len(tiles), batch):
            chunk = tiles[s : s + batch]
            pred = model(_stack(chunk, labels=False))
            total += sum(_loss(pred[i], t.label, kind).item() for i, t in enumerate(chunk))
    return total / len(tiles)


def stage1_pretrain(
    train: Dataset,
    val: Dataset | None,
    unet_cfg: UNetConfig,
    cfg: TrainConfig,
    on_step: StepCallback | None = None,
) -> StageResult:
    """Pretrain the MD-Unet alone; returns the stage-1 checkpoint and epoch log."""
    if len(train) == 0:
        raise ValueError("stage 1 needs a non-empty training set")
    if train.tiles[0].tile_size != unet_cfg.tile_size:
        raise ConfigMismatchError(f"tile_size: data {train.tiles[0].tile_size}, model {unet_cfg.tile_size}")
    model = MAGNet(unet_cfg)
    unet = model.unet
    rng = np.random.default_rng([cfg.seed, 4])
    opt = Adam(unet.parameters(), lr=cfg.stage1_lrs[0], betas=cfg.betas, eps=cfg.eps)
    val_tiles = list(val.tiles) if val is not None else []
    tiles = list(train.tiles)
    rows: list[LogRow] = []
    epoch = 0
    phases = [
        ("1-amplified", cfg.amplification),
        ("1-original", 1.0),
        ("1-finetune", 1.0),
    ]
    for (phase, factor), n_epochs, lr in zip(phases, cfg.phase_epochs(), cfg.stage1_lrs):
        opt.lr = lr
        for _ in range(n_epochs):
            epoch += 1
            order = rng.permutation(len(tiles))
            total, count = 0.0, 0
            for s in range(0, len(order), cfg.batch_size):
                batch = [tiles[i] for i in order[s : s + cfg.batch_size]]
                if factor != 1.0:
                    batch = [amplify_labels(t, factor) for t in batch]
                opt.zero_grad()
                loss = _loss(unet(_stack(batch, labels=False)), _stack(batch), cfg.loss)
                value = _check_finite(loss.item(), f"stage 1 epoch {epoch}")
                loss.backward()
                opt.step()
                total += value * len(batch)
                count += len(batch)
                if on_step is not None:
                    on_step(phase, epoch, model)
            row = LogRow(epoch, phase, lr, total / count, unet_val_loss(unet, val_tiles, cfg.loss))
            rows.append(row)
            log.info("stage1 epoch %d phase %s lr %g train %.6g val %.6g", *dataclasses.astuple(row))
    config = _run_config(unet_cfg, cfg, 1)
    ckpt = Checkpoint.from_module(model, 1, epoch, config, rng.bit_generator.state, prefix="unet.")
    return StageResult(ckpt, rows, model)


def check_stage1_compat(ckpt: Checkpoint, unet_cfg: UNetConfig) -> None:
    if ckpt.stage != 1:
        raise ConfigMismatchError(f"stage: expected a stage-1 checkpoint, got stage {ckpt.stage}")
    stored = ckpt.config.get("unet", {})
    for key, value in dataclasses.asdict(unet_cfg).items():
        if key == "seed":
            continue
        if key in stored and stored[key] != value:
            raise ConfigMismatchError(f"{key}: checkpoint has {stored[key]!r}, config has {value!r}")


def init_joint_model(ckpt: Checkpoint, unet_cfg: UNetConfig) -> tuple[MAGNet, list[str]]:
    """Build a MAGNet whose MD-Unet comes from a stage-1 checkpoint.

    Only ``unet.*`` names are mapped; the GNN, guided attention and
    discriminator keep their seeded initialization. Returns the model and
    the list of mapped names.
    """
    check_stage1_compat(ckpt, unet_cfg)
    model = MAGNet(unet_cfg)
    try:
        loaded = apply_checkpoint(model, ckpt, prefix="unet.")
    except CheckpointError as exc:
        raise ConfigMismatchError(str(exc)) from exc
    model.guided.warm_start(model.unet.spatial_att)
    return model, loaded


def joint_val_loss(model: MAGNet, tiles: list[LayoutTile], graphs: list[TileGraph], kind: str = "mse") -> float:
    """Mean per-tile training objective of the fused probability map."""
    if not tiles:
        return float("nan")
    total = 0.0
    with no_grad():
        for t, g in zip(tiles, graphs):
            total += _loss(magnet_forward(model, t.features, g).prob_map, t.label, kind).item()
    return total / len(tiles)


def stage2_joint(
    train: Dataset,
    train_graphs: list[TileGraph],
    val: Dataset | None,
    val_graphs: list[TileGraph] | None,
    unet_ckpt: Checkpoint,
    unet_cfg: UNetConfig,
    cfg: TrainConfig,
    on_step: StepCallback | None = None,
) -> StageResult:
    """Joint training: phase A with the MD-Unet frozen, phase B with everything trainable."""
    if len(train) == 0:
        raise ValueError("stage 2 needs a non-empty training set")
    if len(train_graphs) != len(train):
        raise ValueError(f"{len(train)} tiles but {len(train_graphs)} graphs")
    model, _ = init_joint_model(unet_ckpt, unet_cfg)
    rng = np.random.default_rng([cfg.seed, 5])
    opt = Adam(model.parameters(), lr=cfg.stage2_lrs[0], betas=cfg.betas, eps=cfg.eps)
    val_tiles = list(val.tiles) if val is not None else []
    val_graphs = list(val_graphs or [])
    tiles = list(train.tiles)
    rows: list[LogRow] = []
    epoch = 0
    for phase, n_epochs, lr, frozen in zip(("2-frozen", "2-joint"), cfg.stage2_epochs, cfg.stage2_lrs, (True, False)):
        model.unet.set_frozen(frozen)
        opt.lr = lr
        for _ in range(n_epochs):
            epoch += 1
            total = 0.0
            for i in rng.permutation(len(tiles)):
                opt.zero_grad()
                out = magnet_forward(model, tiles[i].features, train_graphs[i])
                loss = _loss(out.prob_map, tiles[i].label, cfg.loss)
                total += _check_finite(loss.item(), f"stage 2 epoch {epoch}")
                loss.backward()
                opt.step()
                if on_step is not None:
                    on_step(phase, epoch, model)
            row = LogRow(epoch, phase, lr, total / len(tiles), joint_val_loss(model, val_tiles, val_graphs, cfg.loss))
            rows.append(row)
            log.info("stage2 epoch %d phase %s lr %g train %.6g val %.6g", *dataclasses.astuple(row))
    model.unet.set_frozen(False)
    config = _run_config(unet_cfg, cfg, 2, {"stage1_hash": unet_ckpt.config_hash})
    ckpt = Checkpoint.from_module(model, 2, epoch, config, rng.bit_generator.state)
    return StageResult(ckpt, rows, model)


def load_joint_model(ckpt: Checkpoint) -> MAGNet:
    """Rebuild a MAGNet from a stage-2 checkpoint (config taken from the manifest)."""
    if ckpt.stage != 2:
        raise ConfigMismatchError(f"stage: expected a stage-2 checkpoint, got stage {ckpt.stage}")
    model = MAGNet(UNetConfig(**ckpt.config["unet"]))
    apply_checkpoint(model, ckpt)
    return model


def load_unet_model(ckpt: Checkpoint) -> MDUnet:
    model = MAGNet(UNetConfig(**ckpt.config["unet"]))
    apply_checkpoint(model, ckpt, prefix="unet.")
    return model.unet


__all__ = [
    "ConfigMismatchError",
    "LogRow",
    "NumericalError",
    "StageResult",
    "TrainConfig",
    "config_hash",
    "init_joint_model",
    "joint_val_loss",
    "load_joint_model",
    "load_unet_model",
    "stage1_pretrain",
    "stage2_joint",
    "unet_val_loss",
    "write_log",
]
