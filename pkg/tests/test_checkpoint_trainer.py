import struct

import numpy as np
import pytest

from magnet import ops
from magnet import trainer as trainer_mod
from magnet.checkpoint import (
    Checkpoint,
    CheckpointError,
    apply_checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from magnet.data import SynthConfig, split_dataset, synth_generate
from magnet.fusion import MAGNet, magnet_forward
from magnet.graph import build_tile_graph
from magnet.tensor import Tensor, no_grad
from magnet.trainer import (
    ConfigMismatchError,
    NumericalError,
    TrainConfig,
    init_joint_model,
    load_joint_model,
    load_unet_model,
    stage1_pretrain,
    stage2_joint,
    write_log,
)
from magnet.unet import UNetConfig

UCFG = UNetConfig(tile_size=16, base_filters=2, seed=0)
TCFG = TrainConfig(seed=0, stage1_epochs=(1, 1, 1), stage2_epochs=(1, 1), batch_size=2)


@pytest.fixture(scope="module")
def tiny():
    ds = synth_generate(SynthConfig(tiles=6, tile_size=16, seed=0))
    tr, va, _ = split_dataset(ds, 1, 1)
    graphs = [build_tile_graph(t) for t in tr.tiles]
    vgraphs = [build_tile_graph(t) for t in va.tiles]
    return tr, va, graphs, vgraphs


@pytest.fixture(scope="module")
def stage1(tiny):
    tr, va, _, _ = tiny
    return stage1_pretrain(tr, va, UCFG, TCFG)


# -- checkpoint format -------------------------------------------------------------
def test_checkpoint_round_trip_forward_bit_exact(tmp_path, tiny):
    tr, _, graphs, _ = tiny
    model = MAGNet(UCFG)
    ckpt = Checkpoint.from_module(model, 2, 3, {"unet": UCFG.__dict__}, {"k": 1})
    save_checkpoint(ckpt, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.stage == 2 and back.epoch == 3 and back.rng_state == {"k": 1}
    fresh = MAGNet(UNetConfig(tile_size=16, base_filters=2, seed=9))
    apply_checkpoint(fresh, back)
    with no_grad():
        a = magnet_forward(model, tr.tiles[0].features, graphs[0])
        b = magnet_forward(fresh, tr.tiles[0].features, graphs[0])
    assert a.prob_map.data.tobytes() == b.prob_map.data.tobytes()
    assert a.density_map.data.tobytes() == b.density_map.data.tobytes()


def test_checkpoint_corruption_errors():
    raw = encode_checkpoint(Checkpoint.from_module(MAGNet(UCFG), 1, 1, {"a": 1}))
    for bad in (raw[:10], raw[:100], raw[:-8], raw + b"\0" * 8):
        with pytest.raises(CheckpointError):
            decode_checkpoint(bad)
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(raw[:4] + struct.pack("<I", 99) + raw[8:])
    tampered = raw.replace(b'"a": 1', b'"a": 2')
    with pytest.raises(CheckpointError):
        decode_checkpoint(tampered)


def test_apply_checkpoint_shape_mismatch():
    ckpt = Checkpoint.from_module(MAGNet(UCFG), 1, 1, {})
    with pytest.raises(CheckpointError):
        apply_checkpoint(MAGNet(UNetConfig(tile_size=16, base_filters=4)), ckpt)


# -- stage 1 ------------------------------------------------------------------------
def test_stage1_checkpoint_holds_only_unet(stage1):
    assert stage1.checkpoint.stage == 1
    assert stage1.checkpoint.params
    assert all(n.startswith("unet.") for n in stage1.checkpoint.params)
    assert set(stage1.checkpoint.params) == {n for n, _ in MAGNet(UCFG).named_parameters() if n.startswith("unet.")}


def test_stage1_lr_schedule_has_two_drops(tiny):
    tr, va, _, _ = tiny
    cfg = TrainConfig(seed=0, stage1_epochs=(2, 2, 2), stage1_lrs=(1e-3, 5e-4, 1e-4), batch_size=4)
    rows = stage1_pretrain(tr, va, UCFG, cfg).log
    lrs = [r.lr for r in rows]
    drops = [i for i in range(1, len(lrs)) if lrs[i] < lrs[i - 1]]
    assert drops == [2, 4]
    assert [r.phase for r in rows] == ["1-amplified"] * 2 + ["1-original"] * 2 + ["1-finetune"] * 2


def test_stage1_amplified_targets(tiny, monkeypatch):
    tr, va, _, _ = tiny
    seen, current = {}, []
    real = trainer_mod._loss

    def spy(pred, target, kind):
        current.append(np.array(target))
        return real(pred, target, kind)

    def on_step(phase, epoch, model):
        seen.setdefault(phase, []).extend(current)
        current.clear()

    monkeypatch.setattr(trainer_mod, "_loss", spy)
    cfg = TrainConfig(seed=0, stage1_epochs=(1, 1, 0), amplification=10.0, batch_size=1)
    stage1_pretrain(tr, None, UCFG, cfg, on_step=on_step)
    amp = sorted(a.tobytes() for a in seen["1-amplified"])
    orig = sorted((o * 10.0).tobytes() for o in seen["1-original"])
    assert len(amp) == len(tr) and amp == orig


def test_stage1_empty_dataset_rejected(tiny):
    _, va, _, _ = tiny
    with pytest.raises(ValueError):
        stage1_pretrain(type(va)([], "train"), va, UCFG, TCFG)


def test_nonfinite_loss_raises(tiny, monkeypatch):
    tr, va, _, _ = tiny
    real = trainer_mod._loss
    monkeypatch.setattr(trainer_mod, "_loss", lambda pred, target, kind: ops.mul(real(pred, target, kind), Tensor(np.nan)))
    with pytest.raises(NumericalError):
        stage1_pretrain(tr, va, UCFG, TCFG)


def test_loss_guard_rejects_nan():
    with pytest.raises(NumericalError):
        trainer_mod._check_finite(float("nan"), "here")
    assert trainer_mod._check_finite(0.5, "here") == 0.5


# -- stage 2 -----------------------------------------------------------------------
def test_stage1_to_stage2_name_mapping(stage1):
    model, loaded = init_joint_model(stage1.checkpoint, UCFG)
    fresh = MAGNet(UCFG)
    assert sorted(loaded) == sorted(stage1.checkpoint.params)
    for name, p in model.named_parameters():
        if name.startswith("unet."):
            assert p.data.tobytes() == stage1.checkpoint.params[name].tobytes()
        elif name.startswith(("gnn.", "disc.")) or name == "guided.w_s":
            assert p.data.tobytes() == dict(fresh.named_parameters())[name].data.tobytes()


def test_stage2_config_mismatch(stage1):
    with pytest.raises(ConfigMismatchError):
        init_joint_model(stage1.checkpoint, UNetConfig(tile_size=16, base_filters=4))
    with pytest.raises(ConfigMismatchError):
        init_joint_model(Checkpoint(stage1.checkpoint.params, 2, 1, stage1.checkpoint.config), UCFG)


def test_stage2_freeze_then_unfreeze(tiny, stage1):
    tr, va, graphs, vgraphs = tiny
    start = {n: v.tobytes() for n, v in stage1.checkpoint.params.items()}
    frozen_steps, violations = [], []

    def on_step(phase, epoch, model):
        if phase == "2-frozen":
            frozen_steps.append(epoch)
            for n, p in model.unet.named_parameters(prefix="unet."):
                if p.data.tobytes() != start[n]:
                    violations.append(n)

    result = stage2_joint(tr, graphs, va, vgraphs, stage1.checkpoint, UCFG, TCFG, on_step=on_step)
    assert len(frozen_steps) == len(tr) and not violations
    changed = [n for n, v in result.checkpoint.params.items() if n.startswith("unet.") and v.tobytes() != start[n]]
    assert changed
    assert [r.phase for r in result.log] == ["2-frozen", "2-joint"]
    assert all(np.isfinite([r.train_loss, r.val_loss]).all() for r in result.log)
    model = load_joint_model(result.checkpoint)
    assert all(not p.frozen for p in model.parameters())
    assert load_unet_model(stage1.checkpoint).config == UCFG


def test_training_is_deterministic(tiny, stage1):
    tr, va, graphs, vgraphs = tiny
    again = stage1_pretrain(tr, va, UCFG, TCFG)
    assert again.checkpoint.config_hash == stage1.checkpoint.config_hash
    for n, v in stage1.checkpoint.params.items():
        assert again.checkpoint.params[n].tobytes() == v.tobytes()
    a = stage2_joint(tr, graphs, va, vgraphs, stage1.checkpoint, UCFG, TCFG)
    b = stage2_joint(tr, graphs, va, vgraphs, stage1.checkpoint, UCFG, TCFG)
    assert encode_checkpoint(a.checkpoint) == encode_checkpoint(b.checkpoint)


def test_write_log(tmp_path, stage1):
    write_log(stage1.log, tmp_path / "log.csv")
    write_log(stage1.log, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,phase,lr,train_loss,val_loss"
    assert len(lines) == 1 + 2 * len(stage1.log)


def test_train_config_epoch_scaling():
    assert TrainConfig().phase_epochs() == (2, 38, 62)
    assert TrainConfig(stage1_epochs=(1, 2, 3)).phase_epochs() == (1, 2, 3)
    with pytest.raises(ValueError):
        TrainConfig(loss="l1")
