"""Binary checkpoint store.

Layout::

    b"MAGN" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | float64 payload

The manifest lists every parameter's name, shape, element offset and count,
plus training stage, epoch, config, config hash and PRNG state.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .nn import Module

MAGIC = b"MAGN"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint."""


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    stage: int
    epoch: int
    config: dict = field(default_factory=dict)
    rng_state: dict | None = None

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    @classmethod
    def from_module(cls, module: Module, stage: int, epoch: int, config: dict, rng_state=None, prefix: str = ""):
        params = {n: p.data.copy() for n, p in module.named_parameters() if n.startswith(prefix)}
        return cls(params, stage, epoch, config, rng_state)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries, offset = [], 0
    for name in sorted(ckpt.params):
        arr = ckpt.params[name]
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += int(arr.size)
    manifest = {
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "rng_state": ckpt.rng_state,
        "params": entries,
        "payload_count": offset,
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(ckpt.params[e["name"]], dtype="<f8").tobytes() for e in entries)
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + payload


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"truncated checkpoint: {len(raw)} bytes, header needs {_PREFIX.size}")
    magic, version, mlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    if len(raw) < start + mlen:
        raise CheckpointError(f"truncated manifest: need {mlen} bytes, have {len(raw) - start}")
    try:
        manifest = json.loads(raw[start : start + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    body = raw[start + mlen :]
    expected = 8 * manifest["payload_count"]
    if len(body) != expected:
        raise CheckpointError(f"payload is {len(body)} bytes, manifest implies {expected} (truncated or padded)")
    values = np.frombuffer(body, dtype="<f8")
    params = {}
    for e in manifest["params"]:
        chunk = values[e["offset"] : e["offset"] + e["count"]]
        if chunk.size != int(np.prod(e["shape"], dtype=np.int64)):
            raise CheckpointError(f"parameter {e['name']} count does not match shape {e['shape']}")
        params[e["name"]] = chunk.astype(np.float64).reshape(e["shape"])
    ckpt = Checkpoint(params, manifest["stage"], manifest["epoch"], manifest["config"], manifest["rng_state"])
    if ckpt.config_hash != manifest["config_hash"]:
        raise CheckpointError(f"config hash mismatch: stored {manifest['config_hash']}, recomputed {ckpt.config_hash}")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def apply_checkpoint(module: Module, ckpt: Checkpoint, prefix: str | None = None, strict: bool = True) -> list[str]:
    """Copy checkpoint tensors into ``module``; returns the names loaded.

    With ``prefix`` only names starting with it are taken from the checkpoint,
    and the module's other parameters keep their current values.
    """
    state = {n: v for n, v in ckpt.params.items() if prefix is None or n.startswith(prefix)}
    own = dict(module.named_parameters())
    for name, value in state.items():
        if name not in own:
            raise CheckpointError(f"checkpoint parameter {name} not present in model")
        if own[name].shape != value.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {value.shape}, model {own[name].shape}")
    if strict and prefix is None:
        missing = sorted(set(own) - set(state))
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    return module.load_state_dict(state, strict=False)
