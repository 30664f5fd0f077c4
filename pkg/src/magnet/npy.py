"""Reader/writer for NPY version 1.0 float arrays."""

from __future__ import annotations

import ast
import os
import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"\x93NUMPY"
_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}


class NpyFormatError(ValueError):
    """Malformed or unsupported NPY content."""


def encode_npy(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    header = f"{{'descr': '<f8', 'fortran_order': False, 'shape': {tuple(arr.shape)!r}, }}"
    # magic(6) + version(2) + length(2) + header + '\n' must be 64-byte aligned
    pad = 64 - (10 + len(header) + 1) % 64
    header = header + " " * (pad % 64) + "\n"
    return MAGIC + b"\x01\x00" + struct.pack("<H", len(header)) + header.encode("latin1") + arr.tobytes()


def decode_npy(raw: bytes) -> np.ndarray:
    if len(raw) < 10 or raw[:6] != MAGIC:
        raise NpyFormatError(f"bad magic: {raw[:6]!r}")
    major, minor = raw[6], raw[7]
    if (major, minor) != (1, 0):
        raise NpyFormatError(f"unsupported NPY version {major}.{minor}")
    (hlen,) = struct.unpack("<H", raw[8:10])
    if len(raw) < 10 + hlen:
        raise NpyFormatError(f"truncated header: need {hlen} bytes, have {len(raw) - 10}")
    header = raw[10 : 10 + hlen].decode("latin1")
    try:
        meta = ast.literal_eval(header.strip())
    except (ValueError, SyntaxError) as exc:
        raise NpyFormatError(f"unparseable header {header!r}") from exc
    if not isinstance(meta, dict) or set(meta) != {"descr", "fortran_order", "shape"}:
        raise NpyFormatError(f"malformed header {header!r}")
    if meta["fortran_order"]:
        raise NpyFormatError(f"fortran_order arrays are not supported: {header!r}")
    dtype = _DTYPES.get(meta["descr"])
    if dtype is None:
        raise NpyFormatError(f"unsupported dtype {meta['descr']!r} in header {header!r}")
    shape = tuple(meta["shape"])
    count = int(np.prod(shape, dtype=np.int64))
    body = raw[10 + hlen :]
    if len(body) != count * dtype.itemsize:
        raise NpyFormatError(
            f"payload is {len(body)} bytes, header {header.strip()!r} implies {count * dtype.itemsize}"
        )
    return np.frombuffer(body, dtype=dtype).astype(np.float64).reshape(shape)


def save_npy(tensor, path: str | os.PathLike) -> None:
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    with open(path, "wb") as fh:
        fh.write(encode_npy(arr))


def load_npy(path: str | os.PathLike) -> Tensor:
    return Tensor(load_array(path))


def load_array(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_npy(fh.read())
