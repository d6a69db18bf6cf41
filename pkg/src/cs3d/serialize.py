"""Binary containers for tensors and checkpoints.

Tensor container::

    b"CS3DTNSR" | version u32 | rank u32 | extents u64[rank] | f64[prod(extents)]

Checkpoint::

    b"CS3DCKPT" | version u32 | count u32 |
    count x (name_len u32 | name utf-8 | is_param u8 | tensor container)

Everything little-endian.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

TENSOR_MAGIC = b"CS3DTNSR"
CHECKPOINT_MAGIC = b"CS3DCKPT"
VERSION = 1


class FormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f8")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<II", VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated stream: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    if _read_exact(fh, 8) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    version, rank = struct.unpack("<II", _read_exact(fh, 8))
    if version != VERSION:
        raise FormatError(f"unsupported tensor container version {version}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8")
    return data.astype(np.float64).reshape(shape)


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(raw))


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_checkpoint(path, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray] | None = None) -> None:
    buffers = buffers or {}
    entries = [(k, v, True) for k, v in params.items()] + [(k, v, False) for k, v in buffers.items()]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, arr, is_param in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", 1 if is_param else 0))
            write_tensor(fh, arr)


def iter_checkpoint(path):
    """Yield (name, is_param, array) for each entry in file order."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != CHECKPOINT_MAGIC:
            raise FormatError("bad checkpoint magic")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, n).decode("utf-8")
            (flag,) = struct.unpack("<B", _read_exact(fh, 1))
            yield name, bool(flag), read_tensor(fh)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    params, buffers = {}, {}
    for name, is_param, arr in iter_checkpoint(Path(path)):
        (params if is_param else buffers)[name] = arr
    return params, buffers
