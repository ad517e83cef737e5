"""Binary checkpoint container for networks, optimizer state and run progress.

Layout (all integers little-endian):

    bytes 0..5   magic b"HSCKPT"
    bytes 6..7   uint16 format version (currently 1)
    uint32       JSON header length, then that many UTF-8 bytes; the JSON
                 object holds "arch" (architecture fields), "tasks" (list of
                 [task_id, num_classes, input_channels, share_first_conv])
                 and "extra" (free-form run state, e.g. RNG snapshots)
    uint32       tensor count, then per tensor:
                     uint16 name length + UTF-8 name
                     uint8  dtype code (1=float32, 2=float64, 3=int64)
                     uint8  ndim, then ndim x uint32 extents
                     payload, little-endian row-major

Tensors are written in the order supplied so identical state always produces
identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"HSCKPT"
VERSION = 1

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODE_FOR_DTYPE = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


class CheckpointError(IOError):
    """Raised for unreadable, truncated or incompatible checkpoint files."""


@dataclass
class Checkpoint:
    arch: dict
    tasks: list            # [task_id, num_classes, input_channels, share] rows
    tensors: dict[str, np.ndarray]
    tensor_order: list[str]
    extra: dict


def save_checkpoint(path: str, arch: dict, tasks: list,
                    tensors: list[tuple[str, np.ndarray]], extra: dict | None = None) -> None:
    header = json.dumps({"arch": arch, "tasks": tasks, "extra": extra or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            arr = np.ascontiguousarray(arr)
            code = _CODE_FOR_DTYPE.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(_DTYPE_CODES[code]).tobytes())


def _take(buf: bytes, offset: int, count: int, path: str) -> tuple[bytes, int]:
    if offset + count > len(buf):
        raise CheckpointError(f"{path}: truncated checkpoint "
                              f"(needed {offset + count} bytes, have {len(buf)})")
    return buf[offset:offset + count], offset + count


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    chunk, off = _take(buf, 0, 8, path)
    if chunk[:6] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {chunk[:6]!r}, not a checkpoint")
    version = struct.unpack("<H", chunk[6:8])[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    chunk, off = _take(buf, off, 4, path)
    hlen = struct.unpack("<I", chunk)[0]
    chunk, off = _take(buf, off, hlen, path)
    try:
        header = json.loads(chunk.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt JSON header: {exc}") from exc

    chunk, off = _take(buf, off, 4, path)
    count = struct.unpack("<I", chunk)[0]
    tensors: dict[str, np.ndarray] = {}
    order: list[str] = []
    for _ in range(count):
        chunk, off = _take(buf, off, 2, path)
        nlen = struct.unpack("<H", chunk)[0]
        chunk, off = _take(buf, off, nlen, path)
        name = chunk.decode("utf-8")
        chunk, off = _take(buf, off, 2, path)
        code, ndim = struct.unpack("<BB", chunk)
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        chunk, off = _take(buf, off, 4 * ndim, path)
        shape = struct.unpack(f"<{ndim}I", chunk) if ndim else ()
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        chunk, off = _take(buf, off, nbytes, path)
        tensors[name] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        order.append(name)
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes after tensor data")
    return Checkpoint(arch=header["arch"], tasks=header["tasks"], tensors=tensors,
                      tensor_order=order, extra=header.get("extra", {}))
