"""Binary formats: .ten tensors and .miac checkpoints.

Both store little-endian float32 payloads in row-major order; in-memory
compute stays float64.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

TEN_MAGIC = b"MIAT"
CKPT_MAGIC = b"MIAC"
VERSION = 1


class FormatError(Exception):
    pass


def write_tensor(path, array: np.ndarray):
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(TEN_MAGIC)
        f.write(struct.pack("<II", VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != TEN_MAGIC:
        raise FormatError(f"{path}: bad magic bytes {raw[:4]!r}")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    dims = struct.unpack_from(f"<{ndim}I", raw, 12)
    offset = 12 + 4 * ndim
    count = int(np.prod(dims)) if ndim else 1
    if len(raw) - offset != 4 * count:
        raise FormatError(f"{path}: payload size mismatch")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return data.reshape(dims).astype(np.float64)


def _write_entries(f, entries: dict):
    f.write(struct.pack("<I", len(entries)))
    for name, array in entries.items():
        arr = np.ascontiguousarray(array, dtype="<f4")
        encoded = name.encode("utf-8")
        f.write(struct.pack("<I", len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def _read_entries(raw, offset):
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    entries = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        dims = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f4", count=n, offset=offset)
        offset += 4 * n
        entries[name] = data.reshape(dims).astype(np.float64)
    return entries, offset


def write_checkpoint(path, params: dict, optimizer_state: dict | None = None):
    """params / optimizer_state: name -> ndarray. Optimizer entries are
    written as a trailing block under names prefixed 'opt/'."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", VERSION))
        _write_entries(f, params)
        if optimizer_state:
            _write_entries(f, {f"opt/{k}": v for k, v in optimizer_state.items()})


def read_checkpoint(path):
    """Returns (params, optimizer_state) dicts of float64 arrays."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic bytes {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    params, offset = _read_entries(raw, 8)
    opt = {}
    if offset < len(raw):
        block, _ = _read_entries(raw, offset)
        opt = {k[len("opt/"):]: v for k, v in block.items()}
    return params, opt
