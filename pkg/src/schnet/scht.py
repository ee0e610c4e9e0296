"""SCHT binary tensor files and named-tensor archives.

Layout of one file::

    b"SCHT" | u8 version (1) | u8 dtype (0=f32, 1=f64) | u32le rank |
    rank * u32le dims | row-major little-endian payload

An archive is a directory whose relative paths are the tensor names, e.g.
``srm/mlp_sim/W.scht``.
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"SCHT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class SchtFormatError(ValueError):
    pass


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise SchtFormatError(f"unsupported dtype {arr.dtype}")
    f.write(MAGIC)
    f.write(struct.pack("<BBI", VERSION, code, arr.ndim))
    if arr.ndim:
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    head = f.read(10)
    if len(head) < 10 or head[:4] != MAGIC:
        raise SchtFormatError("missing SCHT header")
    version, code, rank = struct.unpack("<BBI", head[4:])
    if version != VERSION:
        raise SchtFormatError(f"unsupported SCHT version {version}")
    if code not in _DTYPES:
        raise SchtFormatError(f"unknown dtype code {code}")
    raw = f.read(4 * rank)
    if len(raw) != 4 * rank:
        raise SchtFormatError("truncated dims")
    dims = struct.unpack(f"<{rank}I", raw) if rank else ()
    dt = _DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = f.read(n * dt.itemsize)
    if len(payload) != n * dt.itemsize:
        raise SchtFormatError(f"truncated payload: expected {n * dt.itemsize} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def dumps(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def loads(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save_archive(root: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    root = Path(root)
    for name, arr in tensors.items():
        path = root / f"{name}.scht"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            write_tensor(f, arr)


def load_archive(root: str | Path, prefix: str = "") -> dict[str, np.ndarray]:
    root = Path(root)
    out = {}
    for path in sorted(root.rglob("*.scht")):
        name = path.relative_to(root).with_suffix("").as_posix()
        if name.startswith(prefix):
            with open(path, "rb") as f:
                out[name] = read_tensor(f)
    return out


def tensors_digest(tensors: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names and SCHT encodings, in sorted-name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(dumps(tensors[name]))
    return h.hexdigest()
