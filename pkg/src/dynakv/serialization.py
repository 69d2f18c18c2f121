"""DKVT tensor files: a little-endian binary format plus a JSON mirror.

Binary layout: magic "DKVT", u32 ndim, ndim x u64 dims, then the float64
payload in row-major order. The JSON mirror carries the same shape and a flat
row-major data list for human inspection.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from dynakv.errors import DynaKVError

MAGIC = b"DKVT"


class FormatError(DynaKVError):
    """A DKVT file failed structural validation."""


def write_tensor(path, array):
    arr = np.asarray(array, dtype=np.float64)  # tobytes(order="C") handles layout
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def read_tensor(path):
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: missing DKVT magic")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    offset = 8
    if len(raw) < offset + 8 * ndim:
        raise FormatError(f"{path}: truncated dimension header")
    shape = struct.unpack_from(f"<{ndim}Q", raw, offset) if ndim else ()
    offset += 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    expected = offset + 8 * count
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw) - offset} bytes, expected {8 * count}")
    flat = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    return flat.reshape(shape).astype(np.float64)


def write_tensor_json(path, array):
    arr = np.asarray(array, dtype=np.float64)
    doc = {"magic": "DKVT", "shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
    Path(path).write_text(json.dumps(doc))


def read_tensor_json(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("magic") != "DKVT":
        raise FormatError(f"{path}: missing DKVT magic in JSON mirror")
    shape = tuple(doc["shape"])
    flat = np.asarray(doc["data"], dtype=np.float64)
    count = int(np.prod(shape)) if shape else 1
    if flat.size != count:
        raise FormatError(f"{path}: JSON payload is {flat.size} values, expected {count}")
    return flat.reshape(shape)
