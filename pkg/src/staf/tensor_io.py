"""STAFTEN1 tensor blobs and the JSON-header container used for all files.

Blob layout: 8-byte magic ``STAFTEN1``, u32 rank, u32 dims[rank], f64 data,
everything little-endian, data row-major.

Container layout: one line of compact, key-sorted JSON terminated by ``\\n``
followed by the blobs listed in ``header["tensors"]``, in that order.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct

import numpy as np

MAGIC = b"STAFTEN1"


class FormatError(ValueError):
    pass


def write_tensor(f, arr) -> None:
    arr = np.asarray(arr, dtype="<f8")
    if not np.all(np.isfinite(arr)):
        raise FormatError("refusing to serialize non-finite tensor")
    f.write(MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr).tobytes(order="C"))


def read_tensor(f) -> np.ndarray:
    magic = f.read(8)
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", f.read(4))
    dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
    count = int(np.prod(dims, dtype=np.int64))
    raw = f.read(8 * count)
    if len(raw) != 8 * count:
        raise FormatError("truncated tensor data")
    return np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)


def tensor_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"


def write_container(path, header: dict, tensors: dict) -> None:
    """Write ``header`` plus ``tensors`` (name -> array, insertion order kept)."""
    header = dict(header)
    header["tensors"] = list(tensors)
    with open(path, "wb") as f:
        f.write(dump_header(header))
        for name in tensors:
            write_tensor(f, tensors[name])


def read_container(path):
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: malformed header") from exc
        if "tensors" not in header:
            raise FormatError(f"{path}: header lacks tensor list")
        tensors = {name: read_tensor(f) for name in header["tensors"]}
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after last tensor")
    return header, tensors


def digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(tensor_bytes(a))
    return h.hexdigest()[:16]
