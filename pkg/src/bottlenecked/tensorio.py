"""Raw tensor blobs.

Each tensor record is::

    dtype tag   4 bytes ASCII, one of b"f32 ", b"f64 ", b"i64 "
    ndim        uint32 little-endian
    shape       ndim x uint32 little-endian
    data        little-endian raw buffer, C order

Records are concatenated; the index returned by :func:`write_blob` (kept in
the JSON manifest) gives each record's name, byte offset and length.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

TAGS = {b"f32 ": np.dtype("<f4"), b"f64 ": np.dtype("<f8"), b"i64 ": np.dtype("<i8")}
_TAG_OF = {v.str: k for k, v in TAGS.items()}


class BlobError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    le = arr.dtype.newbyteorder("<")
    if le.str not in _TAG_OF:
        raise BlobError(f"unsupported dtype {arr.dtype}")
    head = _TAG_OF[le.str] + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=le).tobytes()


def decode(buf: bytes) -> np.ndarray:
    tag = buf[:4]
    if tag not in TAGS:
        raise BlobError(f"unknown dtype tag {tag!r}")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    shape = struct.unpack_from(f"<{ndim}I", buf, 8)
    start = 8 + 4 * ndim
    dt = TAGS[tag]
    n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) - start != n:
        raise BlobError(f"record length {len(buf) - start} does not match shape {shape}")
    return np.frombuffer(buf[start:], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def write_blob(path, tensors: Mapping[str, np.ndarray]) -> list[dict]:
    index, offset = [], 0
    with open(path, "wb") as fh:
        for name, arr in tensors.items():
            rec = encode(arr)
            fh.write(rec)
            arr = np.asarray(arr)
            index.append({
                "name": name, "dtype": _TAG_OF[arr.dtype.newbyteorder("<").str].decode().strip(),
                "shape": list(arr.shape), "offset": offset, "nbytes": len(rec),
            })
            offset += len(rec)
    return index


def read_blob(path, index: list[dict]) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    out = {}
    for entry in index:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(data):
            raise BlobError(f"{path}: truncated at tensor {entry['name']}")
        arr = decode(data[start:start + n])
        if list(arr.shape) != list(entry["shape"]):
            raise BlobError(f"{path}: shape mismatch for {entry['name']}")
        out[entry["name"]] = arr
    return out
