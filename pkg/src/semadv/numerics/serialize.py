"""Tensor wire format used by model checkpoints.

A tensor is a shape header followed by the flat payload, all little-endian:
rank as uint64, each dimension as uint64, then the elements as float64 in
row-major order. A named container prefixes a uint64 entry count and stores
each entry as (uint64 name length, utf-8 name, tensor bytes).
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = ["tensor_to_bytes", "tensor_from_bytes", "write_tensor", "read_tensor",
           "write_named_tensors", "read_named_tensors"]


def tensor_to_bytes(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    header = struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.astype("<f8").tobytes(order="C")


def tensor_from_bytes(buf, offset=0):
    """Decode one tensor; returns (array, next offset)."""
    (rank,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    dims = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(dims)
    offset += 8 * count
    return arr.astype(np.float64), offset


def write_tensor(path, arr):
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(arr))


def read_tensor(path):
    with open(path, "rb") as f:
        arr, _ = tensor_from_bytes(f.read())
    return arr


def write_named_tensors(path, tensors):
    """Write an ordered {name: array} mapping as one container file."""
    parts = [struct.pack("<Q", len(tensors))]
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(encoded)))
        parts.append(encoded)
        parts.append(tensor_to_bytes(arr))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_named_tensors(path):
    with open(path, "rb") as f:
        buf = f.read()
    (count,) = struct.unpack_from("<Q", buf, 0)
    offset = 8
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<Q", buf, offset)
        offset += 8
        name = buf[offset:offset + nlen].decode("utf-8")
        offset += nlen
        arr, offset = tensor_from_bytes(buf, offset)
        out[name] = arr
    return out
