"""MRFW binary weight files.

Layout (little-endian)::

    b"MRFW" | version u32 | tensor count u32
    per tensor: name length u32 | UTF-8 name | dtype tag u8 | rank u32 | dims u64[rank] | raw data
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MRFW"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def save_weights(path, tensors):
    """Write an ordered ``{name: array}`` mapping."""
    with open(Path(path), "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in _TAGS:
                raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BI", _TAGS[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())


def load_weights(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a weights file (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported weights version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            tag, rank = struct.unpack_from("<BI", data, off)
            off += 5
            dims = struct.unpack_from(f"<{rank}Q", data, off)
            off += 8 * rank
            dtype = _DTYPES[tag]
            n = int(np.prod(dims)) if rank else 1
            if off + n * dtype.itemsize > len(data):
                raise ValueError("truncated tensor data")
            out[name] = np.frombuffer(data, dtype=dtype, count=n, offset=off).reshape(dims).copy()
            off += n * dtype.itemsize
    except (struct.error, KeyError) as exc:
        raise ValueError(f"{path}: corrupt weights file ({exc})") from exc
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after last tensor")
    return out
