"""Binary containers used across the package.

Two layouts, both little-endian:

Plane file (preprocessed images)::

    magic  b"HBPL"          4 bytes
    version                 uint16
    count                   uint16   number of planes that follow
    per plane:
        height, width, channels   uint32 x 3
        data                      float32, row-major (H, W, C)

Tensor archive (network weights, SVM banks, feature vectors)::

    magic  b"HBTA"          4 bytes
    version                 uint16
    entry count             uint32
    per entry:
        name length             uint16
        name                    utf-8
        dtype tag               uint8   (0 float32, 1 float64, 2 int64, 3 uint8)
        rank                    uint8
        shape                   uint32 x rank
        data                    little-endian, row-major
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

PLANE_MAGIC = b"HBPL"
ARCHIVE_MAGIC = b"HBTA"
VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1"}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1,
         np.dtype("int64"): 2, np.dtype("uint8"): 3}


class ContainerError(ValueError):
    """Malformed or incompatible container file."""


def write_planes(path, planes) -> None:
    with open(path, "wb") as fh:
        fh.write(PLANE_MAGIC + struct.pack("<HH", VERSION, len(planes)))
        for plane in planes:
            arr = np.asarray(plane)
            if arr.ndim == 2:
                arr = arr[:, :, None]
            if arr.ndim != 3:
                raise ContainerError(f"plane must be 2-D or 3-D, got shape {arr.shape}")
            fh.write(struct.pack("<III", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_planes(path) -> list[np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != PLANE_MAGIC:
        raise ContainerError(f"{path}: not a plane file")
    version, count = struct.unpack_from("<HH", buf, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    off = 8
    planes = []
    for _ in range(count):
        h, w, c = struct.unpack_from("<III", buf, off)
        off += 12
        n = h * w * c
        data = np.frombuffer(buf, dtype="<f4", count=n, offset=off)
        off += 4 * n
        planes.append(data.reshape(h, w, c).astype(np.float32))
    return planes


def write_archive(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named arrays in insertion order."""
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC + struct.pack("<HI", VERSION, len(tensors)))
        for name, value in tensors.items():
            arr = np.asarray(value)
            tag = _TAGS.get(arr.dtype)
            if tag is None:
                raise ContainerError(f"{name}: unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<BB", tag, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def read_archive(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != ARCHIVE_MAGIC:
        raise ContainerError(f"{path}: not a tensor archive")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    off = 10
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        tag, rank = struct.unpack_from("<BB", buf, off)
        off += 2
        if tag not in _DTYPES:
            raise ContainerError(f"{path}: entry {name!r} has unknown dtype tag {tag}")
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        dt = np.dtype(_DTYPES[tag])
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape)
        off += n * dt.itemsize
        out[name] = arr.astype(dt.newbyteorder("="))
    return out


def pack_json(obj) -> np.ndarray:
    """Encode a JSON-able object as a uint8 array for storage in an archive."""
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def unpack_json(arr: np.ndarray):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))
