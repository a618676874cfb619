"""Binary containers: depth-set files, tensor checkpoints and PFM maps.

Both container kinds share a header: ``b"MVDD"``, a little-endian u32
version, then a u32-length-prefixed UTF-8 JSON block. Depth sets follow it
with float32 ``N x H x W`` blocks in sample order; checkpoints with named
tensors ``(u32 name length, name, u32 rank, u32 dims[rank], float32 data)``.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"MVDD"
VERSION = 1


class FormatError(ValueError):
    pass


def _write_header(f: BinaryIO, meta: dict) -> None:
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    f.write(MAGIC)
    f.write(struct.pack("<II", VERSION, len(blob)))
    f.write(blob)


def _read_header(f: BinaryIO) -> dict:
    if f.read(4) != MAGIC:
        raise FormatError("not an MVDD container")
    version, length = struct.unpack("<II", f.read(8))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    return json.loads(f.read(length).decode("utf-8"))


def is_container(path) -> bool:
    with open(path, "rb") as f:
        return f.read(4) == MAGIC


def read_meta(path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f)


def write_depth_container(path, manifest: dict, samples: np.ndarray) -> None:
    samples = np.asarray(samples, dtype="<f4")
    if samples.ndim != 4:
        raise ValueError("samples must be (count, N, H, W)")
    count, N, H, W = samples.shape
    meta = dict(manifest, count=count, N=N, H=H, W=W)
    with open(path, "wb") as f:
        _write_header(f, meta)
        f.write(np.ascontiguousarray(samples).tobytes())


def read_depth_container(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as f:
        meta = _read_header(f)
        if meta.get("kind") == "checkpoint":
            raise FormatError(f"{path} is a checkpoint, not a depth container")
        shape = (meta["count"], meta["N"], meta["H"], meta["W"])
        data = np.frombuffer(f.read(4 * int(np.prod(shape))), dtype="<f4")
    if data.size != np.prod(shape):
        raise FormatError("truncated depth container")
    return meta, data.reshape(shape).astype(np.float32)


def write_tensors(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        _write_header(f, meta)
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
            key = name.encode("utf-8")
            f.write(struct.pack("<I", len(key)))
            f.write(key)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    tensors = {}
    with open(path, "rb") as f:
        meta = _read_header(f)
        while True:
            raw = f.read(4)
            if not raw:
                break
            (n,) = struct.unpack("<I", raw)
            name = f.read(n).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if rank else 1
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise FormatError(f"truncated tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f4").reshape(dims).copy()
    return meta, tensors


def write_pfm(path, image: np.ndarray) -> None:
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 2:
        raise ValueError("PFM maps must be 2-D")
    H, W = image.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{W} {H}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(image[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind != b"Pf":
            raise FormatError("only single-channel PFM ('Pf') is supported")
        W, H = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(4 * W * H), dtype=dtype)
    if data.size != W * H:
        raise FormatError("truncated PFM")
    return data.reshape(H, W)[::-1].astype(np.float32)
