"""ECV1 binary container: one clip plus an optional named-tensor section.

Layout (all little-endian)::

    b"ECV1" | T u32 | H u32 | W u32 | T*H*W f32 (frame-major, row-major)
    then zero or more records:
    name_len u32 | name utf-8 | rank u32 | dims u32*rank | prod(dims) f32

Checkpoints and embedding caches use T = H = W = 0 and carry only records.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ECV1"


class ContainerError(ValueError):
    pass


def encode(video: np.ndarray | None = None, tensors: dict[str, np.ndarray] | None = None) -> bytes:
    parts = [MAGIC]
    if video is None:
        parts.append(struct.pack("<3I", 0, 0, 0))
    else:
        video = np.asarray(video)
        if video.ndim != 3:
            raise ContainerError(f"clip must be T x H x W, got shape {video.shape}")
        if not np.all(np.isfinite(video)):
            raise ContainerError("clip contains non-finite values")
        parts.append(struct.pack("<3I", *video.shape))
        parts.append(np.ascontiguousarray(video, dtype="<f4").tobytes())
    for name, arr in (tensors or {}).items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> tuple[np.ndarray | None, dict[str, np.ndarray]]:
    if buf[:4] != MAGIC:
        raise ContainerError(f"bad magic {buf[:4]!r}")
    if len(buf) < 16:
        raise ContainerError("truncated header")
    t, h, w = struct.unpack_from("<3I", buf, 4)
    off = 16
    n = t * h * w
    video = None
    if n:
        end = off + 4 * n
        if end > len(buf):
            raise ContainerError(f"payload holds {(len(buf) - off) // 4} values, header says {n}")
        video = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(t, h, w).astype(np.float32)
        off = end
    tensors: dict[str, np.ndarray] = {}
    while off < len(buf):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        if off + 4 * count > len(buf):
            raise ContainerError(f"tensor {name!r} truncated")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)
        off += 4 * count
    return video, tensors


def write(path, video=None, tensors=None) -> None:
    path = Path(path)
    data = encode(video, tensors)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read(path) -> tuple[np.ndarray | None, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def read_clip(path) -> np.ndarray:
    video, _ = read(path)
    if video is None:
        raise ContainerError(f"{path} holds no clip payload")
    return video
