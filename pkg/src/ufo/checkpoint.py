"""Binary checkpoint container.

Layout (all integers little-endian unsigned 64-bit)::

    b"UFO1"
    count
    count x (name_len, name utf-8 bytes, rank, rank x extent, dtype tag u8)
    payloads, raw little-endian, in header order
    payload_length
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"UFO"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
TAGS = {v: k for k, v in DTYPES.items()}


class CheckpointError(ValueError):
    pass


class VersionError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


def text_tensor(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).copy()


def tensor_text(a: np.ndarray) -> str:
    return a.astype(np.uint8).tobytes().decode("utf-8")


def _tag(a: np.ndarray) -> int:
    dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
    for tag, ref in DTYPES.items():
        if dt.kind == ref.kind and dt.itemsize == ref.itemsize:
            return tag
    raise CheckpointError(f"unsupported dtype {a.dtype}")


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    header = [MAGIC + str(VERSION).encode(), struct.pack("<Q", len(tensors))]
    payload = []
    for name, a in tensors.items():
        a = np.asarray(a)
        tag = _tag(a)
        nb = name.encode("utf-8")
        header.append(struct.pack("<Q", len(nb)) + nb + struct.pack("<Q", a.ndim))
        header.append(struct.pack(f"<{a.ndim}Q", *a.shape) + struct.pack("<B", tag))
        payload.append(np.ascontiguousarray(a, dtype=DTYPES[tag]).tobytes())
    body = b"".join(payload)
    return b"".join(header) + body + struct.pack("<Q", len(body))


def loads(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 4 or data[:3] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = data[3:4].decode("ascii", "replace")
    if version != str(VERSION):
        raise VersionError(f"checkpoint format version {version} unsupported; expected {VERSION}")
    if len(data) < 20:
        raise IntegrityError("checkpoint truncated")
    (trailer,) = struct.unpack("<Q", data[-8:])
    pos = 4
    try:
        (count,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        entries = []
        for _ in range(count):
            (n,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            (tag,) = struct.unpack_from("<B", data, pos)
            pos += 1
            if tag not in DTYPES:
                raise CheckpointError(f"unknown dtype tag {tag} for {name}")
            entries.append((name, shape, DTYPES[tag]))
    except struct.error as e:
        raise IntegrityError(f"checkpoint header truncated: {e}") from e
    expected = sum(int(np.prod(s, dtype=np.int64)) * dt.itemsize for _, s, dt in entries)
    if trailer != expected or len(data) - 8 - pos != expected:
        raise IntegrityError(
            f"checkpoint payload length mismatch: header implies {expected} bytes, "
            f"trailer says {trailer}, file holds {len(data) - 8 - pos}"
        )
    out = {}
    for name, shape, dt in entries:
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    return out


def save(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
