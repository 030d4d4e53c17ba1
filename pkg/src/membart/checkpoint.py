"""Binary checkpoint format.

Layout, all little-endian::

    b"MBRT"  u32 version  32-byte config digest
    repeated: u16 name_len, name (utf-8), u8 dtype (0 = f32, 1 = f64), u8 rank, u64 dims[rank], raw data
    8-byte blake2b checksum of every preceding byte
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MBRT"
VERSION = 1
DIGEST_BYTES = 32
CHECKSUM_BYTES = 8
_HEADER = struct.Struct("<4sI")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    digest: bytes
    tensors: dict[str, np.ndarray]


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=CHECKSUM_BYTES).digest()


def encode_checkpoint(tensors: dict[str, np.ndarray], digest: bytes) -> bytes:
    if len(digest) != DIGEST_BYTES:
        raise ValueError(f"config digest must be {DIGEST_BYTES} bytes")
    parts = [_HEADER.pack(MAGIC, VERSION), digest]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise TypeError(f"{name}: only float32/float64 tensors can be stored, got {arr.dtype}")
        raw = name.encode("utf-8")
        tag = _TAGS[arr.dtype]
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    body = b"".join(parts)
    return body + _checksum(body)


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], digest: bytes) -> None:
    """Write atomically: a temporary file is renamed over ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(tensors, digest))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _parse_entries(buf: bytes, end: int) -> dict[str, np.ndarray]:
    pos = _HEADER.size + DIGEST_BYTES
    out: dict[str, np.ndarray] = {}

    def need(n: int, what: str) -> None:
        if pos + n > end:
            raise CheckpointError(f"truncated checkpoint: {what} at offset {pos} needs {n} bytes, "
                                  f"{max(0, end - pos)} remain")

    while pos < end:
        need(2, "name length")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(n + 2, "entry header")
        name = buf[pos:pos + n].decode("utf-8", errors="replace")
        pos += n
        tag, rank = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if tag not in _DTYPES:
            raise CheckpointError(f"entry {name!r} at offset {pos - 2}: unknown dtype tag {tag}")
        need(8 * rank, f"dims of {name!r}")
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPES[tag].itemsize
        need(nbytes, f"data of {name!r}")
        arr = np.frombuffer(buf, dtype=_DTYPES[tag], count=nbytes // _DTYPES[tag].itemsize, offset=pos)
        out[name] = arr.reshape(shape).astype(_DTYPES[tag].newbyteorder("="), copy=True)
        pos += nbytes
    return out


def decode_checkpoint(buf: bytes, expect_digest: bytes | None = None) -> Checkpoint:
    head = _HEADER.size + DIGEST_BYTES
    if len(buf) < _HEADER.size:
        raise CheckpointError(f"truncated checkpoint: header needs {_HEADER.size} bytes, file has {len(buf)}")
    magic, version = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a checkpoint")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if len(buf) < head + CHECKSUM_BYTES:
        raise CheckpointError(f"truncated checkpoint: {len(buf)} bytes is shorter than header plus checksum")
    end = len(buf) - CHECKSUM_BYTES
    if _checksum(buf[:end]) != buf[end:]:
        # a short file also fails here; say where the entries run out when the parse can tell
        detail = ""
        try:
            _parse_entries(buf, len(buf))
        except CheckpointError as e:
            detail = f"; {e}"
        raise CheckpointError(f"checkpoint integrity check failed (checksum mismatch){detail}")
    digest = bytes(buf[_HEADER.size:head])
    if expect_digest is not None and digest != expect_digest:
        raise CheckpointError(f"config digest mismatch: checkpoint {digest.hex()} vs config {expect_digest.hex()}")
    return Checkpoint(digest, _parse_entries(buf, end))


def load_checkpoint(path: str | Path, expect_digest: bytes | None = None) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), expect_digest)
