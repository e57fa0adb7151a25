"""Binary checkpoint format.

Layout::

    b"AVCHASE-CKPT-v1\\n"
    u64 header_len | header (UTF-8 JSON, sorted keys)
    u64 payload_len | payload (little-endian float64 arrays, back to back)
    sha256(header || payload)            # 32 bytes

The header lists every array as ``[name, shape, offset]`` into the payload
and carries arbitrary JSON metadata (config echo, counters, RNG states).
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

MAGIC_PREFIX = b"AVCHASE-CKPT-v"
VERSION = 1
MAGIC = MAGIC_PREFIX + str(VERSION).encode() + b"\n"


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    arrays: Dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def dumps(ckpt: Checkpoint) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(ckpt.arrays):
        arr = np.array(ckpt.arrays[name], dtype="<f8", order="C")
        manifest.append([name, list(arr.shape), offset])
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"version": VERSION, "arrays": manifest, "meta": ckpt.meta},
                        sort_keys=True).encode()
    payload = b"".join(chunks)
    digest = hashlib.sha256(header + payload).digest()
    return (MAGIC + struct.pack("<Q", len(header)) + header
            + struct.pack("<Q", len(payload)) + payload + digest)


def loads(blob: bytes) -> Checkpoint:
    if not blob.startswith(MAGIC_PREFIX):
        raise CheckpointVersionError("not an AVCHASE checkpoint")
    nl = blob.find(b"\n", 0, 64)
    if nl < 0:
        raise CheckpointTruncatedError("truncated magic line")
    if blob[:nl + 1] != MAGIC:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {blob[len(MAGIC_PREFIX):nl].decode(errors='replace')!r}")
    pos = nl + 1

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(blob)}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<Q", take(8))
    header = take(hlen)
    (plen,) = struct.unpack("<Q", take(8))
    payload = take(plen)
    digest = take(32)
    if pos != len(blob):
        raise CheckpointChecksumError("trailing bytes after checksum")
    if hashlib.sha256(header + payload).digest() != digest:
        raise CheckpointChecksumError("checksum mismatch")
    head = json.loads(header)
    if head.get("version") != VERSION:
        raise CheckpointVersionError(f"header version {head.get('version')}")
    arrays = {}
    for name, shape, offset in head["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=n,
                                     offset=offset).reshape(tuple(shape)).astype(np.float64)
    return Checkpoint(arrays, head["meta"])


def save(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
