"""Binary named-tensor checkpoints.

Layout (all integers little-endian)::

    b"RTRO" | u32 version | u32 count
    count x ( u32 name_len | name utf-8 | u32 rank | rank x u64 dim | u8 dtype )
    payload: f32 little-endian data of every tensor, in manifest order
    u32 CRC32 of the payload
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from retro.memory_bank import MemoryBank

MAGIC = b"RTRO"
VERSION = 1
DTYPE_F32 = 0
LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


def encode(tensors: Dict[str, np.ndarray]) -> bytes:
    head = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    payload = []
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        head.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<B", DTYPE_F32))
        payload.append(np.ascontiguousarray(arr, dtype=LE_F32).tobytes())
    body = b"".join(payload)
    return b"".join(head) + body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes, prefix: Optional[str] = None) -> Dict[str, np.ndarray]:
    """Parse a checkpoint; with ``prefix`` only names starting with it are kept."""
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} unsupported (expected {VERSION})")
    pos = 12
    manifest = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", blob, pos)
            shape = struct.unpack_from(f"<{rank}Q", blob, pos + 4)
            pos += 4 + 8 * rank
            (tag,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            if tag != DTYPE_F32:
                raise CheckpointError(f"{name}: unknown dtype tag {tag}")
            manifest.append((name, shape))
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"truncated or malformed manifest: {exc}") from exc
    names = [m[0] for m in manifest]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names in manifest")
    sizes = [int(np.prod(shape, dtype=np.int64)) * 4 for _, shape in manifest]
    end = pos + sum(sizes)
    if len(blob) != end + 4:
        raise CorruptCheckpointError(f"expected {end + 4} bytes, found {len(blob)}")
    body = blob[pos:end]
    (crc,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError("payload CRC32 mismatch")
    out = {}
    offset = 0
    for (name, shape), size in zip(manifest, sizes):
        if prefix is None or name.startswith(prefix):
            out[name] = np.frombuffer(body, LE_F32, size // 4, offset).astype(np.float32).reshape(shape)
        offset += size
    return out


def save(path, tensors: Dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(tensors))
    tmp.replace(path)


def load(path, prefix: Optional[str] = None) -> Dict[str, np.ndarray]:
    return decode(Path(path).read_bytes(), prefix)


def bank_tensors(bank: MemoryBank) -> Dict[str, np.ndarray]:
    return {f"bank.{bank.view}.{k}": v for k, v in bank.state().items()}


def collect(model_state: Dict[str, np.ndarray], prefix: str = "",
            banks=()) -> Dict[str, np.ndarray]:
    """Flatten a module state (plus optional banks) into checkpoint tensors."""
    out = {prefix + k: v for k, v in model_state.items()}
    for bank in banks:
        out.update(bank_tensors(bank))
    return out


def strip_prefix(tensors: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
