"""Binary weight checkpoints.

Layout: ``b"CMPN"``, u32 format version, then one record per array:
u32 name length, UTF-8 name, u32 rank, u32 per dimension, float32 payload.
All integers and floats are little-endian. The model config digest travels as
a rank-0 record whose name carries the hex digest.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CMPN"
VERSION = 1
DIGEST_PREFIX = "meta.config_sha256:"


class CheckpointError(ValueError):
    pass


def encode(state: dict[str, np.ndarray], config_digest: str | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    items = list(state.items())
    if config_digest is not None:
        items.insert(0, (DIGEST_PREFIX + config_digest, np.zeros((), dtype=np.float32)))
    for name, arr in items:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], str | None]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    state: dict[str, np.ndarray] = {}
    digest = None
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * count > len(blob):
                raise CheckpointError(f"record {name!r} is truncated")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
            if name.startswith(DIGEST_PREFIX):
                digest = name[len(DIGEST_PREFIX):]
            else:
                state[name] = arr
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return state, digest


def save(path, state: dict[str, np.ndarray], config_digest: str | None = None) -> None:
    Path(path).write_bytes(encode(state, config_digest))


def load(path, expected_digest: str | None = None) -> dict[str, np.ndarray]:
    """Read a checkpoint; reject it when its config digest differs from ``expected_digest``."""
    state, digest = decode(Path(path).read_bytes())
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError(
            f"config hash mismatch: checkpoint has {digest or 'none'}, expected {expected_digest}"
        )
    return state
