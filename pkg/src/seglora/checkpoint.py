"""Binary checkpoint container shared by model and adapter snapshots.

Layout (all integers little-endian):

    magic "SL2L" | version u32 | entry count u32 | entries...

Each entry: name length u32, UTF-8 name, dtype tag u8, rank u32,
dims (rank x u32), payload. Tag 0 stores raw little-endian float32
values; tag 1 stores UTF-8 text (rank 1, dims = [byte length]), used
for structured-text headers such as the serialized adapter config.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SL2L"
VERSION = 1
_TAG_F32 = 0
_TAG_TEXT = 1


class CheckpointError(RuntimeError):
    """Container is malformed or from an unsupported version."""


def save_container(path, tensors: dict[str, np.ndarray],
                   texts: dict[str, str] | None = None) -> None:
    texts = texts or {}
    overlap = set(tensors) & set(texts)
    if overlap:
        raise ValueError(f"duplicate entry names: {sorted(overlap)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors) + len(texts)))
        for name in sorted(texts):
            payload = texts[name].encode("utf-8")
            _write_entry_header(fh, name, _TAG_TEXT, (len(payload),))
            fh.write(payload)
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            _write_entry_header(fh, name, _TAG_F32, arr.shape)
            fh.write(arr.tobytes())


def _write_entry_header(fh, name: str, tag: int, dims) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BI", tag, len(dims)))
    for d in dims:
        fh.write(struct.pack("<I", int(d)))


def load_container(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    texts: dict[str, str] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            tag, rank = struct.unpack_from("<BI", data, offset)
            offset += 5
            dims = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            if tag == _TAG_TEXT:
                (nbytes,) = dims
                texts[name] = data[offset:offset + nbytes].decode("utf-8")
                offset += nbytes
            elif tag == _TAG_F32:
                n = int(np.prod(dims, dtype=np.int64)) if dims else 1
                arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset)
                tensors[name] = arr.reshape(dims).copy()
                offset += 4 * n
            else:
                raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name!r}")
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt container: {exc}") from exc
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return tensors, texts
