"""Binary item-embedding files shared by every modality.

Layout: ``magic "GEMB" | u32 version | u64 item count | u32 dim`` followed by
one record per item: ``i64 item id`` and ``dim`` little-endian float32 values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

_MAGIC = b"GEMB"
_VERSION = 1
_HEADER = struct.Struct("<4sIQI")


def write_embeddings(path, item_ids, vectors) -> None:
    ids = np.asarray(item_ids, dtype="<i8")
    vecs = np.asarray(vectors, dtype="<f4")
    if vecs.ndim != 2 or len(ids) != len(vecs):
        raise FormatError(f"{path}: need one vector per item, got {len(ids)} ids and shape {vecs.shape}")
    rec = np.dtype([("item", "<i8"), ("vec", "<f4", (vecs.shape[1],))])
    table = np.zeros(len(ids), dtype=rec)
    table["item"] = ids
    table["vec"] = vecs
    try:
        Path(path).write_bytes(_HEADER.pack(_MAGIC, _VERSION, len(ids), vecs.shape[1]) + table.tobytes())
    except OSError as exc:
        raise FormatError(f"cannot write embeddings to {path}: {exc}") from exc


def read_embeddings(path, dim: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(item_ids, vectors)`` with vectors as float64."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read embeddings from {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, count, d = _HEADER.unpack_from(blob)
    if magic != _MAGIC or version != _VERSION:
        raise FormatError(f"{path}: not an embedding file (magic={magic!r}, version={version})")
    if dim is not None and d != dim:
        raise FormatError(f"{path}: vectors have dimension {d}, expected {dim}")
    rec = np.dtype([("item", "<i8"), ("vec", "<f4", (d,))])
    if len(blob) - _HEADER.size != count * rec.itemsize:
        raise FormatError(
            f"{path}: header promises {count} vectors of dimension {d} "
            f"but payload holds {len(blob) - _HEADER.size} bytes"
        )
    table = np.frombuffer(blob, dtype=rec, count=count, offset=_HEADER.size)
    return table["item"].astype(np.int64), table["vec"].astype(np.float64)
