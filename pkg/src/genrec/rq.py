"""Residual quantization: codebook fitting, encode/decode, EMA updates, collisions.

Each level quantizes what the previous levels left over:

    c_l     = argmin_k ||r_l - e^l_k||^2      (lowest index wins ties)
    r_{l+1} = r_l - e^l_{c_l}

with r_1 the raw embedding (no encoder network in front of the quantizer).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CodeOutOfRange, CollisionOverflow, DimensionMismatch, EmptyInput, FormatError

LLOYD_ITERATIONS = 25
EMA_DECAY = 0.99
EMA_EPS = 1e-5
DEFAULT_COLLISION_VOCAB = 256

_MAGIC = b"RQCD"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


def squared_distances(x: np.ndarray, entries: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Exact ``||x_i - e_k||^2`` for every pair, computed by explicit differences."""
    out = np.empty((x.shape[0], entries.shape[0]))
    for start in range(0, x.shape[0], chunk):
        diff = x[start:start + chunk, None, :] - entries[None, :, :]
        out[start:start + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


@dataclass
class Codebook:
    level: int
    entries: np.ndarray
    cluster_size: np.ndarray
    embed_sum: np.ndarray

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def from_entries(cls, level: int, entries, counts=None) -> "Codebook":
        entries = np.array(entries, dtype=np.float64)
        counts = np.ones(len(entries)) if counts is None else np.asarray(counts, dtype=np.float64)
        return cls(level, entries, counts.copy(), entries * counts[:, None])


def kmeans_init(
    vectors,
    K: int,
    seed: int | np.random.Generator = 0,
    iterations: int = LLOYD_ITERATIONS,
    level: int = 0,
) -> Codebook:
    """k-means++ seeding, then Lloyd iterations; empty clusters take the farthest points."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInput("kmeans_init needs at least one vector")
    if K < 1:
        raise EmptyInput(f"codebook size must be positive, got {K}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = x.shape[0]

    centers = np.empty((K, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = squared_distances(x, centers[:1])[:, 0]
    for k in range(1, K):
        total = closest.sum()
        if total > 0:
            pick = rng.choice(n, p=closest / total)
        else:
            pick = rng.integers(n)
        centers[k] = x[pick]
        closest = np.minimum(closest, squared_distances(x, centers[k:k + 1])[:, 0])

    for _ in range(iterations):
        d2 = squared_distances(x, centers)
        assign = d2.argmin(axis=1)
        counts = np.bincount(assign, minlength=K)
        new = np.zeros_like(centers)
        np.add.at(new, assign, x)
        filled = counts > 0
        new[filled] /= counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            own = d2[np.arange(n), assign]
            order = np.argsort(-own, kind="stable")
            new[empty] = x[order[: empty.size]] if empty.size <= n else x[order[np.arange(empty.size) % n]]
        if np.array_equal(new, centers):
            break
        centers = new

    assign = squared_distances(x, centers).argmin(axis=1)
    counts = np.bincount(assign, minlength=K).astype(np.float64)
    sums = np.zeros_like(centers)
    np.add.at(sums, assign, x)
    return Codebook(level, centers, counts, sums)


@dataclass
class RqCodec:
    """A stack of codebooks plus the table of items sharing each code prefix."""

    codebooks: list[Codebook]
    commitment_weight: float = 0.25
    decay: float = EMA_DECAY
    collision_vocab: int = DEFAULT_COLLISION_VOCAB
    collisions: dict[tuple[int, ...], list[int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        dims = {cb.dim for cb in self.codebooks}
        if len(dims) > 1:
            raise DimensionMismatch(f"codebooks disagree on dimension: {sorted(dims)}")

    @property
    def levels(self) -> int:
        return len(self.codebooks)

    @property
    def dim(self) -> int:
        return self.codebooks[0].dim

    @property
    def sizes(self) -> list[int]:
        return [cb.size for cb in self.codebooks]

    def encode(self, x) -> tuple[np.ndarray, list[np.ndarray]]:
        """Codes ``(n, L)`` and the ``L + 1`` residuals; a 1-D input gives 1-D outputs."""
        arr = np.asarray(x, dtype=np.float64)
        single = arr.ndim == 1
        batch = arr[None, :] if single else arr
        if batch.ndim != 2 or batch.shape[1] != self.dim:
            raise DimensionMismatch(f"expected vectors of dimension {self.dim}, got shape {arr.shape}")
        residual = batch.copy()
        residuals = [residual]
        codes = np.empty((batch.shape[0], self.levels), dtype=np.int64)
        for l, cb in enumerate(self.codebooks):
            c = squared_distances(residual, cb.entries).argmin(axis=1)
            codes[:, l] = c
            residual = residual - cb.entries[c]
            residuals.append(residual)
        if single:
            return codes[0], [r[0] for r in residuals]
        return codes, residuals

    def decode(self, codes) -> np.ndarray:
        c = np.asarray(codes, dtype=np.int64)
        single = c.ndim == 1
        c = c[None, :] if single else c
        if c.shape[1] != self.levels:
            raise CodeOutOfRange(f"expected {self.levels} codes per vector, got {c.shape[1]}")
        out = np.zeros((c.shape[0], self.dim))
        for l, cb in enumerate(self.codebooks):
            col = c[:, l]
            if col.size and (col.min() < 0 or col.max() >= cb.size):
                raise CodeOutOfRange(f"level {l} code outside [0, {cb.size}): {col.min()}..{col.max()}")
            out = out + cb.entries[col]
        return out[0] if single else out

    def ema_update(self, assignments) -> None:
        """Move entries toward the mean of the residuals assigned to them.

        ``assignments`` is an iterable of ``(level, code, residual)`` or a
        mapping ``level -> (codes, residuals)`` with batched arrays.
        """
        per_level: dict[int, tuple[list[int], list[np.ndarray]]] = {}
        if isinstance(assignments, dict):
            for level, (codes, res) in assignments.items():
                per_level[level] = (list(np.asarray(codes).reshape(-1)), list(np.asarray(res)))
        else:
            for level, code, res in assignments:
                bucket = per_level.setdefault(int(level), ([], []))
                bucket[0].append(int(code))
                bucket[1].append(np.asarray(res, dtype=np.float64))
        g = self.decay
        for level, (codes, res) in per_level.items():
            cb = self.codebooks[level]
            counts = np.bincount(np.asarray(codes, dtype=np.int64), minlength=cb.size).astype(np.float64)
            sums = np.zeros_like(cb.entries)
            if codes:
                np.add.at(sums, np.asarray(codes, dtype=np.int64), np.stack(res))
            cb.cluster_size = g * cb.cluster_size + (1.0 - g) * counts
            cb.embed_sum = g * cb.embed_sum + (1.0 - g) * sums
            live = cb.cluster_size > EMA_EPS
            cb.entries[live] = cb.embed_sum[live] / np.maximum(cb.cluster_size[live, None], EMA_EPS)

    def collision_ordinals(self) -> dict[int, int]:
        return {item: k for items in self.collisions.values() for k, item in enumerate(items)}


def commitment_loss(residual: torch.Tensor, entry) -> torch.Tensor:
    """Squared distance with the codebook entry held constant."""
    e = torch.as_tensor(entry, dtype=residual.dtype)
    diff = residual - e.detach()
    return (diff * diff).sum()


def fit(
    vectors,
    L: int,
    K: int,
    iterations: int = LLOYD_ITERATIONS,
    seed: int = 0,
    collision_vocab: int = DEFAULT_COLLISION_VOCAB,
) -> RqCodec:
    """Greedy level-by-level fit: level l runs k-means on the residuals of levels < l."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInput("fit needs a non-empty (n, d) array")
    level_seeds = np.random.SeedSequence(seed).spawn(L)
    residual = x
    books = []
    for l in range(L):
        cb = kmeans_init(residual, K, np.random.default_rng(level_seeds[l]), iterations, level=l)
        books.append(cb)
        assign = squared_distances(residual, cb.entries).argmin(axis=1)
        residual = residual - cb.entries[assign]
    return RqCodec(books, collision_vocab=collision_vocab)


def assign_collision_levels(
    codec: RqCodec | None,
    item_codes: dict[int, np.ndarray],
    collision_vocab: int | None = None,
) -> dict[int, np.ndarray]:
    """Append a per-prefix ordinal so every item's code sequence is unique.

    Items sharing a prefix are numbered in ascending item-id order. The
    prefix table is recorded on ``codec`` when one is given.
    """
    limit = collision_vocab if collision_vocab is not None else (
        codec.collision_vocab if codec is not None else DEFAULT_COLLISION_VOCAB
    )
    buckets: dict[tuple[int, ...], list[int]] = {}
    for item in sorted(item_codes):
        buckets.setdefault(tuple(int(c) for c in item_codes[item]), []).append(item)
    for prefix, items in buckets.items():
        if len(items) > limit:
            raise CollisionOverflow(
                f"{len(items)} items share prefix {list(prefix)}; collision vocabulary holds {limit}"
            )
    out = {}
    for prefix, items in buckets.items():
        for ordinal, item in enumerate(items):
            out[item] = np.array(prefix + (ordinal,), dtype=np.int64)
    if codec is not None:
        codec.collisions = buckets
    return out


def round_to_storage(codec: RqCodec) -> RqCodec:
    """Round entries to 32-bit precision, the precision checkpoints store."""
    for cb in codec.codebooks:
        cb.entries = cb.entries.astype(np.float32).astype(np.float64)
        cb.embed_sum = cb.entries * cb.cluster_size[:, None]
    return codec


def save_codec(codec: RqCodec, path) -> None:
    sizes = set(codec.sizes)
    if len(sizes) != 1:
        raise FormatError(f"checkpoint format needs one codebook size, got {sorted(sizes)}")
    K = sizes.pop()
    parts = [_HEADER.pack(_MAGIC, _VERSION, codec.levels, K, codec.dim, codec.collision_vocab)]
    for cb in codec.codebooks:
        parts.append(np.ascontiguousarray(cb.entries, dtype="<f4").tobytes())
    rows = [
        (prefix, item, ordinal)
        for prefix, items in sorted(codec.collisions.items())
        for ordinal, item in enumerate(items)
    ]
    parts.append(struct.pack("<Q", len(rows)))
    rec = np.dtype([("prefix", "<i4", (codec.levels,)), ("item", "<i8"), ("ordinal", "<i4")])
    table = np.zeros(len(rows), dtype=rec)
    for i, (prefix, item, ordinal) in enumerate(rows):
        table[i] = (prefix, item, ordinal)
    parts.append(table.tobytes())
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise FormatError(f"cannot write codec checkpoint {path}: {exc}") from exc


def load_codec(path) -> RqCodec:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read codec checkpoint {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, L, K, d, vocab = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC or version != _VERSION:
        raise FormatError(f"{path}: not a codec checkpoint (magic={magic!r}, version={version})")
    off = _HEADER.size
    nbytes = L * K * d * 4
    if len(blob) < off + nbytes + 8:
        raise FormatError(f"{path}: truncated codebook payload")
    entries = np.frombuffer(blob, dtype="<f4", count=L * K * d, offset=off).astype(np.float64).reshape(L, K, d)
    off += nbytes
    (count,) = struct.unpack_from("<Q", blob, off)
    off += 8
    rec = np.dtype([("prefix", "<i4", (L,)), ("item", "<i8"), ("ordinal", "<i4")])
    if len(blob) != off + count * rec.itemsize:
        raise FormatError(f"{path}: collision table length mismatch")
    table = np.frombuffer(blob, dtype=rec, count=count, offset=off)
    collisions: dict[tuple[int, ...], list[int]] = {}
    for row in table:
        bucket = collisions.setdefault(tuple(int(c) for c in row["prefix"]), [])
        if int(row["ordinal"]) != len(bucket):
            raise FormatError(f"{path}: collision ordinals out of order for prefix {list(row['prefix'])}")
        bucket.append(int(row["item"]))
    books = [Codebook.from_entries(l, entries[l]) for l in range(L)]
    return RqCodec(books, collision_vocab=vocab, collisions=collisions)
