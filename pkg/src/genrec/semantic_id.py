"""Multimodal token layout, per-item code records, masking, and decoding targets.

Input token ids are laid out modality-major, then level-major::

    [mod 1 level 1 | mod 1 level 2 | ... | mod D level L+1 | mask tokens | pad bos eos]

with one mask token per (modality, level). The decoder has its own smaller
vocabulary covering only the target modality's levels plus the three
specials.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CodeOutOfRange, FormatError, HistoryTooLong, MissingTargetModality

MAX_HISTORY = 20


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    level_sizes: tuple[int, ...]

    @property
    def levels(self) -> int:
        return len(self.level_sizes)


@dataclass(frozen=True)
class ModalityLayout:
    modalities: tuple[ModalitySpec, ...]
    offsets: tuple[tuple[int, ...], ...]
    mask_ids: tuple[tuple[int, ...], ...]
    pad_id: int
    bos_id: int
    eos_id: int

    @property
    def vocab_size(self) -> int:
        return self.eos_id + 1

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.modalities]

    @property
    def item_width(self) -> int:
        return sum(m.levels for m in self.modalities)

    def index(self, modality: str | int) -> int:
        if isinstance(modality, int):
            return modality
        try:
            return self.names.index(modality)
        except ValueError:
            raise MissingTargetModality(f"unknown modality {modality!r}; layout has {self.names}") from None

    def modality_slice(self, modality: str | int) -> slice:
        d = self.index(modality)
        start = sum(m.levels for m in self.modalities[:d])
        return slice(start, start + self.modalities[d].levels)

    def code_ranges(self) -> list[tuple[int, int]]:
        """Half-open token ranges of every (modality, level) pair."""
        return [
            (off, off + size)
            for spec, offs in zip(self.modalities, self.offsets)
            for off, size in zip(offs, spec.level_sizes)
        ]

    def level_of_position(self) -> np.ndarray:
        """Within-item level index for each of the ``item_width`` slots."""
        return np.arange(self.item_width)

    def mask_row(self) -> np.ndarray:
        return np.array([t for ids in self.mask_ids for t in ids], dtype=np.int64)


def build_layout(specs: Iterable[ModalitySpec | tuple[str, Sequence[int]]]) -> ModalityLayout:
    mods = tuple(s if isinstance(s, ModalitySpec) else ModalitySpec(s[0], tuple(int(v) for v in s[1])) for s in specs)
    if not mods:
        raise ValueError("layout needs at least one modality")
    for m in mods:
        if not m.level_sizes or min(m.level_sizes) < 1:
            raise ValueError(f"modality {m.name!r} needs positive level sizes, got {m.level_sizes}")
    cursor = 0
    offsets = []
    for m in mods:
        offs = []
        for size in m.level_sizes:
            offs.append(cursor)
            cursor += size
        offsets.append(tuple(offs))
    masks = []
    for m in mods:
        masks.append(tuple(range(cursor, cursor + m.levels)))
        cursor += m.levels
    return ModalityLayout(mods, tuple(offsets), tuple(masks), cursor, cursor + 1, cursor + 2)


@dataclass(frozen=True)
class TargetVocab:
    """Decoder vocabulary for one modality: its levels followed by pad, bos, eos."""

    modality: str
    level_sizes: tuple[int, ...]
    offsets: tuple[int, ...]
    pad_id: int
    bos_id: int
    eos_id: int

    @property
    def size(self) -> int:
        return self.eos_id + 1

    @property
    def depth(self) -> int:
        return len(self.level_sizes)

    def to_tokens(self, codes) -> np.ndarray:
        c = np.asarray(codes, dtype=np.int64)
        if c.shape[-1] != self.depth:
            raise CodeOutOfRange(f"expected {self.depth} codes, got {c.shape[-1]}")
        sizes = np.asarray(self.level_sizes)
        if c.size and ((c < 0).any() or (c >= sizes).any()):
            raise CodeOutOfRange(f"codes {c.tolist()} outside level sizes {list(self.level_sizes)}")
        return c + np.asarray(self.offsets)

    def to_codes(self, tokens) -> np.ndarray:
        t = np.asarray(tokens, dtype=np.int64)
        return t - np.asarray(self.offsets[: t.shape[-1]])

    def token_to_code(self, token: int) -> tuple[int, int]:
        for level in range(self.depth - 1, -1, -1):
            if token >= self.offsets[level]:
                code = token - self.offsets[level]
                if code >= self.level_sizes[level]:
                    break
                return level, code
        raise CodeOutOfRange(f"token {token} is not a code token")


def target_vocab(layout: ModalityLayout, modality: str | int) -> TargetVocab:
    spec = layout.modalities[layout.index(modality)]
    offs = tuple(int(v) for v in np.concatenate([[0], np.cumsum(spec.level_sizes)[:-1]]))
    n = sum(spec.level_sizes)
    return TargetVocab(spec.name, spec.level_sizes, offs, n, n + 1, n + 2)


@dataclass(frozen=True)
class ItemCodes:
    item_id: int
    codes: dict[str, np.ndarray | None]
    masked: frozenset[str] = field(default_factory=frozenset)

    def present(self, modality: str) -> bool:
        return self.codes.get(modality) is not None


def _global_tokens(item: ItemCodes, layout: ModalityLayout) -> list[int]:
    out: list[int] = []
    for d, spec in enumerate(layout.modalities):
        codes = item.codes.get(spec.name)
        if codes is None or spec.name in item.masked:
            out.extend(layout.mask_ids[d])
            continue
        if len(codes) != spec.levels:
            raise CodeOutOfRange(f"item {item.item_id}: {spec.name} has {len(codes)} codes, expected {spec.levels}")
        for l, c in enumerate(codes):
            if not 0 <= int(c) < spec.level_sizes[l]:
                raise CodeOutOfRange(f"item {item.item_id}: {spec.name} level {l} code {int(c)} out of range")
            out.append(layout.offsets[d][l] + int(c))
    return out


def assemble_history(
    items: Sequence[ItemCodes],
    layout: ModalityLayout,
    max_items: int = MAX_HISTORY,
    target: str | None = None,
) -> list[int]:
    if len(items) > max_items:
        raise HistoryTooLong(f"history of {len(items)} items exceeds the limit of {max_items}")
    tokens: list[int] = []
    for item in items:
        if target is not None and not item.present(target):
            raise MissingTargetModality(f"item {item.item_id} lacks target modality {target!r}")
        tokens.extend(_global_tokens(item, layout))
    return tokens


def sample_mask_flags(presence: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean ``(n, D)`` flags: absent modalities, plus one random modality per item with prob ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"masking probability must be in [0, 1], got {p}")
    presence = np.asarray(presence, dtype=bool)
    n, D = presence.shape
    hit = rng.random(n) < p
    which = rng.integers(D, size=n)
    flags = ~presence
    flags[np.flatnonzero(hit), which[hit]] = True
    return flags


def mask_modalities(items: Sequence[ItemCodes], p: float, rng: np.random.Generator, modalities: Sequence[str] | None = None) -> list[ItemCodes]:
    names = list(modalities) if modalities is not None else sorted({k for it in items for k in it.codes})
    if not items:
        return []
    presence = np.array([[it.present(m) for m in names] for it in items])
    flags = sample_mask_flags(presence, p, rng)
    return [
        replace(it, masked=frozenset(it.masked | {names[d] for d in np.flatnonzero(row)}))
        for it, row in zip(items, flags)
    ]


def target_tokens(item: ItemCodes, modality: str, layout: ModalityLayout) -> np.ndarray:
    codes = item.codes.get(modality)
    if codes is None:
        raise MissingTargetModality(f"item {item.item_id} lacks target modality {modality!r}")
    return target_vocab(layout, modality).to_tokens(codes)


class CodeTable:
    """All items' codes in dense arrays, indexed by row."""

    def __init__(self, layout: ModalityLayout, item_ids: Sequence[int], codes: dict[str, np.ndarray], presence: np.ndarray):
        self.layout = layout
        self.item_ids = np.asarray(item_ids, dtype=np.int64)
        self.codes = {k: np.asarray(v, dtype=np.int64) for k, v in codes.items()}
        self.presence = np.asarray(presence, dtype=bool)
        self.row_of = {int(i): r for r, i in enumerate(self.item_ids)}
        if len(self.row_of) != len(self.item_ids):
            raise FormatError("duplicate item ids in code table")
        self._tokens = self._build_tokens()
        self._mask_row = layout.mask_row()

    @classmethod
    def from_items(cls, layout: ModalityLayout, items: Sequence[ItemCodes]) -> "CodeTable":
        items = sorted(items, key=lambda it: it.item_id)
        codes = {}
        presence = np.zeros((len(items), len(layout.modalities)), dtype=bool)
        for d, spec in enumerate(layout.modalities):
            arr = np.zeros((len(items), spec.levels), dtype=np.int64)
            for r, it in enumerate(items):
                c = it.codes.get(spec.name)
                if c is not None:
                    arr[r] = c
                    presence[r, d] = True
            codes[spec.name] = arr
        return cls(layout, [it.item_id for it in items], codes, presence)

    def _build_tokens(self) -> np.ndarray:
        lay = self.layout
        out = np.empty((len(self.item_ids), lay.item_width), dtype=np.int64)
        for d, spec in enumerate(lay.modalities):
            sl = lay.modality_slice(d)
            c = self.codes[spec.name]
            sizes = np.asarray(spec.level_sizes)
            ok = self.presence[:, d]
            if ((c[ok] < 0) | (c[ok] >= sizes)).any():
                raise CodeOutOfRange(f"{spec.name}: code outside level sizes {list(spec.level_sizes)}")
            tok = c + np.asarray(lay.offsets[d])
            tok[~ok] = np.asarray(lay.mask_ids[d])
            out[:, sl] = tok
        return out

    def __len__(self) -> int:
        return len(self.item_ids)

    def rows(self, items: Iterable[int]) -> np.ndarray:
        return np.array([self.row_of[int(i)] for i in items], dtype=np.int64)

    def item(self, item_id: int) -> ItemCodes:
        r = self.row_of[int(item_id)]
        return ItemCodes(
            int(item_id),
            {m.name: (self.codes[m.name][r].copy() if self.presence[r, d] else None) for d, m in enumerate(self.layout.modalities)},
        )

    def history_tokens(self, rows: np.ndarray, mask_flags: np.ndarray | None = None) -> np.ndarray:
        """Token matrix ``(len(rows), item_width)``; flagged modalities become mask tokens."""
        tok = self._tokens[rows].copy()
        if mask_flags is not None:
            for d in range(len(self.layout.modalities)):
                sl = self.layout.modality_slice(d)
                hit = mask_flags[:, d]
                tok[hit, sl] = self._mask_row[sl]
        return tok

    def target_codes(self, modality: str, rows: np.ndarray | None = None) -> np.ndarray:
        d = self.layout.index(modality)
        sel = slice(None) if rows is None else rows
        if not self.presence[sel, d].all():
            raise MissingTargetModality(f"some items lack target modality {modality!r}")
        return self.codes[modality][sel]

    def require_target(self, modality: str) -> None:
        d = self.layout.index(modality)
        missing = self.item_ids[~self.presence[:, d]]
        if missing.size:
            raise MissingTargetModality(
                f"{missing.size} items lack target modality {modality!r} (first: {int(missing[0])})"
            )

    def restrict(self, modalities: Sequence[str]) -> "CodeTable":
        lay = build_layout([self.layout.modalities[self.layout.index(m)] for m in modalities])
        idx = [self.layout.index(m) for m in modalities]
        return CodeTable(lay, self.item_ids, {m: self.codes[m] for m in modalities}, self.presence[:, idx])


def write_table(table: CodeTable, path) -> None:
    lay = table.layout
    header = "#item_id\t" + "\t".join(f"{m.name}:{','.join(str(s) for s in m.level_sizes)}" for m in lay.modalities)
    lines = [header]
    for r, item in enumerate(table.item_ids):
        fields = [str(int(item))]
        for d, m in enumerate(lay.modalities):
            fields.append("1" if table.presence[r, d] else "0")
            fields.extend(str(int(c)) for c in table.codes[m.name][r])
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path) -> CodeTable:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read semantic-ID table {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#item_id"):
        raise FormatError(f"{path}: missing '#item_id' header")
    specs = []
    for col in lines[0].split("\t")[1:]:
        name, _, sizes = col.partition(":")
        specs.append(ModalitySpec(name, tuple(int(s) for s in sizes.split(","))))
    layout = build_layout(specs)
    width = 1 + sum(1 + m.levels for m in specs)
    ids, presence = [], []
    codes = {m.name: [] for m in specs}
    for no, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != width:
            raise FormatError(f"{path}:{no}: expected {width} fields, got {len(parts)}")
        vals = [int(p) for p in parts]
        ids.append(vals[0])
        pos = 1
        row = []
        for m in specs:
            row.append(bool(vals[pos]))
            codes[m.name].append(vals[pos + 1: pos + 1 + m.levels])
            pos += 1 + m.levels
        presence.append(row)
    arrays = {m.name: np.array(codes[m.name], dtype=np.int64).reshape(-1, m.levels) for m in specs}
    return CodeTable(layout, ids, arrays, np.array(presence, dtype=bool).reshape(-1, len(specs)))
