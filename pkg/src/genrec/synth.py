"""Synthetic interaction and embedding fixtures with planted structure.

Items live in a two-level cluster hierarchy. Inside each sub-cluster they sit
on a ring, and users walk that ring: with probability ``locality`` the next
item is one of the ``fanout`` ring successors of the current item, otherwise
it is drawn uniformly from the whole catalogue. Every modality embedding is
built from the cluster centers plus noise; the collaborative modality also
encodes ring position, so it alone carries the transition signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import write_embeddings
from .evalkit import write_interactions


@dataclass
class SyntheticSpec:
    n_items: int = 2000
    branching: tuple[int, ...] = (8, 4)
    n_users: int = 5000
    min_len: int = 5
    max_len: int = 15
    locality: float = 0.9
    fanout: int = 3
    dim: int = 32
    noise: dict[str, float] = field(default_factory=lambda: {"image": 0.6, "text": 0.6, "collab": 0.05})
    signal: dict[str, bool] = field(default_factory=lambda: {"image": False, "text": False, "collab": True})
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_items < 1 or self.n_users < 1 or not self.branching or min(self.branching) < 1:
            raise ValueError("synthetic spec needs positive counts")
        if not 0.0 <= self.locality <= 1.0:
            raise ValueError(f"locality must be in [0, 1], got {self.locality}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")

    @property
    def modalities(self) -> list[str]:
        return list(self.noise)


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    records: list[tuple[int, int, int]]
    embeddings: dict[str, np.ndarray]
    top: np.ndarray
    sub: np.ndarray
    ring: np.ndarray
    successors: list[np.ndarray]

    @property
    def item_ids(self) -> np.ndarray:
        return np.arange(self.spec.n_items, dtype=np.int64)


def generate(spec: SyntheticSpec) -> SyntheticData:
    ss = np.random.SeedSequence(spec.seed)
    rng_items, rng_emb, rng_walk = (np.random.default_rng(s) for s in ss.spawn(3))
    n_top = spec.branching[0]
    n_sub = int(np.prod(spec.branching))
    per_top = n_sub // n_top

    group = np.arange(spec.n_items) % n_sub
    rng_items.shuffle(group)
    top = group // per_top
    sub = group
    ring = np.zeros(spec.n_items, dtype=np.int64)
    members = []
    for g in range(n_sub):
        idx = np.flatnonzero(group == g)
        idx = idx[rng_items.permutation(len(idx))]
        ring[idx] = np.arange(len(idx))
        members.append(idx)

    successors = []
    for i in range(spec.n_items):
        ring_items = members[group[i]]
        k = len(ring_items)
        steps = np.arange(1, min(spec.fanout, max(k - 1, 1)) + 1)
        successors.append(ring_items[(ring[i] + steps) % k] if k > 1 else np.array([i]))

    embeddings = {}
    for m in spec.modalities:
        top_c = rng_emb.normal(scale=4.0, size=(n_top, spec.dim))
        sub_c = rng_emb.normal(scale=1.5, size=(n_sub, spec.dim))
        emb = top_c[top] + sub_c[sub]
        if spec.signal.get(m, False):
            # one shared ring plane, so residual codes mean the same angle in every sub-cluster
            plane = np.linalg.qr(rng_emb.normal(size=(spec.dim, 2)))[0].T
            sizes = np.array([len(members[g]) for g in group])
            theta = 2 * np.pi * ring / np.maximum(sizes, 1)
            emb = emb + 1.5 * (np.cos(theta)[:, None] * plane[0] + np.sin(theta)[:, None] * plane[1])
        scale = spec.noise[m]
        if scale > 0:
            emb = emb + scale * rng_emb.normal(size=emb.shape)
        embeddings[m] = emb

    records = []
    clock = 0
    for u in range(spec.n_users):
        length = int(rng_walk.integers(spec.min_len, spec.max_len + 1))
        cur = int(rng_walk.integers(spec.n_items))
        for _ in range(length):
            records.append((u, cur, clock))
            clock += 1
            if rng_walk.random() < spec.locality:
                cur = int(rng_walk.choice(successors[cur]))
            else:
                cur = int(rng_walk.integers(spec.n_items))
    return SyntheticData(spec, records, embeddings, top, sub, ring, successors)


def write(data: SyntheticData, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"interactions": out / "interactions.tsv"}
    write_interactions(data.records, paths["interactions"])
    for m, emb in data.embeddings.items():
        paths[m] = out / f"emb_{m}.bin"
        write_embeddings(paths[m], data.item_ids, emb)
    labels = out / "items.tsv"
    labels.write_text(
        "#item_id\ttop\tsub\tring\n"
        + "".join(f"{i}\t{t}\t{s}\t{r}\n" for i, (t, s, r) in enumerate(zip(data.top, data.sub, data.ring)))
    )
    paths["labels"] = labels
    return paths
