"""Causal self-attention recommender over item ids.

Serves two roles: its learned item table is the collaborative modality fed to
the residual quantizer, and its full-catalogue ranking is the sequential
baseline. Training uses a sampled softmax with one positive and ``negatives``
items drawn uniformly from the catalogue at every position.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .embeddings import read_embeddings, write_embeddings
from .seq2seq import EncoderLayer, ModelConfig, Norm


@dataclass
class SasrecConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 2
    max_len: int = 20
    dropout: float = 0.1
    negatives: int = 100
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.002
    seed: int = 0
    dtype: str = "float64"

    def layer_config(self) -> ModelConfig:
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by {self.heads} heads")
        return ModelConfig(
            input_vocab=0, output_vocab=0, codes_per_item=1, target_depth=1,
            heads=self.heads, head_dim=self.dim // self.heads, d_ff=4 * self.dim,
            dropout=self.dropout, dtype=self.dtype,
        )


@dataclass
class ItemEmbeddingTable:
    item_ids: np.ndarray
    vectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


class Sasrec(nn.Module):
    """Row 0 of the item table is padding; catalogue item ``r`` lives in row ``r + 1``."""

    def __init__(self, n_items: int, cfg: SasrecConfig):
        super().__init__()
        self.cfg = cfg
        lc = cfg.layer_config()
        gen = torch.Generator().manual_seed(cfg.seed)
        self.items = nn.Parameter(torch.randn(n_items + 1, cfg.dim, generator=gen, dtype=nx.DTYPE) * cfg.dim ** -0.5)
        self.positions = nn.Parameter(torch.randn(cfg.max_len, cfg.dim, generator=gen, dtype=nx.DTYPE) * cfg.dim ** -0.5)
        self.layers = nn.ModuleList([EncoderLayer(lc, causal=True) for _ in range(cfg.layers)])
        self.norm = Norm(cfg.dim)
        self.drop = nn.Dropout(cfg.dropout)
        for name, p in self.named_parameters():
            if p.dim() == 2 and name.startswith("layers"):
                nn.init.xavier_uniform_(p, generator=gen)
        with torch.no_grad():
            self.items[0].zero_()
        self.to(lc.torch_dtype)

    def states(self, rows: torch.Tensor) -> torch.Tensor:
        """Hidden state after every position of left-padded row sequences ``(B, T)``."""
        T = rows.shape[1]
        if T > self.cfg.max_len:
            raise ValueError(f"{T} positions exceed max_len {self.cfg.max_len}")
        x = nx.embedding_lookup(self.items, rows) * self.cfg.dim ** 0.5 + self.positions[self.cfg.max_len - T:]
        key_mask = rows > 0
        x = self.drop(x) * key_mask[..., None]
        for layer in self.layers:
            x = layer(x, key_mask)
        return self.norm(x)


@dataclass
class SasrecModel:
    net: Sasrec
    item_ids: np.ndarray
    history: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.row_of = {int(i): r + 1 for r, i in enumerate(self.item_ids)}

    def table(self) -> ItemEmbeddingTable:
        return ItemEmbeddingTable(self.item_ids.copy(), self.net.items[1:].detach().to(torch.float64).numpy().copy())


def _left_pad(seqs: Sequence[Sequence[int]], length: int) -> np.ndarray:
    out = np.zeros((len(seqs), length), dtype=np.int64)
    for b, s in enumerate(seqs):
        s = list(s)[-length:]
        if s:
            out[b, length - len(s):] = s
    return out


def train_sasrec(
    sequences: Sequence[Sequence[int]],
    items: Sequence[int] | None = None,
    cfg: SasrecConfig | None = None,
    log=None,
) -> SasrecModel:
    """Next-item training on every position of every sequence (item ids, oldest first)."""
    cfg = cfg or SasrecConfig()
    item_ids = np.array(sorted(set(items) if items is not None else {i for s in sequences for i in s}), dtype=np.int64)
    model = SasrecModel(Sasrec(len(item_ids), cfg), item_ids)
    rows = [[model.row_of[int(i)] for i in s] for s in sequences if len(s) >= 2]
    if not rows:
        raise ValueError("SASRec training needs at least one sequence of length 2")
    # sequences longer than the window are cut into overlapping windows ending at each chunk
    windows = []
    for s in rows:
        for end in range(len(s), 1, -cfg.max_len):
            windows.append(s[max(0, end - cfg.max_len - 1): end])
    inputs = _left_pad([w[:-1] for w in windows], cfg.max_len)
    targets = _left_pad([w[1:] for w in windows], cfg.max_len)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    net = model.net
    opt = nx.OptimizerState(list(net.parameters()), lr=cfg.lr)
    n = len(item_ids)
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        total, count = 0.0, 0
        for idx in np.array_split(rng.permutation(len(windows)), max(1, -(-len(windows) // cfg.batch_size))):
            x = torch.as_tensor(inputs[idx])
            y = torch.as_tensor(targets[idx])
            h = net.states(x)
            valid = y > 0
            neg = torch.as_tensor(rng.integers(1, n + 1, size=(*y.shape, cfg.negatives)))
            cand = torch.cat([y[..., None], neg], dim=-1)
            logits = (h[..., None, :] * nx.embedding_lookup(net.items, cand)).sum(-1)
            loss = -torch.log_softmax(logits, dim=-1)[..., 0][valid].mean()
            opt.zero_grad()
            nx.backward(loss)
            nx.adamw_step(opt)
            with torch.no_grad():
                net.items[0].zero_()
            total += float(loss.detach()) * int(valid.sum())
            count += int(valid.sum())
        record = {"epoch": epoch, "split": "train", "loss": total / count}
        model.history.append(record)
        if log is not None:
            log(record)
    net.eval()
    return model


def score_items(model: SasrecModel, histories: Sequence[Sequence[int]]) -> np.ndarray:
    """Inner product of each history's final state with every item, ``(B, n_items)``."""
    net = model.net
    net.eval()
    rows = [[model.row_of[int(i)] for i in h] for h in histories]
    with torch.no_grad():
        h = net.states(torch.as_tensor(_left_pad(rows, net.cfg.max_len)))[:, -1]
        return (h @ net.items[1:].T).to(torch.float64).numpy()


def rank_items(model: SasrecModel, history: Sequence[int]) -> list[int]:
    """Every catalogue item, best first; ties resolve to the smaller item id."""
    return rank_many(model, [history])[0]


def rank_many(model: SasrecModel, histories: Sequence[Sequence[int]], top: int | None = None, chunk: int = 1024) -> list[list[int]]:
    out = []
    for s in range(0, len(histories), chunk):
        scores = score_items(model, histories[s: s + chunk])
        order = np.lexsort((np.broadcast_to(model.item_ids, scores.shape), -scores))
        if top is not None:
            order = order[:, :top]
        out.extend(model.item_ids[order].tolist())
    return out


def export_embeddings(table: ItemEmbeddingTable, path) -> None:
    write_embeddings(path, table.item_ids, table.vectors)


def ingest_embeddings(path, dim: int | None = None) -> ItemEmbeddingTable:
    ids, vecs = read_embeddings(path, dim)
    return ItemEmbeddingTable(ids, vecs)
