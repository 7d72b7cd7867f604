"""Encoder-decoder transformer over multimodal code histories.

The encoder reads the flattened history (every item contributes all its
modality codes) and the decoder emits the target modality's codes for the
next item. Encoder self-attention gets two relative position biases that are
summed: one bucketed over the item offset, one over the code-slot offset
within an item. The bucket budgets of the two tables add up to a fixed total.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .errors import (
    FormatError,
    GoldNotPermissible,
    IncompatibleCheckpoint,
    PrefixTooLong,
    SequenceTooLong,
    UnknownPrefix,
)
from .semantic_id import CodeTable, TargetVocab, sample_mask_flags
from .trie import CodeTrie, batched_beam_search


@dataclass
class ModelConfig:
    input_vocab: int
    output_vocab: int
    codes_per_item: int
    target_depth: int
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    head_dim: int = 16
    d_ff: int = 128
    max_items: int = 20
    across_bins: int = 24
    within_bins: int = 8
    dropout: float = 0.1
    seed: int = 0
    dtype: str = "float64"  # "float32" roughly halves CPU time on large fixtures

    def __post_init__(self) -> None:
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    @property
    def width(self) -> int:
        return self.heads * self.head_dim

    @property
    def total_bins(self) -> int:
        return self.across_bins + self.within_bins

    @property
    def max_tokens(self) -> int:
        return self.max_items * self.codes_per_item


def relative_bucket(offset, num_buckets: int, max_distance: int, bidirectional: bool = True) -> np.ndarray:
    """Signed log-spaced bucketing: exact for small offsets, logarithmic beyond."""
    rel = np.asarray(offset, dtype=np.int64)
    ret = np.zeros_like(rel)
    n = num_buckets
    if bidirectional:
        n //= 2
        ret = ret + (rel > 0) * n
        dist = np.abs(rel)
    else:
        dist = np.maximum(-rel, 0)
    max_exact = max(n // 2, 1)
    big = max(max_distance, max_exact + 1)
    with np.errstate(divide="ignore"):
        scaled = np.log(np.maximum(dist, 1) / max_exact) / math.log(big / max_exact) * (n - max_exact)
    large = np.minimum(max_exact + scaled.astype(np.int64), n - 1)
    return ret + np.where(dist < max_exact, dist, large)


@dataclass
class Positions:
    """Item index and within-item slot index of every history token."""

    item: np.ndarray
    level: np.ndarray

    @classmethod
    def for_length(cls, n_tokens: int, codes_per_item: int) -> "Positions":
        t = np.arange(n_tokens)
        return cls(t // codes_per_item, t % codes_per_item)


class DualPositionBias(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.across = nn.Parameter(torch.zeros(cfg.across_bins, cfg.heads, dtype=nx.DTYPE))
        self.within = nn.Parameter(torch.zeros(cfg.within_bins, cfg.heads, dtype=nx.DTYPE))

    def buckets(self, q: Positions, k: Positions) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.cfg
        a = relative_bucket(k.item[..., None, :] - q.item[..., :, None], cfg.across_bins, cfg.max_items)
        w = relative_bucket(k.level[..., None, :] - q.level[..., :, None], cfg.within_bins, cfg.codes_per_item)
        return a, w

    def forward(self, q: Positions, k: Positions) -> torch.Tensor:
        """Bias of shape ``(..., heads, Tq, Tk)``."""
        a, w = self.buckets(q, k)
        bias = self.across[torch.as_tensor(a)] + self.within[torch.as_tensor(w)]
        return bias.movedim(-1, -3)


def rel_pos_bias(q: Positions, k: Positions, module: DualPositionBias) -> torch.Tensor:
    return module(q, k)


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.width
        self.heads, self.head_dim = cfg.heads, cfg.head_dim
        self.q = nn.Linear(d, d, bias=False, dtype=nx.DTYPE)
        self.k = nn.Linear(d, d, bias=False, dtype=nx.DTYPE)
        self.v = nn.Linear(d, d, bias=False, dtype=nx.DTYPE)
        self.o = nn.Linear(d, d, bias=False, dtype=nx.DTYPE)
        self.drop = nn.Dropout(cfg.dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, T, _ = x.shape
        return x.view(B, T, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, kv, key_mask=None, bias=None, causal=False, group: int = 1):
        if group > 1:
            # ``group`` consecutive query rows share one key/value row
            n, t, d = x.shape
            out = self.forward(x.reshape(n // group, group * t, d), kv, key_mask, bias, causal)
            return out.reshape(n, t, d)
        q, k, v = self._split(self.q(x)), self._split(self.k(kv)), self._split(self.v(kv))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if bias is not None:
            scores = scores + bias
        allowed = None
        if key_mask is not None:
            allowed = key_mask[:, None, None, :]
        if causal:
            tri = torch.ones(x.shape[1], kv.shape[1], dtype=torch.bool).tril()
            allowed = tri if allowed is None else allowed & tri
        if allowed is not None:
            scores = scores.masked_fill(~allowed, nx.NEG_INF)
        weights = nx.softmax_rows(scores)
        if allowed is not None:
            # rows with no admissible key attend to nothing
            weights = weights * allowed
        out = self.drop(weights) @ v
        B, _, T, _ = out.shape
        return self.o(out.transpose(1, 2).reshape(B, T, self.heads * self.head_dim))


class FeedForward(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.up = nn.Linear(cfg.width, cfg.d_ff, dtype=nx.DTYPE)
        self.down = nn.Linear(cfg.d_ff, cfg.width, dtype=nx.DTYPE)
        self.drop = nn.Dropout(cfg.dropout)
        nn.init.zeros_(self.up.bias)
        nn.init.zeros_(self.down.bias)

    def forward(self, x):
        return self.down(self.drop(nx.gelu(self.up(x))))


class Norm(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(width, dtype=nx.DTYPE))
        self.bias = nn.Parameter(torch.zeros(width, dtype=nx.DTYPE))

    def forward(self, x):
        return nx.layer_norm(x, self.weight, self.bias)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, causal: bool = False):
        super().__init__()
        self.causal = causal
        self.n1, self.attn = Norm(cfg.width), Attention(cfg)
        self.n2, self.ff = Norm(cfg.width), FeedForward(cfg)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, key_mask, bias=None):
        h = self.n1(x)
        x = x + self.drop(self.attn(h, h, key_mask, bias, causal=self.causal))
        return x + self.drop(self.ff(self.n2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n1, self.self_attn = Norm(cfg.width), Attention(cfg)
        self.n2, self.cross = Norm(cfg.width), Attention(cfg)
        self.n3, self.ff = Norm(cfg.width), FeedForward(cfg)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, mem_mask, bias, group: int = 1):
        h = self.n1(x)
        x = x + self.drop(self.self_attn(h, h, None, bias, causal=True))
        x = x + self.drop(self.cross(self.n2(x), memory, mem_mask, group=group))
        return x + self.drop(self.ff(self.n3(x)))


class Seq2SeqModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        d = cfg.width
        self.enc_embed = nn.Parameter(torch.randn(cfg.input_vocab, d, generator=gen, dtype=nx.DTYPE) * 0.5)
        self.dec_embed = nn.Parameter(torch.randn(cfg.output_vocab, d, generator=gen, dtype=nx.DTYPE) * 0.5)
        self.out_embed = nn.Parameter(torch.randn(cfg.output_vocab, d, generator=gen, dtype=nx.DTYPE) * 0.5)
        self.enc_bias = DualPositionBias(cfg)
        self.dec_bias = nn.Parameter(torch.zeros(cfg.within_bins, cfg.heads, dtype=nx.DTYPE))
        self.encoder = nn.ModuleList([EncoderLayer(cfg) for _ in range(cfg.enc_layers)])
        self.decoder = nn.ModuleList([DecoderLayer(cfg) for _ in range(cfg.dec_layers)])
        self.enc_norm = Norm(d)
        self.dec_norm = Norm(d)
        for name, p in self.named_parameters():
            if p.dim() == 2 and "embed" not in name and "bias" not in name:
                nn.init.xavier_uniform_(p, generator=gen)
        # initialise in float64 so both precisions start from the same weights
        self.to(cfg.torch_dtype)

    def encode(self, tokens: torch.Tensor, key_mask: torch.Tensor, positions: Positions) -> torch.Tensor:
        if tokens.shape[1] > self.cfg.max_tokens:
            raise SequenceTooLong(f"{tokens.shape[1]} history tokens exceed {self.cfg.max_tokens}")
        x = nx.embedding_lookup(self.enc_embed, tokens)
        bias = self.enc_bias(positions, positions)
        for layer in self.encoder:
            x = layer(x, key_mask, bias)
        return self.enc_norm(x)

    def _dec_bias(self, t: int) -> torch.Tensor:
        pos = np.arange(t)
        b = relative_bucket(pos[None, :] - pos[:, None], self.cfg.within_bins, self.cfg.target_depth, bidirectional=False)
        return self.dec_bias[torch.as_tensor(b)].permute(2, 0, 1)

    def decode(self, memory: torch.Tensor, mem_mask: torch.Tensor, dec_tokens: torch.Tensor, group: int = 1) -> torch.Tensor:
        """Logits ``(B, t, V_out)`` for every decoder input position.

        With ``group > 1`` each memory row serves ``group`` consecutive
        decoder rows (the beams of one query).
        """
        if dec_tokens.shape[1] > self.cfg.target_depth:
            raise PrefixTooLong(f"decoder input of length {dec_tokens.shape[1]} exceeds {self.cfg.target_depth}")
        x = nx.embedding_lookup(self.dec_embed, dec_tokens)
        bias = self._dec_bias(dec_tokens.shape[1])
        for layer in self.decoder:
            x = layer(x, memory, mem_mask, bias, group)
        return nx.matmul(self.dec_norm(x), self.out_embed.T)

    def forward(self, tokens, key_mask, positions: Positions, dec_tokens) -> torch.Tensor:
        """Teacher-forced logits for a whole batch."""
        return self.decode(self.encode(tokens, key_mask, positions), key_mask, dec_tokens)

    def decode_step(self, memory, mem_mask, prefix_tokens: torch.Tensor, bos_id: int, group: int = 1) -> torch.Tensor:
        """Next-position logits ``(B, V_out)`` given target tokens emitted so far."""
        if prefix_tokens.shape[1] >= self.cfg.target_depth:
            raise PrefixTooLong(f"prefix of length {prefix_tokens.shape[1]} is already complete")
        bos = torch.full((prefix_tokens.shape[0], 1), bos_id, dtype=torch.long)
        return self.decode(memory, mem_mask, torch.cat([bos, prefix_tokens], dim=1), group)[:, -1]


# ----------------------------------------------------------------------------
# batching


@dataclass
class Example:
    history: np.ndarray  # item rows, oldest first
    target: int = -1  # item row; -1 when unknown (inference)


@dataclass
class Batch:
    tokens: torch.Tensor
    key_mask: torch.Tensor
    positions: Positions
    targets: np.ndarray | None  # (B, depth) target-vocab tokens
    target_rows: np.ndarray


def make_batch(
    table: CodeTable,
    examples: Sequence[Example],
    vocab: TargetVocab,
    mask_p: float = 0.0,
    rng: np.random.Generator | None = None,
    visible: Sequence[str] | None = None,
) -> Batch:
    """Pad histories on the right; ``visible`` limits which modalities stay unmasked."""
    W = table.layout.item_width
    lens = np.array([len(ex.history) for ex in examples], dtype=np.int64)
    T = int(lens.max(initial=0)) * W
    tokens = np.full((len(examples), T), table.layout.pad_id, dtype=np.int64)
    all_rows = np.concatenate([ex.history for ex in examples]).astype(np.int64) if T else np.zeros(0, np.int64)
    flags = ~table.presence[all_rows]
    if mask_p > 0:
        flags = sample_mask_flags(table.presence[all_rows], mask_p, rng)
    if visible is not None:
        hidden = np.array([m not in visible for m in table.layout.names])
        flags = flags | hidden[None, :]
    flat = table.history_tokens(all_rows, flags)
    pos = 0
    for b, n in enumerate(lens):
        tokens[b, : n * W] = flat[pos: pos + n].reshape(-1)
        pos += n
    key_mask = np.arange(T)[None, :] < (lens * W)[:, None]
    target_rows = np.array([ex.target for ex in examples], dtype=np.int64)
    targets = None
    if len(target_rows) and target_rows.min() >= 0:
        targets = vocab.to_tokens(table.target_codes(vocab.modality, target_rows))
    return Batch(
        torch.as_tensor(tokens),
        torch.as_tensor(key_mask),
        Positions.for_length(T, W),
        targets,
        target_rows,
    )


class TargetIndex:
    """Trie paths of every item's target codes, cached as node ids per level."""

    def __init__(self, table: CodeTable, trie: CodeTrie, vocab: TargetVocab):
        self.vocab = vocab
        self.trie = trie
        codes = table.target_codes(vocab.modality)
        self.paths = np.zeros((len(table), vocab.depth), dtype=np.int64)
        for r, item in enumerate(table.item_ids):
            try:
                self.paths[r] = trie.path_nodes(codes[r])
                trie.leaf_to_item(codes[r])
            except (KeyError, UnknownPrefix):
                raise GoldNotPermissible(
                    f"item {int(item)} target codes {codes[r].tolist()} are not in the trie"
                ) from None
        self.node_masks = torch.as_tensor(trie.token_masks(vocab.size, vocab.offsets))

    def allowed(self, rows: np.ndarray) -> torch.Tensor:
        return self.node_masks[torch.as_tensor(self.paths[rows])]


def sequence_nll(
    model: Seq2SeqModel,
    batch: Batch,
    index: TargetIndex,
    constrained: bool = True,
) -> torch.Tensor:
    """Per-example negative log-likelihood of the target code sequence, ``(B,)``."""
    logits = model(batch.tokens, batch.key_mask, batch.positions, decoder_inputs(batch, index.vocab))
    return nll_from_logits(logits, batch, index, constrained)


def decoder_inputs(batch: Batch, vocab: TargetVocab) -> torch.Tensor:
    B = len(batch.targets)
    return torch.as_tensor(np.concatenate([np.full((B, 1), vocab.bos_id), batch.targets[:, :-1]], axis=1))


def nll_from_logits(logits: torch.Tensor, batch: Batch, index: "TargetIndex", constrained: bool = True) -> torch.Tensor:
    gold = torch.as_tensor(batch.targets)
    if constrained:
        allowed = index.allowed(batch.target_rows)
        if not bool(allowed.gather(-1, gold[..., None]).all()):
            raise GoldNotPermissible("a target code is not among its prefix's permissible children")
        logp = nx.masked_log_softmax(logits, allowed)
    else:
        logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(-1, gold[..., None]).squeeze(-1).sum(dim=-1)


def training_loss(model, batch, index, constrained: bool = True) -> torch.Tensor:
    return sequence_nll(model, batch, index, constrained).mean()


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainSettings:
    epochs: int = 25
    patience: int = 3
    batch_size: int = 128
    lr: float = 0.002
    weight_decay: float = 0.0
    mask_p: float = 0.0
    constrained: bool = True
    seed: int = 0
    eval_batch_size: int = 512


@dataclass
class TrainResult:
    model: Seq2SeqModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def _length_batches(examples: Sequence[Example], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    order = rng.permutation(len(examples))
    lens = np.array([len(examples[i].history) for i in order])
    order = order[np.argsort(lens, kind="stable")]
    batches = [order[i: i + batch_size].tolist() for i in range(0, len(order), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def evaluate_loss(model, table, examples, index, settings: TrainSettings, constrained: bool = True) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        order = sorted(range(len(examples)), key=lambda i: len(examples[i].history))
        for s in range(0, len(order), settings.eval_batch_size):
            chunk = [examples[i] for i in order[s: s + settings.eval_batch_size]]
            batch = make_batch(table, chunk, index.vocab)
            total += float(sequence_nll(model, batch, index, constrained).sum())
    return total / max(len(examples), 1)


def train(
    table: CodeTable,
    train_examples: Sequence[Example],
    valid_examples: Sequence[Example],
    cfg: ModelConfig,
    trie: CodeTrie,
    vocab: TargetVocab,
    settings: TrainSettings,
    log=None,
) -> TrainResult:
    """Epoch loop with early stopping on the constrained validation loss."""
    if not train_examples or not valid_examples:
        raise ValueError("training needs non-empty train and validation splits")
    torch.manual_seed(settings.seed)
    rng = np.random.default_rng(settings.seed)
    model = Seq2SeqModel(cfg)
    index = TargetIndex(table, trie, vocab)
    opt = nx.OptimizerState(list(model.parameters()), lr=settings.lr, weight_decay=settings.weight_decay)
    best = (math.inf, None, 0)
    history = []
    bad = 0
    for epoch in range(1, settings.epochs + 1):
        model.train()
        seen, running = 0, 0.0
        for idx in _length_batches(train_examples, settings.batch_size, rng):
            batch = make_batch(table, [train_examples[i] for i in idx], vocab, settings.mask_p, rng)
            loss = training_loss(model, batch, index, settings.constrained)
            opt.zero_grad()
            nx.backward(loss)
            nx.adamw_step(opt)
            running += float(loss.detach()) * len(idx)
            seen += len(idx)
        val = evaluate_loss(model, table, valid_examples, index, settings, constrained=True)
        record = {"epoch": epoch, "split": "train", "loss": running / seen, "valid_loss": val}
        history.append(record)
        if log is not None:
            log(record)
        if val < best[0]:
            best = (val, {k: v.detach().clone() for k, v in model.state_dict().items()}, epoch)
            bad = 0
        else:
            bad += 1
            if bad > settings.patience:
                break
    model.load_state_dict(best[1])
    model.eval()
    return TrainResult(model, history, best[2])


# ----------------------------------------------------------------------------
# decoding


def recommend(
    model: Seq2SeqModel,
    table: CodeTable,
    histories: Sequence[np.ndarray],
    trie: CodeTrie,
    vocab: TargetVocab,
    width: int = 20,
    visible: Sequence[str] | None = None,
    chunk: int = 256,
) -> list[list[tuple[int, float]]]:
    """Constrained beam search per history; returns ranked ``(item_id, log-prob)`` lists."""
    model.eval()
    out: list[list[tuple[int, float]]] = []
    with torch.no_grad():
        for s in range(0, len(histories), chunk):
            part = [Example(np.asarray(h, dtype=np.int64)) for h in histories[s: s + chunk]]
            batch = make_batch(table, part, vocab, visible=visible)
            memory = model.encode(batch.tokens, batch.key_mask, batch.positions)

            def step(qids, prefixes):
                # pad every query to ``width`` beams so beams can share memory rows
                n_q = len(part)
                counts = np.bincount(qids, minlength=n_q)
                slot = np.arange(len(qids)) - np.repeat(np.cumsum(counts) - counts, counts)
                flat = qids * width + slot
                padded = np.zeros((n_q * width, prefixes.shape[1]), dtype=np.int64)
                padded[flat] = prefixes
                toks = torch.as_tensor(padded + np.asarray(vocab.offsets[: prefixes.shape[1]], dtype=np.int64))
                logits = model.decode_step(memory, batch.key_mask, toks, vocab.bos_id, group=width)
                return logits[torch.as_tensor(flat)]

            out.extend(batched_beam_search(step, trie, width, len(part), vocab.offsets))
    return out


# ----------------------------------------------------------------------------
# checkpoints

_MAGIC = b"S2SM"
_VERSION = 1


def save_checkpoint(model: Seq2SeqModel, path, extra: dict | None = None) -> None:
    meta = {"config": asdict(model.cfg), "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [_MAGIC, struct.pack("<II", _VERSION, len(blob)), blob]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        enc = name.encode()
        arr = tensor.detach().cpu().numpy().astype("<f4")
        parts.append(struct.pack("<I", len(enc)) + enc + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[Seq2SeqModel, dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != _MAGIC:
        raise IncompatibleCheckpoint(f"{path}: not a model checkpoint")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise IncompatibleCheckpoint(f"{path}: unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(blob[off: off + n])
    off += n
    model = Seq2SeqModel(ModelConfig(**meta["config"]))
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    state = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off: off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        state[name] = torch.as_tensor(arr.copy())
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise IncompatibleCheckpoint(f"{path}: {exc}") from exc
    model.eval()
    return model, meta["extra"]
