"""Prefix tree over target-modality code sequences.

The tree answers "which codes may follow this prefix", which drives both the
constrained training loss and constrained beam search: at every step the
softmax is normalized over the permissible children only.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .errors import DuplicateSequence, GoldNotPermissible, UnknownPrefix
from .numerics import NEG_INF, masked_log_softmax

ROOT = 0


class CodeTrie:
    """Arena-backed prefix tree; node 0 is the root."""

    def __init__(self, depth: int):
        self.depth = depth
        self._children: list[dict[int, int]] = [{}]
        self._node_depth: list[int] = [0]
        self._leaf_item: dict[int, int] = {}
        self._item_leaf: dict[int, int] = {}
        self._sequences: dict[int, tuple[int, ...]] = {}

    @classmethod
    def build(cls, item_codes: Mapping[int, Sequence[int]]) -> "CodeTrie":
        if not item_codes:
            return cls(0)
        depths = {len(c) for c in item_codes.values()}
        if len(depths) != 1:
            raise DuplicateSequence(f"code sequences have mixed lengths {sorted(depths)}")
        trie = cls(depths.pop())
        for item in sorted(item_codes):
            trie._insert(int(item), tuple(int(c) for c in item_codes[item]))
        trie._freeze()
        return trie

    def _insert(self, item: int, codes: tuple[int, ...]) -> None:
        node = ROOT
        for c in codes:
            nxt = self._children[node].get(c)
            if nxt is None:
                nxt = len(self._children)
                self._children.append({})
                self._node_depth.append(self._node_depth[node] + 1)
                self._children[node][c] = nxt
            node = nxt
        if node in self._leaf_item:
            raise DuplicateSequence(f"items {self._leaf_item[node]} and {item} share code sequence {list(codes)}")
        self._leaf_item[node] = item
        self._item_leaf[item] = node
        self._sequences[item] = codes

    def _freeze(self) -> None:
        self._children = [dict(sorted(ch.items())) for ch in self._children]
        n = len(self._children)
        width = max((len(ch) for ch in self._children), default=0)
        self.child_codes = np.full((n, max(width, 1)), -1, dtype=np.int64)
        self.child_nodes = np.full((n, max(width, 1)), -1, dtype=np.int64)
        for node, ch in enumerate(self._children):
            self.child_codes[node, : len(ch)] = list(ch.keys())
            self.child_nodes[node, : len(ch)] = list(ch.values())
        self.n_children = np.array([len(ch) for ch in self._children], dtype=np.int64)
        self.node_depth = np.array(self._node_depth, dtype=np.int64)

    @property
    def n_nodes(self) -> int:
        return len(self._children)

    @property
    def n_leaves(self) -> int:
        return len(self._leaf_item)

    def items(self) -> list[int]:
        return sorted(self._item_leaf)

    def sequence(self, item: int) -> tuple[int, ...]:
        return self._sequences[item]

    def node(self, prefix: Sequence[int]) -> int:
        node = ROOT
        for c in prefix:
            nxt = self._children[node].get(int(c))
            if nxt is None:
                raise UnknownPrefix(f"prefix {list(prefix)} is not a path in the trie")
            node = nxt
        return node

    def children(self, prefix: Sequence[int]) -> list[int]:
        return list(self._children[self.node(prefix)].keys())

    def children_of(self, node: int) -> list[int]:
        return list(self._children[node].keys())

    def child(self, node: int, code: int) -> int:
        return self._children[node][code]

    def leaf_to_item(self, codes: Sequence[int]) -> int:
        node = self.node(codes)
        if node not in self._leaf_item:
            raise UnknownPrefix(f"{list(codes)} does not reach a leaf")
        return self._leaf_item[node]

    def path_nodes(self, codes: Sequence[int]) -> list[int]:
        """Nodes reached by prefixes of length 0 .. depth-1 of ``codes``."""
        nodes = [ROOT]
        for c in codes[:-1]:
            nodes.append(self.child(nodes[-1], int(c)))
        return nodes

    def token_masks(self, vocab_size: int, offsets: Sequence[int] | None = None) -> np.ndarray:
        """Boolean ``(n_nodes, vocab_size)``: permissible next tokens per node."""
        masks = np.zeros((self.n_nodes, vocab_size), dtype=bool)
        for node, ch in enumerate(self._children):
            if not ch:
                continue
            off = 0 if offsets is None else offsets[self._node_depth[node]]
            masks[node, np.fromiter(ch.keys(), dtype=np.int64) + off] = True
        return masks


def _code_indices(codes: Sequence[int], level: int, offsets: Sequence[int] | None) -> list[int]:
    off = 0 if offsets is None else offsets[level]
    return [int(c) + off for c in codes]


def constrained_nll(
    logits: torch.Tensor,
    prefix: Sequence[int],
    gold: int,
    trie: CodeTrie,
    offsets: Sequence[int] | None = None,
) -> torch.Tensor:
    """``-z_gold + log sum_{c in children(prefix)} exp(z_c)``.

    ``offsets`` maps level-l codes to logit columns (``offsets[l] + code``);
    without it codes index the logits directly.
    """
    allowed = trie.children(prefix)
    if gold not in allowed:
        raise GoldNotPermissible(f"gold code {gold} is not a child of prefix {list(prefix)} (children {allowed})")
    level = len(prefix)
    cols = _code_indices(allowed, level, offsets)
    logp = masked_log_softmax(logits, cols)
    return -logp[_code_indices([gold], level, offsets)[0]]


def _lex_rank(prefixes: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """Rank of each prefix row within its group in lexicographic order."""
    if prefixes.shape[1] == 0:
        return np.zeros(len(prefixes), dtype=np.int64)
    keys = tuple(prefixes[:, j] for j in range(prefixes.shape[1] - 1, -1, -1)) + (groups,)
    order = np.lexsort(keys)
    rank = np.empty(len(order), dtype=np.int64)
    start = _group_starts(groups[order])
    rank[order] = np.arange(len(order)) - start
    return rank


def _group_starts(sorted_groups: np.ndarray) -> np.ndarray:
    """For a sorted group array, the index where each element's group begins."""
    n = len(sorted_groups)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    change = np.ones(n, dtype=bool)
    change[1:] = sorted_groups[1:] != sorted_groups[:-1]
    starts = np.flatnonzero(change)
    return np.repeat(starts, np.diff(np.append(starts, n)))


def _to_numpy(logits) -> np.ndarray:
    if isinstance(logits, torch.Tensor):
        return logits.detach().to(torch.float64).cpu().numpy()
    return np.asarray(logits, dtype=np.float64)


BatchStepFn = Callable[[np.ndarray, np.ndarray], "np.ndarray | torch.Tensor"]


def batched_beam_search(
    step_fn: BatchStepFn,
    trie: CodeTrie,
    width: int,
    n_queries: int,
    offsets: Sequence[int] | None = None,
) -> list[list[tuple[int, float]]]:
    """Constrained beam search for many queries at once.

    ``step_fn(query_ids, prefixes)`` receives the query index of every live
    beam and its code prefix matrix ``(beams, t)`` and returns logits of shape
    ``(beams, V)``. Pruning keeps the ``width`` best candidates per query,
    ordered by score and then by lexicographic prefix.
    """
    if width < 1:
        raise ValueError(f"beam width must be at least 1, got {width}")
    if trie.n_leaves == 0 or n_queries == 0:
        return [[] for _ in range(n_queries)]

    qid = np.arange(n_queries, dtype=np.int64)
    prefix = np.zeros((n_queries, 0), dtype=np.int64)
    score = np.zeros(n_queries)
    node = np.zeros(n_queries, dtype=np.int64)

    for t in range(trie.depth):
        logits = _to_numpy(step_fn(qid, prefix))
        ch_codes = trie.child_codes[node]
        ch_nodes = trie.child_nodes[node]
        valid = ch_codes >= 0
        off = 0 if offsets is None else offsets[t]
        cols = np.where(valid, ch_codes + off, 0)
        z = np.take_along_axis(logits, cols, axis=1)
        z = np.where(valid, z, NEG_INF)
        m = z.max(axis=1, keepdims=True)
        lse = m + np.log(np.where(valid, np.exp(z - m), 0.0).sum(axis=1, keepdims=True))
        cand_score = score[:, None] + (z - lse)

        parent_rank = _lex_rank(prefix, qid)
        b_idx, c_idx = np.nonzero(valid)
        c_q = qid[b_idx]
        c_s = cand_score[b_idx, c_idx]
        c_code = ch_codes[b_idx, c_idx]
        order = np.lexsort((c_code, parent_rank[b_idx], -c_s, c_q))
        sorted_q = c_q[order]
        pos = np.arange(len(order)) - _group_starts(sorted_q)
        keep = order[pos < width]

        qid = c_q[keep]
        prefix = np.concatenate([prefix[b_idx[keep]], c_code[keep, None]], axis=1)
        score = c_s[keep]
        node = ch_nodes[b_idx[keep], c_idx[keep]]

    results: list[list[tuple[int, float]]] = [[] for _ in range(n_queries)]
    for q, s, leaf in zip(qid, score, node):
        results[int(q)].append((trie._leaf_item[int(leaf)], float(s)))
    return results


def constrained_beam_search(
    step_fn: Callable[[np.ndarray], "np.ndarray | torch.Tensor"],
    trie: CodeTrie,
    width: int,
    offsets: Sequence[int] | None = None,
) -> list[tuple[int, float]]:
    """Single-query beam search; ``step_fn(prefixes)`` maps a ``(beams, t)`` prefix matrix to logits."""
    return batched_beam_search(lambda q, p: step_fn(p), trie, width, 1, offsets)[0]

