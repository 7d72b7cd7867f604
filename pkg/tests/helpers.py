"""Small code tables and model configs shared by several test modules."""

from __future__ import annotations

import numpy as np

from genrec import semantic_id as sid
from genrec import seq2seq as s2s
from genrec.trie import CodeTrie


def tiny_world(n_items: int = 12, seed: int = 0, sizes=(3, 4, 2), target="b", **cfg_kw):
    """Two modalities ``a`` and ``b`` with random but collision-free codes."""
    rng = np.random.default_rng(seed)
    codes = {}
    for m in ("a", "b"):
        seen = set()
        rows = []
        while len(rows) < n_items:
            c = tuple(int(rng.integers(s)) for s in sizes)
            if c not in seen:
                seen.add(c)
                rows.append(c)
        codes[m] = rows
    layout = sid.build_layout([("a", sizes), ("b", sizes)])
    items = [sid.ItemCodes(i, {m: list(codes[m][i]) for m in ("a", "b")}) for i in range(n_items)]
    table = sid.CodeTable.from_items(layout, items)
    vocab = sid.target_vocab(layout, target)
    trie = CodeTrie.build({i: codes[target][i] for i in range(n_items)})
    kw = dict(heads=2, head_dim=8, d_ff=32, dropout=0.0, max_items=6)
    kw.update(cfg_kw)
    cfg = s2s.ModelConfig(layout.vocab_size, vocab.size, layout.item_width, vocab.depth, **kw)
    return table, vocab, trie, cfg


def examples(pairs):
    return [s2s.Example(np.asarray(h, dtype=np.int64), t) for h, t in pairs]


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Keep one pass/fail line per acceptance criterion for the terminal summary."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
