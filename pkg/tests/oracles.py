"""Brute-force reference computations used as independent test oracles."""

from __future__ import annotations

import itertools
import math

import numpy as np


def nearest_entry(vector, entries) -> int:
    best, best_d = 0, math.inf
    for k, e in enumerate(entries):
        d = sum((float(a) - float(b)) ** 2 for a, b in zip(vector, e))
        if d < best_d:
            best, best_d = k, d
    return best


def rq_encode_loop(vector, codebooks):
    r = [float(v) for v in vector]
    codes = []
    for entries in codebooks:
        k = nearest_entry(r, entries)
        codes.append(k)
        r = [a - float(b) for a, b in zip(r, entries[k])]
    return codes, r


def log_softmax_over(values, allowed, index) -> float:
    zs = [values[i] for i in allowed]
    m = max(zs)
    return values[index] - (m + math.log(sum(math.exp(z - m) for z in zs)))


def exhaustive_leaf_scores(sequences, logits_for_prefix):
    """Score every full sequence as a sum of constrained log-probabilities."""
    seqs = [tuple(s) for s in sequences]
    out = []
    for seq in seqs:
        total = 0.0
        for level in range(len(seq)):
            prefix = seq[:level]
            allowed = sorted({s[level] for s in seqs if s[:level] == prefix})
            total += log_softmax_over(logits_for_prefix(prefix), allowed, seq[level])
        out.append((seq, total))
    out.sort(key=lambda pair: (-pair[1], pair[0]))
    return out


def shapley_brute(value, players):
    """Average marginal contribution over all orderings."""
    phi = {p: 0.0 for p in players}
    perms = list(itertools.permutations(players))
    for order in perms:
        seen = frozenset()
        for p in order:
            phi[p] += value(seen | {p}) - value(seen)
            seen = seen | {p}
    return {p: v / len(perms) for p, v in phi.items()}


def metrics_by_hand(rank: int | None, k: int):
    if rank is None or rank > k:
        return 0.0, 0.0, 0.0
    return 1.0, 1.0 / math.log2(rank + 1), 1.0 / rank


def kmeans_cost(points, centers) -> float:
    return float(sum(min(np.sum((p - c) ** 2) for c in centers) for p in points))
