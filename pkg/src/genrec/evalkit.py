"""Interaction preprocessing, leave-one-out splits, ranking metrics, Shapley values."""

from __future__ import annotations

import itertools
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .errors import FormatError, SequenceTooShort

MAX_HISTORY = 20
MAX_SHAPLEY_PLAYERS = 10

Record = tuple[int, int, int]  # (user, item, timestamp)


def read_interactions(path) -> list[Record]:
    records = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read interactions {path}: {exc}") from exc
    for no, line in enumerate(lines, start=1):
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{no}: expected user_id<TAB>item_id<TAB>timestamp")
        try:
            records.append((int(parts[0]), int(parts[1]), int(parts[2])))
        except ValueError:
            raise FormatError(f"{path}:{no}: non-integer field in {line!r}") from None
    return records


def write_interactions(records: Iterable[Record], path) -> None:
    Path(path).write_text("".join(f"{u}\t{i}\t{t}\n" for u, i, t in records))


def five_core_filter(records: Sequence[Record], k: int = 5) -> list[Record]:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    current = list(records)
    while True:
        users = Counter(r[0] for r in current)
        items = Counter(r[1] for r in current)
        kept = [r for r in current if users[r[0]] >= k and items[r[1]] >= k]
        if len(kept) == len(current):
            return kept
        current = kept


@dataclass
class SplitDataset:
    """Per-user chronological sequences with leave-one-out targets."""

    sequences: dict[int, list[int]]
    train: list[tuple[list[int], int]] = field(default_factory=list)
    valid: list[tuple[list[int], int]] = field(default_factory=list)
    test: list[tuple[list[int], int]] = field(default_factory=list)
    users_valid: list[int] = field(default_factory=list)
    users_test: list[int] = field(default_factory=list)

    @property
    def items(self) -> list[int]:
        return sorted({i for seq in self.sequences.values() for i in seq})


def user_sequences(records: Sequence[Record]) -> dict[int, list[int]]:
    per_user: dict[int, list[tuple[int, int, int]]] = defaultdict(list)
    for pos, (u, i, t) in enumerate(records):
        per_user[u].append((t, pos, i))
    return {u: [i for _, _, i in sorted(rows)] for u, rows in sorted(per_user.items())}


def leave_one_out_split(
    sequences: Mapping[int, Sequence[int]],
    max_history: int = MAX_HISTORY,
    every_prefix: bool = True,
) -> SplitDataset:
    """Last item is the test target, second-to-last the validation target.

    With ``every_prefix`` each earlier position of the training part is its own
    training example; otherwise only the last training item is a target.
    """
    out = SplitDataset({u: list(s) for u, s in sequences.items()})
    for u, seq in out.sequences.items():
        if len(seq) < 3:
            raise SequenceTooShort(f"user {u} has {len(seq)} interactions; leave-one-out needs 3")
        out.test.append((seq[:-1][-max_history:], seq[-1]))
        out.users_test.append(u)
        out.valid.append((seq[:-2][-max_history:], seq[-2]))
        out.users_valid.append(u)
        train_part = seq[:-2]
        targets = range(1, len(train_part)) if every_prefix else [len(train_part) - 1]
        for t in targets:
            out.train.append((train_part[:t][-max_history:], train_part[t]))
    return out


# ----------------------------------------------------------------------------
# metrics


@dataclass
class RankingResult:
    gold: int
    candidates: list[int]
    scores: list[float] | None = None

    def rank(self) -> int | None:
        try:
            return self.candidates.index(self.gold) + 1
        except ValueError:
            return None


def _ranks(results: Iterable[RankingResult | tuple[int, Sequence[int]]]) -> list[int | None]:
    ranks = []
    for r in results:
        if not isinstance(r, RankingResult):
            r = RankingResult(r[0], list(r[1]))
        ranks.append(r.rank())
    return ranks


def recall_at_k(results, k: int) -> float:
    ranks = _ranks(results)
    return sum(1.0 for r in ranks if r is not None and r <= k) / max(len(ranks), 1)


def ndcg_at_k(results, k: int) -> float:
    ranks = _ranks(results)
    return sum(1.0 / math.log2(r + 1) for r in ranks if r is not None and r <= k) / max(len(ranks), 1)


def mrr_at_k(results, k: int) -> float:
    ranks = _ranks(results)
    return sum(1.0 / r for r in ranks if r is not None and r <= k) / max(len(ranks), 1)


def metric_report(results, ks: Sequence[int] = (1, 5, 10)) -> dict[str, float]:
    results = list(results)
    report = {}
    for k in ks:
        report[f"recall@{k}"] = recall_at_k(results, k)
        report[f"ndcg@{k}"] = ndcg_at_k(results, k)
        report[f"mrr@{k}"] = mrr_at_k(results, k)
    return report


def write_report(report: Mapping[str, float], stem) -> tuple[Path, Path]:
    """Write ``<stem>.txt`` (key=value lines) and ``<stem>.json``."""
    stem = Path(stem)
    txt = stem.with_suffix(".txt")
    js = stem.with_suffix(".json")
    txt.write_text("".join(f"{k}={_fmt(v)}\n" for k, v in report.items()))
    js.write_text(json.dumps(dict(report), indent=2, sort_keys=False) + "\n")
    return txt, js


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (int, float)) else str(v)


# ----------------------------------------------------------------------------
# Shapley values


def shapley_modalities(value: Callable[[frozenset], float] | Mapping[frozenset, float], players: Sequence[str]) -> dict[str, float]:
    """Exact Shapley values by enumerating every coalition."""
    players = list(players)
    D = len(players)
    if D > MAX_SHAPLEY_PLAYERS:
        raise ValueError(f"exact Shapley enumeration limited to {MAX_SHAPLEY_PLAYERS} players, got {D}")
    v = value if callable(value) else (lambda s: value[frozenset(s)])
    cache: dict[frozenset, float] = {}

    def val(s: frozenset) -> float:
        if s not in cache:
            cache[s] = float(v(s))
        return cache[s]

    phi = {}
    for p in players:
        others = [q for q in players if q != p]
        total = 0.0
        for size in range(D):
            weight = math.factorial(size) * math.factorial(D - size - 1) / math.factorial(D)
            for subset in itertools.combinations(others, size):
                s = frozenset(subset)
                total += weight * (val(s | {p}) - val(s))
        phi[p] = total
    return phi


def all_subsets(players: Sequence[str]) -> list[frozenset]:
    return [frozenset(c) for r in range(len(players) + 1) for c in itertools.combinations(players, r)]
