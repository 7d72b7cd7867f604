import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genrec import evalkit as ek
from genrec.errors import FormatError, SequenceTooShort
from oracles import metrics_by_hand, shapley_brute


def test_five_core_unchanged_when_all_counts_suffice():
    recs = [(u, i, 10 * u + i) for u in range(5) for i in range(5)]
    assert ek.five_core_filter(recs) == recs


def test_five_core_cascade():
    recs = [(u, i, 10 * u + i) for u in range(4) for i in range(5)]
    recs += [(4, i, 40 + i) for i in range(5)]
    recs += [(u, 9, 100 + u) for u in range(4)]
    # user 7 has three interactions; item 9 has five only while user 7 is present
    recs += [(7, 9, 200), (7, 0, 201), (7, 1, 202)]
    out = ek.five_core_filter(recs)
    assert {r[0] for r in out} == {0, 1, 2, 3, 4}
    assert 9 not in {r[1] for r in out}
    assert ek.five_core_filter(out) == out


def test_k_core_small_cascade_by_hand():
    recs = [(1, "A", 0), (1, "B", 1), (2, "A", 2), (2, "B", 3), (3, "C", 4), (3, "A", 5)]
    # item C falls first, which leaves user 3 with a single record
    assert ek.five_core_filter(recs, k=2) == recs[:4]


def test_user_sequences_sorted_by_time_then_input_order():
    recs = [(1, 10, 5), (1, 11, 3), (2, 12, 1), (1, 13, 3)]
    assert ek.user_sequences(recs) == {1: [11, 13, 10], 2: [12]}


def test_leave_one_out_split_examples():
    split = ek.leave_one_out_split({0: ["a", "b", "c", "d"]})
    assert split.test == [(["a", "b", "c"], "d")]
    assert split.valid == [(["a", "b"], "c")]
    assert split.train == [(["a"], "b")]
    last = ek.leave_one_out_split({0: list("abcdef")}, every_prefix=False)
    assert last.train == [(list("abc"), "d")]
    every = ek.leave_one_out_split({0: list("abcdef")})
    assert [t for _, t in every.train] == list("bcd")


def test_leave_one_out_truncates_histories():
    seq = list(range(27))
    split = ek.leave_one_out_split({0: seq})
    assert split.test[0] == (list(range(5, 26)[-20:]), 26)
    assert len(split.test[0][0]) == 20
    assert all(len(h) <= 20 for h, _ in split.train)
    assert split.train[-1] == (list(range(4, 24)), 24)


def test_leave_one_out_needs_three_items():
    with pytest.raises(SequenceTooShort):
        ek.leave_one_out_split({0: [1, 2]})


def test_interaction_file_round_trip_and_errors(tmp_path):
    recs = [(1, 2, 3), (4, 5, 6)]
    p = tmp_path / "x.tsv"
    ek.write_interactions(recs, p)
    assert ek.read_interactions(p) == recs
    p.write_text("1\t2\n")
    with pytest.raises(FormatError, match="x.tsv:1"):
        ek.read_interactions(p)
    with pytest.raises(FormatError):
        ek.read_interactions(tmp_path / "missing.tsv")


# (rank or None, K, recall, ndcg, mrr), values computed by hand
HAND_TABLE = [
    (1, 1, 1.0, 1.0, 1.0),
    (3, 10, 1.0, 0.5, 1 / 3),
    (6, 5, 0.0, 0.0, 0.0),
    (None, 10, 0.0, 0.0, 0.0),
    (2, 5, 1.0, 0.6309297535714575, 0.5),
    (7, 10, 1.0, 0.3333333333333333, 1 / 7),
    (10, 10, 1.0, 0.2890648263178879, 0.1),
    (11, 10, 0.0, 0.0, 0.0),
    (5, 5, 1.0, 0.38685280723454163, 0.2),
    (15, 20, 1.0, 0.25, 1 / 15),
]


def _result(rank, n=30):
    cands = list(range(100, 100 + n))
    gold = 999 if rank is None else cands[rank - 1]
    return ek.RankingResult(gold, cands)


@pytest.mark.parametrize("rank, k, recall, ndcg, mrr", HAND_TABLE)
def test_metric_hand_table(rank, k, recall, ndcg, mrr):
    res = [_result(rank)]
    assert ek.recall_at_k(res, k) == recall
    assert ek.ndcg_at_k(res, k) == ndcg
    assert ek.mrr_at_k(res, k) == mrr
    assert metrics_by_hand(rank, k) == (recall, ndcg, mrr)


def test_metric_average_over_hand_table():
    res = [_result(r) for r, *_ in HAND_TABLE]
    ranks = [r for r, *_ in HAND_TABLE]
    for k in (1, 5, 10):
        expect = np.mean([metrics_by_hand(r, k) for r in ranks], axis=0)
        got = (ek.recall_at_k(res, k), ek.ndcg_at_k(res, k), ek.mrr_at_k(res, k))
        assert np.allclose(got, expect, rtol=0, atol=1e-15)


def test_metrics_accept_plain_tuples():
    assert ek.recall_at_k([(5, [1, 5, 3])], 2) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=20), st.integers(1, 30))
def test_metric_inequalities_and_monotonicity(ranks, k):
    res = [_result(r, 40) for r in ranks]
    rec, ndcg, mrr = ek.recall_at_k(res, k), ek.ndcg_at_k(res, k), ek.mrr_at_k(res, k)
    assert 0.0 <= ndcg <= rec <= 1.0
    assert 0.0 <= mrr <= rec
    better = [_result(max(1, r - 1), 40) for r in ranks]
    assert ek.recall_at_k(better, k) >= rec
    assert ek.ndcg_at_k(better, k) >= ndcg
    assert ek.mrr_at_k(better, k) >= mrr


def test_metric_report_keys_and_files(tmp_path):
    rep = ek.metric_report([_result(2), _result(None)])
    assert list(rep) == [f"{m}@{k}" for k in (1, 5, 10) for m in ("recall", "ndcg", "mrr")]
    assert rep["recall@1"] == rep["ndcg@1"] == rep["mrr@1"] == 0.0
    txt, js = ek.write_report(rep, tmp_path / "report")
    assert json.loads(js.read_text()) == rep
    assert txt.read_text().splitlines()[1] == f"ndcg@1={0.0!r}"


def test_shapley_two_player_example():
    v = {frozenset(): 0.0, frozenset("i"): 0.1, frozenset("t"): 0.1, frozenset("it"): 0.3}
    phi = ek.shapley_modalities(v, ["i", "t"])
    assert abs(phi["i"] - 0.15) < 1e-12 and abs(phi["t"] - 0.15) < 1e-12


def _random_table(rng, players):
    return {s: float(rng.normal()) if s else float(rng.normal()) for s in ek.all_subsets(players)}


def test_shapley_axioms_on_random_tables(rng):
    players = ["image", "text", "collab"]
    for _ in range(100):
        v = _random_table(rng, players)
        phi = ek.shapley_modalities(v, players)
        # efficiency
        assert abs(sum(phi.values()) - (v[frozenset(players)] - v[frozenset()])) < 1e-12
        # matches the permutation-average oracle
        ref = shapley_brute(lambda s: v[frozenset(s)], players)
        assert all(abs(phi[p] - ref[p]) < 1e-12 for p in players)

        # null player: text never changes the value
        null = {s: v[s - {"text"}] for s in v}
        assert abs(ek.shapley_modalities(null, players)["text"]) < 1e-12

        # symmetry: image and text interchangeable
        swap = {"image": "text", "text": "image", "collab": "collab"}
        sym = {s: v[s] + v[frozenset(swap[p] for p in s)] for s in v}
        phs = ek.shapley_modalities(sym, players)
        assert abs(phs["image"] - phs["text"]) < 1e-12


def test_shapley_accepts_callable_and_counts_evaluations():
    calls = []

    def v(s):
        calls.append(s)
        return len(s) ** 2

    players = list("abcd")
    phi = ek.shapley_modalities(v, players)
    assert len(set(calls)) == len(calls) == 16
    assert all(abs(x - 4.0) < 1e-12 for x in phi.values())


def test_shapley_refuses_large_player_sets():
    with pytest.raises(ValueError):
        ek.shapley_modalities(lambda s: 0.0, [str(i) for i in range(11)])


def test_all_subsets_enumerates_power_set():
    subs = ek.all_subsets(["a", "b", "c"])
    assert len(subs) == 8 and len(set(subs)) == 8
    assert subs[0] == frozenset() and subs[-1] == frozenset("abc")
