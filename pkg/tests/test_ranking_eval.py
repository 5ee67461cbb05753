import json
import math

import numpy as np
import pytest
import torch

from app.core.config import FilterMode
from app.core.errors import ConfigError, UnknownUserError
from app.models.ranking import MetricsReport, RankedList, ScoredItem
from app.models.records import EdgeSet
from app.services.ranking_eval import (
    evaluate,
    ground_truth,
    ndcg_at_k,
    precision_at_k,
    rank_users,
    recall_at_k,
    recommend,
    score_all,
    write_metrics,
    write_recommendations,
)
from app.services.signed_graph import build

A, B, C = 0, 1, 2


class TestWorkedExample:
    lists = {0: [A, C]}
    truth = {0: {A, B}}

    def test_precision(self):
        assert precision_at_k(self.lists, self.truth, 2) == pytest.approx(0.5)

    def test_recall(self):
        assert recall_at_k(self.lists, self.truth, 2) == pytest.approx(0.5)

    def test_ndcg_uncapped(self):
        assert ndcg_at_k(self.lists, self.truth, 2) == pytest.approx(0.61315, abs=1e-5)


def test_perfect_and_disjoint():
    truth = {0: {1, 2}, 1: {3, 4}}
    assert precision_at_k({0: [1, 2], 1: [4, 3]}, truth, 2) == 1.0
    assert ndcg_at_k({0: [1, 2], 1: [4, 3]}, truth, 2) == pytest.approx(1.0)
    assert precision_at_k({0: [5, 6], 1: [7, 8]}, truth, 2) == 0.0
    assert ndcg_at_k({0: [5, 6], 1: [7, 8]}, truth, 2) == 0.0


def test_users_without_ground_truth_are_skipped():
    assert recall_at_k({0: [1], 1: [2]}, {0: {1}, 1: set()}, 1) == 1.0
    assert precision_at_k({}, {}, 5) == 0.0


def test_capped_idcg():
    # one relevant item at rank 1 of K=3
    assert ndcg_at_k({0: [1, 2, 3]}, {0: {1}}, 3, capped_idcg=True) == pytest.approx(1.0)
    assert ndcg_at_k({0: [1, 2, 3]}, {0: {1}}, 3) < 1.0


def test_backfilled_slots_as_misses():
    ranked = RankedList(user=0, items=[ScoredItem(1, 0.9, 0.1), ScoredItem(2, 0.5, 0.9, backfilled=True)])
    truth = {0: {1, 2}}
    assert precision_at_k({0: ranked}, truth, 2) == 1.0
    assert precision_at_k({0: ranked}, truth, 2, backfilled_as_miss=True) == 0.5


def oracle(lists, truth, K):
    """Direct set arithmetic over every user with a non-empty ground truth"""
    users = [u for u in truth if truth[u]]
    if not users:
        return 0.0, 0.0, 0.0
    p = r = n = 0.0
    for u in users:
        top = list(lists.get(u, []))[:K]
        hits = set(top) & truth[u]
        p += len(hits) / K
        r += len(hits) / len(truth[u])
        dcg = sum(1.0 / math.log2(rank + 2) for rank, item in enumerate(top) if item in truth[u])
        n += dcg / sum(1.0 / math.log2(rank + 2) for rank in range(K))
    return p / len(users), r / len(users), n / len(users)


def test_metrics_match_oracle_on_random_instances():
    rng = np.random.default_rng(100)
    for _ in range(100):
        n_items = int(rng.integers(1, 9))
        n_users = int(rng.integers(1, 6))
        K = int(rng.integers(1, n_items + 1))
        lists, truth = {}, {}
        for u in range(n_users):
            lists[u] = rng.permutation(n_items)[: int(rng.integers(0, n_items + 1))].tolist()
            truth[u] = set(rng.choice(n_items, size=int(rng.integers(0, n_items + 1)), replace=False).tolist())
        expected = oracle(lists, truth, K)
        got = (precision_at_k(lists, truth, K), recall_at_k(lists, truth, K), ndcg_at_k(lists, truth, K))
        assert got == pytest.approx(expected, abs=1e-12)
        for u in truth:
            if truth[u]:
                single = {u: truth[u]}
                hits_p = precision_at_k(lists, single, K) * K
                hits_r = recall_at_k(lists, single, K) * len(truth[u])
                assert hits_p == pytest.approx(hits_r)


def scored(*rows):
    return [ScoredItem(item, s_it, s_dt) for item, (s_it, s_dt) in enumerate(rows)]


class TestRecommend:
    def test_filter_example(self):
        ranked = recommend(0, 2, 0.5, scored((0.9, 0.6), (0.8, 0.2), (0.1, 0.1)))
        assert ranked.item_ids == [1, 2]
        assert not any(entry.backfilled for entry in ranked.items)

    def test_infinite_delta_is_pure_interest(self):
        ranked = recommend(0, 3, float("inf"), scored((0.1, 9.0), (0.8, 5.0), (0.5, 0.0)))
        assert ranked.item_ids == [1, 2, 0]

    def test_all_filtered_backfills_lowest_disinterest(self):
        ranked = recommend(0, 1, 0.0, scored((0.9, 0.6), (0.1, 0.3), (0.5, 0.8)))
        assert ranked.item_ids == [1]
        assert ranked.items[0].backfilled
        assert ranked.kept == []

    def test_no_backfill_leaves_short_list(self):
        ranked = recommend(0, 2, 0.5, scored((0.9, 0.6), (0.8, 0.2)), backfill=False)
        assert ranked.item_ids == [1]

    def test_ties_by_item_index(self):
        ranked = recommend(0, 3, float("inf"), scored((0.5, 0.0), (0.5, 0.0), (0.5, 0.0)))
        assert ranked.item_ids == [0, 1, 2]

    def test_strict_threshold(self):
        ranked = recommend(0, 1, 0.5, scored((0.9, 0.5), (0.1, 0.49)), backfill=False)
        assert ranked.item_ids == [1]

    def test_keep_above_mode(self):
        ranked = recommend(0, 2, 0.5, scored((0.9, 0.6), (0.8, 0.2), (0.1, 0.7)), filter_mode=FilterMode.KEEP_ABOVE)
        assert ranked.item_ids == [0, 2]

    def test_kept_sets_monotone_in_delta(self):
        rng = np.random.default_rng(7)
        rows = [(float(a), float(b)) for a, b in rng.standard_normal((30, 2))]
        kept = [set(recommend(0, 5, delta, scored(*rows)).kept) for delta in (0.1, 0.5, 1.0, float("inf"))]
        assert all(small <= large for small, large in zip(kept, kept[1:]))
        assert kept[-1] == set(range(30))


@pytest.fixture
def embeddings():
    # 2 users, 3 items, H=2
    Z = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.5, 0.5], [0.0, 0.0]])
    V = torch.tensor([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0], [2.0, 0.0], [0.0, 0.0]])
    return Z, V


def test_score_all_excludes_training_items(embeddings):
    Z, V = embeddings
    graph = build(EdgeSet.from_tuples([(0, 0, 1), (0, 2, -1)]), 2, 3)
    scores = score_all(0, Z, V, graph)
    assert [s.item for s in scores] == [1]
    assert scores[0].interest == pytest.approx(0.5)
    assert scores[0].disinterest == pytest.approx(2.0)


def test_score_all_orthogonal_and_zero_rows(embeddings):
    Z, V = embeddings
    scores = {s.item: s for s in score_all(0, Z, V, n_users=2)}
    assert scores[0].disinterest == 0.0
    assert scores[0].interest == pytest.approx(1.0)
    assert all(s.interest == 0.0 for s in score_all(1, Z * torch.tensor([[1.0], [0.0], [1.0], [1.0], [1.0]]), V, n_users=2))


def test_unknown_user(embeddings):
    Z, V = embeddings
    with pytest.raises(UnknownUserError, match="7"):
        score_all(7, Z, V, n_users=2)


def test_rank_users_matches_recommend(embeddings):
    Z, V = embeddings
    graph = build(EdgeSet.from_tuples([(0, 0, 1), (1, 2, -1)]), 2, 3)
    lists = rank_users(Z, V, graph, [0, 1], 2, 1.0, keep_survivors=True)
    for user in (0, 1):
        single = recommend(user, 2, 1.0, score_all(user, Z, V, graph))
        assert lists[user].item_ids == single.item_ids
        assert lists[user].kept == single.kept


def test_evaluate_report(embeddings):
    Z, V = embeddings
    graph = build(EdgeSet.from_tuples([(0, 0, 1)]), 2, 3)
    test_edges = EdgeSet.from_tuples([(0, 1, 1), (1, 2, -1)])
    report = evaluate(Z, V, graph, test_edges, k_list=[1, 2])
    assert report.evaluated_users == 1
    assert set(report.flat()) == {
        "precision@1", "recall@1", "ndcg@1", "precision@2", "recall@2", "ndcg@2", "evaluated_users",
    }
    assert report.recall[2] == 1.0
    assert ground_truth(test_edges) == {0: {1}}


def test_metrics_report_rejects_out_of_range():
    with pytest.raises(ValueError):
        MetricsReport(precision={5: 1.5})


def test_recommendations_file(tmp_path):
    lists = {
        3: RankedList(user=3, items=[ScoredItem(4, 0.25, 0.5), ScoredItem(1, 0.125, 0.75, backfilled=True)]),
    }
    path = write_recommendations(tmp_path / "recs.tsv", lists)
    assert path.read_text().splitlines() == [
        "3\t1\t4\t0.250000\t0.500000\t0",
        "3\t2\t1\t0.125000\t0.750000\t1",
    ]


def test_metrics_file(tmp_path):
    report = MetricsReport(precision={5: 0.5}, recall={5: 0.25}, ndcg={5: 0.1}, evaluated_users=3)
    path = write_metrics(tmp_path / "metrics.json", report)
    assert json.loads(path.read_text()) == {
        "precision@5": 0.5,
        "recall@5": 0.25,
        "ndcg@5": 0.1,
        "evaluated_users": 3,
    }


def test_recommend_needs_positive_k():
    scores = [ScoredItem(0, 0.5, 0.1)]
    with pytest.raises(ConfigError):
        recommend(0, 0, 0.5, scores)


def test_evaluate_needs_a_cutoff(embeddings):
    Z, V = embeddings
    graph = build(EdgeSet.from_tuples([(0, 0, 1)]), 2, 3)
    with pytest.raises(ConfigError):
        evaluate(Z, V, graph, EdgeSet.from_tuples([(0, 1, 1)]), k_list=[])
