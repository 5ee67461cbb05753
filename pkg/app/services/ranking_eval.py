"""Scoring, disinterest filtering with backfill, and top-K ranking metrics."""

import json
import math
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
import torch

from app.core.config import FilterMode
from app.core.errors import ConfigError, UnknownUserError
from app.core.logging import get_logger
from app.models.ranking import MetricsReport, RankedList, ScoredItem
from app.models.records import EdgeSet
from app.services.signed_graph import SignedBipartiteGraph

logger = get_logger(__name__)

USER_CHUNK = 1024

RecList = Union[RankedList, Sequence[int]]


def _check_users(users: Iterable[int], n_users: int) -> None:
    unknown = [u for u in users if not 0 <= int(u) < n_users]
    if unknown:
        raise UnknownUserError(unknown)


def score_arrays(
    Z: torch.Tensor, V: torch.Tensor, n_users: int, users: Sequence[int]
) -> Tuple[np.ndarray, np.ndarray]:
    """Interest z_u.z_i and disinterest v_u.v_i for every item, one row per user"""
    _check_users(users, n_users)
    index = torch.as_tensor(np.asarray(users, dtype=np.int64))
    with torch.no_grad():
        interest = Z[index] @ Z[n_users:].T
        disinterest = V[index] @ V[n_users:].T
    return interest.double().numpy(), disinterest.double().numpy()


def score_all(
    user: int, Z: torch.Tensor, V: torch.Tensor, graph: Optional[SignedBipartiteGraph] = None, n_users: Optional[int] = None
) -> List[ScoredItem]:
    """Scores for every item the user has not interacted with in training"""
    if n_users is None:
        if graph is None:
            raise ValueError("score_all needs either the training graph or n_users")
        n_users = graph.n_users
    interest, disinterest = score_arrays(Z, V, n_users, [user])
    candidates = np.arange(interest.shape[1])
    if graph is not None:
        candidates = np.setdiff1d(candidates, graph.seen_items(user), assume_unique=True)
    return [ScoredItem(int(i), float(interest[0, i]), float(disinterest[0, i])) for i in candidates]


def _passes(disinterest: np.ndarray, delta: float, filter_mode: FilterMode) -> np.ndarray:
    if not math.isfinite(delta):
        # an infinite threshold disables the filter in either mode
        return np.ones(len(disinterest), dtype=bool)
    if filter_mode is FilterMode.KEEP_ABOVE:
        return disinterest > delta
    return disinterest < delta


def rank_candidates(
    items: np.ndarray,
    interest: np.ndarray,
    disinterest: np.ndarray,
    K_rec: int,
    delta: float,
    filter_mode: FilterMode = FilterMode.KEEP_BELOW,
    backfill: bool = True,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (top items, backfilled flags, all filter survivors ranked).

    Survivors sort by descending interest, ties by ascending item id.
    Backfill takes the least disinterested rejected items first.
    """
    keep = _passes(disinterest, delta, filter_mode)
    survivors = np.flatnonzero(keep)
    order = survivors[np.lexsort((items[survivors], -interest[survivors]))]
    top = order[:K_rec]
    flags = np.zeros(len(top), dtype=bool)
    if backfill and len(top) < K_rec:
        rejected = np.flatnonzero(~keep)
        closeness = disinterest[rejected] if filter_mode is FilterMode.KEEP_BELOW else -disinterest[rejected]
        refill = rejected[np.lexsort((items[rejected], -interest[rejected], closeness))][: K_rec - len(top)]
        top = np.concatenate([top, refill])
        flags = np.concatenate([flags, np.ones(len(refill), dtype=bool)])
    return items[top], flags, items[order]


def recommend(
    user: int,
    K_rec: int,
    delta: float,
    scores: Sequence[ScoredItem],
    filter_mode: FilterMode = FilterMode.KEEP_BELOW,
    backfill: bool = True,
) -> RankedList:
    if K_rec < 1:
        raise ConfigError(f"K_rec must be >= 1, got {K_rec}")
    if not scores:
        return RankedList(user=user)
    items = np.array([s.item for s in scores], dtype=np.int64)
    interest = np.array([s.interest for s in scores], dtype=np.float64)
    disinterest = np.array([s.disinterest for s in scores], dtype=np.float64)
    by_item = {s.item: s for s in scores}
    top, flags, kept = rank_candidates(items, interest, disinterest, K_rec, delta, filter_mode, backfill)
    entries = [
        ScoredItem(int(i), by_item[int(i)].interest, by_item[int(i)].disinterest, bool(flag))
        for i, flag in zip(top, flags)
    ]
    return RankedList(user=user, items=entries, kept=kept.tolist())


def rank_users(
    Z: torch.Tensor,
    V: torch.Tensor,
    graph: SignedBipartiteGraph,
    users: Sequence[int],
    K_rec: int,
    delta: float,
    filter_mode: FilterMode = FilterMode.KEEP_BELOW,
    backfill: bool = True,
    keep_survivors: bool = False,
) -> Dict[int, RankedList]:
    """Vectorized `recommend` for many users, scoring in chunks"""
    if K_rec < 1:
        raise ConfigError(f"K_rec must be >= 1, got {K_rec}")
    _check_users(users, graph.n_users)
    out: Dict[int, RankedList] = {}
    all_items = np.arange(graph.n_items, dtype=np.int64)
    for start in range(0, len(users), USER_CHUNK):
        chunk = list(users[start : start + USER_CHUNK])
        interest, disinterest = score_arrays(Z, V, graph.n_users, chunk)
        for row, user in enumerate(chunk):
            unseen = np.ones(graph.n_items, dtype=bool)
            unseen[graph.seen_items(user)] = False
            top, flags, kept = rank_candidates(
                all_items[unseen],
                interest[row, unseen],
                disinterest[row, unseen],
                K_rec,
                delta,
                filter_mode,
                backfill,
            )
            out[int(user)] = RankedList(
                user=int(user),
                items=[
                    ScoredItem(int(i), float(interest[row, i]), float(disinterest[row, i]), bool(flag))
                    for i, flag in zip(top, flags)
                ],
                kept=kept.tolist() if keep_survivors else [],
            )
    return out


def ground_truth(test_edges: EdgeSet) -> Dict[int, Set[int]]:
    """Positive test items per user"""
    truth: Dict[int, Set[int]] = {}
    for user, item in zip(test_edges.users[test_edges.signs == 1].tolist(), test_edges.items[test_edges.signs == 1].tolist()):
        truth.setdefault(user, set()).add(item)
    return truth


def _top(entry: Optional[RecList], K: int, backfilled_as_miss: bool) -> List[int]:
    if entry is None:
        return []
    if isinstance(entry, RankedList):
        return entry.top(K, backfilled_as_miss)
    return list(entry)[:K]


def _evaluated(ground: Mapping[int, Set[int]]) -> List[int]:
    return sorted(u for u, items in ground.items() if items)


def precision_at_k(
    rec_lists: Mapping[int, RecList], ground: Mapping[int, Set[int]], K: int, backfilled_as_miss: bool = False
) -> float:
    """Mean hits/K over users with a non-empty ground truth"""
    users = _evaluated(ground)
    if not users:
        return 0.0
    total = sum(sum(1 for i in _top(rec_lists.get(u), K, backfilled_as_miss) if i in ground[u]) / K for u in users)
    return total / len(users)


def recall_at_k(
    rec_lists: Mapping[int, RecList], ground: Mapping[int, Set[int]], K: int, backfilled_as_miss: bool = False
) -> float:
    users = _evaluated(ground)
    if not users:
        return 0.0
    total = sum(
        sum(1 for i in _top(rec_lists.get(u), K, backfilled_as_miss) if i in ground[u]) / len(ground[u]) for u in users
    )
    return total / len(users)


def ndcg_at_k(
    rec_lists: Mapping[int, RecList],
    ground: Mapping[int, Set[int]],
    K: int,
    backfilled_as_miss: bool = False,
    capped_idcg: bool = False,
) -> float:
    """Binary-relevance nDCG; the ideal DCG fills all K slots unless `capped_idcg`"""
    users = _evaluated(ground)
    if not users:
        return 0.0
    discounts = 1.0 / np.log2(np.arange(2, K + 2))
    total = 0.0
    for u in users:
        top = _top(rec_lists.get(u), K, backfilled_as_miss)
        dcg = sum(discounts[rank] for rank, i in enumerate(top) if i in ground[u])
        ideal_slots = min(K, len(ground[u])) if capped_idcg else K
        total += dcg / discounts[:ideal_slots].sum()
    return total / len(users)


def evaluate(
    Z: torch.Tensor,
    V: torch.Tensor,
    graph: SignedBipartiteGraph,
    test_edges: EdgeSet,
    k_list: Sequence[int] = (5, 10, 15),
    delta: float = float("inf"),
    filter_mode: FilterMode = FilterMode.KEEP_BELOW,
    backfill: bool = True,
    backfilled_as_miss: bool = False,
    capped_idcg: bool = False,
) -> MetricsReport:
    """Rank every user with a positive test item and average the metrics"""
    ground = ground_truth(test_edges)
    users = _evaluated(ground)
    k_list = sorted(set(k_list))
    if not k_list or k_list[0] < 1:
        raise ConfigError(f"k_list must hold at least one K >= 1, got {k_list}")
    lists = rank_users(Z, V, graph, users, k_list[-1], delta, filter_mode, backfill)
    report = MetricsReport(
        precision={k: precision_at_k(lists, ground, k, backfilled_as_miss) for k in k_list},
        recall={k: recall_at_k(lists, ground, k, backfilled_as_miss) for k in k_list},
        ndcg={k: ndcg_at_k(lists, ground, k, backfilled_as_miss, capped_idcg) for k in k_list},
        evaluated_users=len(users),
    )
    logger.info("ranking.evaluated", users=len(users), delta=delta, **report.flat())
    return report


def write_recommendations(path: Union[str, Path], lists: Mapping[int, RankedList]) -> Path:
    """TSV: user, rank (1-based), item, interest, disinterest, backfilled"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as out:
        for user in sorted(lists):
            for rank, entry in enumerate(lists[user].items, start=1):
                out.write(
                    f"{user}\t{rank}\t{entry.item}\t{entry.interest:.6f}\t{entry.disinterest:.6f}\t{int(entry.backfilled)}\n"
                )
    return path


def write_metrics(path: Union[str, Path], report: MetricsReport) -> Path:
    """JSON object keyed precision@K, recall@K, ndcg@K plus evaluated_users"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.flat(), indent=2) + "\n", encoding="utf-8")
    return path
