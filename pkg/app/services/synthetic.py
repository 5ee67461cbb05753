"""Block-structured signed datasets with known ground truth."""

from dataclasses import dataclass
from typing import Dict, Set

import numpy as np

from app.core.logging import get_logger
from app.core.seeding import Stream, stream_generator
from app.models.records import EdgeSet
from app.services.ranking_eval import ground_truth, precision_at_k, recall_at_k

logger = get_logger(__name__)


@dataclass(frozen=True)
class SyntheticDataset:
    train: EdgeSet
    test: EdgeSet
    n_users: int
    n_items: int
    user_block: np.ndarray
    item_block: np.ndarray

    @property
    def blocks(self) -> int:
        return int(self.user_block.max(initial=-1)) + 1


def block_dataset(
    n_users: int = 200,
    n_items: int = 400,
    blocks: int = 2,
    positive_density: float = 1.0,
    negative_density: float = 0.3,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> SyntheticDataset:
    """Users of block b like items of block b and dislike some items elsewhere.

    Every user holds out `test_fraction` of their in-block positives as test
    edges; cross-block negatives all go to training.
    """
    if blocks < 1 or n_users < blocks or n_items < blocks:
        raise ValueError(f"need at least one user and one item per block, got {n_users}x{n_items} over {blocks} blocks")
    rng = stream_generator(seed, Stream.SPLIT, counter=1)
    user_block = np.arange(n_users) * blocks // n_users
    item_block = np.arange(n_items) * blocks // n_items

    train_rows = []
    test_rows = []
    for user in range(n_users):
        own = np.flatnonzero(item_block == user_block[user])
        liked = own[rng.random(len(own)) < positive_density]
        n_test = int(round(len(liked) * test_fraction))
        held = np.zeros(len(liked), dtype=bool)
        held[rng.choice(len(liked), size=n_test, replace=False)] = True
        test_rows += [(user, int(i), 1) for i in liked[held]]
        train_rows += [(user, int(i), 1) for i in liked[~held]]
        other = np.flatnonzero(item_block != user_block[user])
        disliked = other[rng.random(len(other)) < negative_density]
        train_rows += [(user, int(i), -1) for i in disliked]

    dataset = SyntheticDataset(
        train=EdgeSet.from_tuples(train_rows),
        test=EdgeSet.from_tuples(test_rows),
        n_users=n_users,
        n_items=n_items,
        user_block=user_block,
        item_block=item_block,
    )
    logger.info(
        "synthetic.generated",
        users=n_users,
        items=n_items,
        blocks=blocks,
        train=len(dataset.train),
        test=len(dataset.test),
    )
    return dataset


def centroid_oracle(dataset: SyntheticDataset, K: int) -> Dict[str, float]:
    """Recall@K and Precision@K of a nearest-block-centroid recommender.

    Each user is assigned the block whose item-indicator centroid is closest
    to their training positive profile; unseen items of that block are then
    listed in ascending index order.
    """
    train = dataset.train
    positives = train.positives
    profile = np.zeros((dataset.n_users, dataset.n_items))
    profile[positives.users, positives.items] = 1.0
    centroids = np.stack(
        [(dataset.item_block == b).astype(np.float64) / max((dataset.item_block == b).sum(), 1) for b in range(dataset.blocks)]
    )
    distances = ((profile[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assigned = distances.argmin(axis=1)

    seen: Dict[int, Set[int]] = {}
    for user, item in zip(train.users.tolist(), train.items.tolist()):
        seen.setdefault(user, set()).add(item)
    lists = {
        user: [int(i) for i in np.flatnonzero(dataset.item_block == assigned[user]) if int(i) not in seen.get(user, set())][:K]
        for user in range(dataset.n_users)
    }
    truth = ground_truth(dataset.test)
    return {"recall": recall_at_k(lists, truth, K), "precision": precision_at_k(lists, truth, K)}
