"""Positive, negative and distorted bipartite graphs over users and items.

Nodes share one index space: users are 0..n_users-1 and item i is node
n_users + i. Adjacency is stored user-major in CSR form with sorted
neighbor lists, so every derived quantity is deterministic.
"""

import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
import torch

from app.core.errors import GraphError
from app.core.logging import get_logger
from app.core.seeding import Stream, stream_generator
from app.models.records import EdgeSet

logger = get_logger(__name__)

CACHE_MAGIC = b"PGNN"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIIIII")


class GraphSide(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    DISTORTED = "distorted"


class BipartiteView:
    """One edge set of the bipartite graph with degree tables and normalized adjacency"""

    def __init__(self, n_users: int, n_items: int, users: np.ndarray, items: np.ndarray):
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        data = np.ones(len(users), dtype=np.float64)
        matrix = sp.csr_matrix((data, (users, items)), shape=(self.n_users, self.n_items))
        matrix.sort_indices()
        self.user_items: sp.csr_matrix = matrix
        self.item_users: sp.csr_matrix = matrix.T.tocsr()
        self.item_users.sort_indices()
        self.user_degree = np.diff(self.user_items.indptr).astype(np.int64)
        self.item_degree = np.diff(self.item_users.indptr).astype(np.int64)
        coo = matrix.tocoo()
        # row-major order of the sorted CSR matrix
        self.keys = coo.row.astype(np.int64) * np.int64(max(self.n_items, 1)) + coo.col.astype(np.int64)
        self._normalized: Dict[torch.dtype, torch.Tensor] = {}

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    @property
    def n_edges(self) -> int:
        return int(self.user_items.nnz)

    def edges(self) -> Tuple[np.ndarray, np.ndarray]:
        coo = self.user_items.tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64)

    def items_of(self, user: int) -> np.ndarray:
        start, stop = self.user_items.indptr[user], self.user_items.indptr[user + 1]
        return self.user_items.indices[start:stop]

    def users_of(self, item: int) -> np.ndarray:
        start, stop = self.item_users.indptr[item], self.item_users.indptr[item + 1]
        return self.item_users.indices[start:stop]

    def degree(self, node: int) -> int:
        """|N(node)| for a global node id"""
        if node < self.n_users:
            return int(self.user_degree[node])
        return int(self.item_degree[node - self.n_users])

    def degrees(self) -> np.ndarray:
        return np.concatenate([self.user_degree, self.item_degree])

    def neighbors(self, node: int) -> np.ndarray:
        """Global ids adjacent to a global node id, ascending"""
        if node < 0 or node >= self.n_nodes:
            raise GraphError(f"node {node} outside 0..{self.n_nodes - 1}")
        if node < self.n_users:
            return self.items_of(node) + self.n_users
        return self.users_of(node - self.n_users).astype(np.int64)

    def has_edge(self, user: int, item: int) -> bool:
        key = np.int64(user) * np.int64(max(self.n_items, 1)) + np.int64(item)
        pos = np.searchsorted(self.keys, key)
        return bool(pos < len(self.keys) and self.keys[pos] == key)

    def contains(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Vectorized membership test for (user, item) pairs"""
        keys = users.astype(np.int64) * np.int64(max(self.n_items, 1)) + items.astype(np.int64)
        if not len(self.keys):
            return np.zeros(len(keys), dtype=bool)
        pos = np.minimum(np.searchsorted(self.keys, keys), len(self.keys) - 1)
        return self.keys[pos] == keys

    def normalized_adjacency(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """N x N sparse D^-1/2 A D^-1/2 over the symmetric bipartite adjacency.

        Isolated nodes get an all-zero row and column; no self-loops.
        """
        if dtype not in self._normalized:
            adjacency = sp.bmat(
                [[None, self.user_items], [self.item_users, None]],
                format="csr",
            ) if self.n_users and self.n_items else sp.csr_matrix((self.n_nodes, self.n_nodes))
            degree = np.asarray(adjacency.sum(axis=1)).ravel()
            with np.errstate(divide="ignore"):
                inv_sqrt = np.where(degree > 0, 1.0 / np.sqrt(degree), 0.0)
            scale = sp.diags(inv_sqrt)
            normalized = (scale @ adjacency @ scale).tocoo()
            indices = torch.from_numpy(np.vstack([normalized.row, normalized.col]).astype(np.int64))
            values = torch.from_numpy(normalized.data).to(dtype)
            self._normalized[dtype] = torch.sparse_coo_tensor(
                indices, values, size=(self.n_nodes, self.n_nodes)
            ).coalesce()
        return self._normalized[dtype]


@dataclass(frozen=True)
class SignedBipartiteGraph:
    n_users: int
    n_items: int
    positive: BipartiteView
    negative: BipartiteView

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    def seen(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        return self.positive.contains(users, items) | self.negative.contains(users, items)

    def seen_items(self, user: int) -> np.ndarray:
        return np.union1d(self.positive.items_of(user), self.negative.items_of(user))


@dataclass(frozen=True)
class DistortedGraph:
    view: BipartiteView
    p: float
    seed: int

    @property
    def n_edges(self) -> int:
        return self.view.n_edges


def build(edges: EdgeSet, n_users: int, n_items: int) -> SignedBipartiteGraph:
    """Split signed edges into the edge-disjoint positive and negative views"""
    if len(edges):
        if edges.users.min() < 0 or edges.users.max() >= n_users:
            raise GraphError(f"user index out of range 0..{n_users - 1}")
        if edges.items.min() < 0 or edges.items.max() >= n_items:
            raise GraphError(f"item index out of range 0..{n_items - 1}")
        keys = edges.users * np.int64(max(n_items, 1)) + edges.items
        unique, counts = np.unique(keys, return_counts=True)
        if (counts > 1).any():
            dup = int(unique[np.argmax(counts > 1)])
            raise GraphError(
                f"duplicate edge for pair (user={dup // max(n_items, 1)}, item={dup % max(n_items, 1)})"
            )
    pos = edges.signs == 1
    graph = SignedBipartiteGraph(
        n_users=int(n_users),
        n_items=int(n_items),
        positive=BipartiteView(n_users, n_items, edges.users[pos], edges.items[pos]),
        negative=BipartiteView(n_users, n_items, edges.users[~pos], edges.items[~pos]),
    )
    logger.debug(
        "signed_graph.built",
        users=n_users,
        items=n_items,
        positive_edges=graph.positive.n_edges,
        negative_edges=graph.negative.n_edges,
    )
    return graph


def norm_coeff(x: int, y: int, view: Union[BipartiteView, DistortedGraph]) -> float:
    """1 / (sqrt|N(x)| * sqrt|N(y)|) for adjacent global nodes x and y"""
    if isinstance(view, DistortedGraph):
        view = view.view
    if x < view.n_users <= y:
        user, item = x, y - view.n_users
    elif y < view.n_users <= x:
        user, item = y, x - view.n_users
    else:
        raise GraphError(f"nodes {x} and {y} are on the same side of the bipartition")
    if item >= view.n_items or not view.has_edge(user, item):
        raise GraphError(f"nodes {x} and {y} are not adjacent")
    return 1.0 / (math.sqrt(view.degree(x)) * math.sqrt(view.degree(y)))


def distort(graph: SignedBipartiteGraph, p: float, seed: int, counter: int = 0) -> DistortedGraph:
    """Drop each negative edge independently with probability p.

    One Bernoulli draw per undirected edge keeps both adjacency directions
    in agreement. `counter` selects a fresh mask for per-epoch distortion.
    """
    if not 0.0 <= p <= 1.0:
        raise GraphError(f"edge-removal probability must lie in [0, 1], got {p}")
    users, items = graph.negative.edges()
    rng = stream_generator(seed, Stream.DISTORTION, counter)
    keep = rng.random(len(users)) >= p
    view = BipartiteView(graph.n_users, graph.n_items, users[keep], items[keep])
    logger.debug("signed_graph.distorted", p=p, kept=view.n_edges, of=len(users))
    return DistortedGraph(view=view, p=float(p), seed=int(seed))


def save_graph_cache(path: Union[str, Path], graph: SignedBipartiteGraph) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pos_users, pos_items = graph.positive.edges()
    neg_users, neg_items = graph.negative.edges()
    with open(path, "wb") as out:
        out.write(
            _CACHE_HEADER.pack(
                CACHE_MAGIC, CACHE_VERSION, graph.n_users, graph.n_items, len(pos_users), len(neg_users)
            )
        )
        for array in (pos_users, pos_items, neg_users, neg_items):
            out.write(array.astype("<i4").tobytes())
    return path


def load_graph_cache(path: Union[str, Path]) -> SignedBipartiteGraph:
    path = Path(path)
    payload = path.read_bytes()
    if len(payload) < _CACHE_HEADER.size:
        raise GraphError(f"{path}: truncated graph cache")
    magic, version, n_users, n_items, n_pos, n_neg = _CACHE_HEADER.unpack_from(payload)
    if magic != CACHE_MAGIC:
        raise GraphError(f"{path}: not a graph cache (magic {magic!r})")
    if version != CACHE_VERSION:
        raise GraphError(f"{path}: unsupported graph cache version {version}")
    expected = _CACHE_HEADER.size + 4 * 2 * (n_pos + n_neg)
    if len(payload) != expected:
        raise GraphError(f"{path}: expected {expected} bytes, found {len(payload)}")
    arrays = []
    offset = _CACHE_HEADER.size
    for count in (n_pos, n_pos, n_neg, n_neg):
        arrays.append(np.frombuffer(payload, dtype="<i4", count=count, offset=offset).astype(np.int64))
        offset += 4 * count
    pos_users, pos_items, neg_users, neg_items = arrays
    edges = EdgeSet(
        np.concatenate([pos_users, neg_users]),
        np.concatenate([pos_items, neg_items]),
        np.concatenate([np.ones(n_pos), -np.ones(n_neg)]),
    )
    return build(edges, n_users, n_items)


def side_view(
    graph: SignedBipartiteGraph, side: GraphSide, distorted: Optional[DistortedGraph] = None
) -> BipartiteView:
    if side is GraphSide.POSITIVE:
        return graph.positive
    if side is GraphSide.NEGATIVE:
        return graph.negative
    if distorted is None:
        raise GraphError("distorted side requested but no distorted graph was supplied")
    return distorted.view
