"""Training triples and the loss terms: dual feedback-aware BPR, InfoNCE on the
negative/distorted views, and L2 on the layer-0 embeddings."""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, Iterator, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from app.core.config import HyperParams, Variant
from app.core.errors import GradientError
from app.core.logging import get_logger
from app.core.seeding import Stream, stream_generator
from app.services.model_core import EmbeddingSet, ModelParams
from app.services.signed_graph import BipartiteView, SignedBipartiteGraph

logger = get_logger(__name__)


class Side(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


@dataclass(frozen=True)
class TrainingTriple:
    user: int
    observed_item: int
    sampled_item: int
    side: Side


@dataclass(frozen=True)
class TripleBatch:
    """Column-wise triples of one side; items are item indices, not node ids"""

    side: Side
    users: np.ndarray
    items_i: np.ndarray
    items_j: np.ndarray
    n_users: int

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[TrainingTriple]:
        for u, i, j in zip(self.users.tolist(), self.items_i.tolist(), self.items_j.tolist()):
            yield TrainingTriple(u, i, j, self.side)

    @classmethod
    def empty(cls, side: Side, n_users: int) -> "TripleBatch":
        nothing = np.empty(0, dtype=np.int64)
        return cls(side, nothing, nothing, nothing, n_users)

    def take(self, index) -> "TripleBatch":
        return TripleBatch(self.side, self.users[index], self.items_i[index], self.items_j[index], self.n_users)

    def node_tensors(self) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return (
            torch.from_numpy(self.users),
            torch.from_numpy(self.items_i + self.n_users),
            torch.from_numpy(self.items_j + self.n_users),
        )


def sample_triples(view: BipartiteView, side: Side, neg_samples_per_edge: int, rng: np.random.Generator) -> TripleBatch:
    """All triples of one side for one epoch, shuffled.

    j is drawn uniformly from the items outside the same-side neighbor set,
    resampling collisions. Users adjacent to every item are skipped.
    """
    users, items = view.edges()
    saturated = view.user_degree[users] >= view.n_items
    if saturated.any():
        skipped = np.unique(users[saturated])
        logger.warning(
            "objectives.saturated_users_skipped",
            side=side.value,
            users=skipped[:10].tolist(),
            count=len(skipped),
        )
        users, items = users[~saturated], items[~saturated]
    if not len(users):
        return TripleBatch.empty(side, view.n_users)

    users = np.repeat(users, neg_samples_per_edge)
    items = np.repeat(items, neg_samples_per_edge)
    sampled = rng.integers(0, view.n_items, size=len(users))
    collided = view.contains(users, sampled)
    while collided.any():
        sampled[collided] = rng.integers(0, view.n_items, size=int(collided.sum()))
        collided[collided] = view.contains(users[collided], sampled[collided])
    order = rng.permutation(len(users))
    return TripleBatch(side, users[order], items[order], sampled[order].astype(np.int64), view.n_users)


def sample_batches(
    graph: SignedBipartiteGraph,
    neg_samples_per_edge: int,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    sides: Iterable[Side] = (Side.POSITIVE, Side.NEGATIVE),
) -> Iterator[Tuple[TripleBatch, TripleBatch]]:
    """One epoch of (B_p, B_n) pairs, the shorter side cycling round-robin"""
    rng = stream_generator(seed, Stream.SAMPLING, epoch)
    sides = set(sides)
    positive = (
        sample_triples(graph.positive, Side.POSITIVE, neg_samples_per_edge, rng)
        if Side.POSITIVE in sides
        else TripleBatch.empty(Side.POSITIVE, graph.n_users)
    )
    negative = (
        sample_triples(graph.negative, Side.NEGATIVE, neg_samples_per_edge, rng)
        if Side.NEGATIVE in sides
        else TripleBatch.empty(Side.NEGATIVE, graph.n_users)
    )
    n_pos = math.ceil(len(positive) / batch_size)
    n_neg = math.ceil(len(negative) / batch_size)
    for step in range(max(n_pos, n_neg)):
        yield (
            _chunk(positive, step % n_pos, batch_size) if n_pos else positive,
            _chunk(negative, step % n_neg, batch_size) if n_neg else negative,
        )


def _chunk(triples: TripleBatch, index: int, batch_size: int) -> TripleBatch:
    return triples.take(slice(index * batch_size, (index + 1) * batch_size))


def db_bpr_loss(B_p: TripleBatch, B_n: TripleBatch, Z: torch.Tensor, V: torch.Tensor, b: float) -> torch.Tensor:
    """-sum ln s(y_ui - y_uj) over B_p  -  sum ln s(y_uj - b * y_ui) over B_n"""
    loss = Z.new_zeros(())
    if len(B_p):
        u, i, j = B_p.node_tensors()
        z_u = Z[u]
        diff = (z_u * Z[i]).sum(dim=1) - (z_u * Z[j]).sum(dim=1)
        loss = loss - F.logsigmoid(diff).sum()
    if len(B_n):
        u, i, j = B_n.node_tensors()
        v_u = V[u]
        diff = (v_u * V[j]).sum(dim=1) - b * (v_u * V[i]).sum(dim=1)
        loss = loss - F.logsigmoid(diff).sum()
    return loss


def _info_nce_block(
    anchors: torch.Tensor,
    views: torch.Tensor,
    tau: float,
    candidates: Optional[int],
    generator: Optional[torch.Generator],
) -> torch.Tensor:
    n = anchors.shape[0]
    if n == 0:
        return anchors.new_zeros(())
    if candidates is None or candidates >= n:
        logits = anchors @ views.T / tau
        return F.cross_entropy(logits, torch.arange(n), reduction="sum")
    positive = (anchors * views).sum(dim=1, keepdim=True) / tau
    drawn = torch.randint(0, n, (n, candidates), generator=generator)
    negative = torch.einsum("nh,nmh->nm", anchors, views[drawn]) / tau
    logits = torch.cat([positive, negative], dim=1)
    return -(positive.squeeze(1) - torch.logsumexp(logits, dim=1)).sum()


def infonce_loss(
    V: torch.Tensor,
    Vtilde: torch.Tensor,
    tau: float,
    n_users: int,
    candidates: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Users contrast against all users, items against all items.

    With `candidates` set, each anchor's denominator uses that many
    uniformly drawn rows instead of the full side.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if V.shape != Vtilde.shape:
        raise ValueError(f"view shapes differ: {tuple(V.shape)} vs {tuple(Vtilde.shape)}")
    users = _info_nce_block(V[:n_users], Vtilde[:n_users], tau, candidates, generator)
    items = _info_nce_block(V[n_users:], Vtilde[n_users:], tau, candidates, generator)
    return users + items


def l2_reg(params: ModelParams) -> torch.Tensor:
    """||Z0||^2 + ||V0||^2; network weights are not regularized"""
    return params.Z0.pow(2).sum() + params.V0.pow(2).sum()


@dataclass
class LossBreakdown:
    total: torch.Tensor
    db: torch.Tensor
    cl: torch.Tensor
    reg: torch.Tensor

    def values(self) -> Dict[str, float]:
        return {
            "total": float(self.total.detach()),
            "db": float(self.db.detach()),
            "cl": float(self.cl.detach()),
            "reg": float(self.reg.detach()),
        }

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.values().values())


def effective_lambda1(hp: HyperParams, variant: Variant) -> float:
    return hp.lambda1 if variant.uses_contrastive else 0.0


def total_loss(
    B_p: TripleBatch,
    B_n: TripleBatch,
    embeddings: EmbeddingSet,
    params: ModelParams,
    hp: HyperParams,
    variant: Variant = Variant.FULL,
    generator: Optional[torch.Generator] = None,
    include_db: bool = True,
    include_global: bool = True,
) -> LossBreakdown:
    """L = L_DB + lambda1 * L_CL + lambda2 * L_Reg, with terms selected by the variant.

    `include_db` / `include_global` split the batch term from the whole-graph
    terms for the once-per-epoch stepping schedule.
    """
    zero = params.Z0.new_zeros(())
    if include_db:
        positive = B_p if variant.uses_positive else TripleBatch.empty(Side.POSITIVE, B_p.n_users)
        negative = B_n if variant.uses_negative else TripleBatch.empty(Side.NEGATIVE, B_n.n_users)
        db = db_bpr_loss(positive, negative, embeddings.Z, embeddings.V, hp.b)
    else:
        db = zero
    lambda1 = effective_lambda1(hp, variant)
    cl = zero
    reg = zero
    if include_global:
        if lambda1 > 0 and embeddings.Vtilde is not None:
            cl = infonce_loss(
                embeddings.V, embeddings.Vtilde, hp.tau, B_p.n_users, hp.infonce_candidates, generator
            )
        reg = l2_reg(params)
    total = db + lambda1 * cl + hp.lambda2 * reg
    return LossBreakdown(total=total, db=db, cl=cl, reg=reg)


def trainable_names(variant: Variant) -> Tuple[str, ...]:
    """Parameters that receive updates; the unused branch stays frozen"""
    if variant is Variant.A:
        return ("V0",)
    if variant is Variant.B:
        return ("Z0",) + ModelParams.NETWORK
    return ModelParams.EMBEDDINGS + ModelParams.NETWORK


def gradients(loss: torch.Tensor, params: ModelParams, names: Optional[Iterable[str]] = None) -> Dict[str, torch.Tensor]:
    """Reverse-mode derivatives of `loss` for the named parameters (all by default)"""
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise GradientError("loss carries no recorded forward computation; run forward with grad-enabled params")
    named = params.named()
    selected = list(names) if names is not None else list(named)
    unknown = [n for n in selected if n not in named]
    if unknown:
        raise GradientError(f"unknown parameter(s) {unknown}")
    tensors = [named[n] for n in selected]
    if not all(t.requires_grad for t in tensors):
        missing = [n for n, t in zip(selected, tensors) if not t.requires_grad]
        raise GradientError(f"parameters {missing} were not recorded for differentiation")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {
        name: grad if grad is not None else torch.zeros_like(tensor)
        for name, grad, tensor in zip(selected, grads, tensors)
    }
