"""The training loop: forward, loss, reverse-mode gradients and Adam per mini-batch pair."""

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np
import torch

from app.core.config import HyperParams, Variant
from app.core.errors import NonFiniteLossError
from app.core.logging import get_logger
from app.core.seeding import Stream, stream_generator, torch_generator
from app.models.records import EdgeSet
from app.services.model_core import Mode, ModelGraphs, ModelParams, forward, init_params, save_checkpoint
from app.services.objectives import (
    LossBreakdown,
    Side,
    TripleBatch,
    gradients,
    sample_batches,
    total_loss,
    trainable_names,
)
from app.services.optim import OptimizerState, adam_step
from app.services.ranking_eval import evaluate
from app.services.signed_graph import SignedBipartiteGraph, distort

logger = get_logger(__name__)

LOG_HEADER = ("epoch", "L_total", "L_DB", "L_CL", "L_Reg", "wall_ms")
EARLY_STOPPING_K = 10


@dataclass
class EpochLog:
    epoch: int
    total: float
    db: float
    cl: float
    reg: float
    wall_ms: float

    def row(self) -> str:
        return f"{self.epoch}\t{self.total:.6f}\t{self.db:.6f}\t{self.cl:.6f}\t{self.reg:.6f}\t{self.wall_ms:.1f}"


@dataclass
class TrainingResult:
    params: ModelParams
    log: List[EpochLog] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_recall: Optional[float] = None
    stopped_early: bool = False


def _sides(variant: Variant) -> List[Side]:
    sides = []
    if variant.uses_positive:
        sides.append(Side.POSITIVE)
    if variant.uses_negative:
        sides.append(Side.NEGATIVE)
    return sides


def _dump_batch(output_dir: Optional[Path], epoch: int, step: int, B_p: TripleBatch, B_n: TripleBatch) -> Optional[Path]:
    if output_dir is None:
        return None
    path = Path(output_dir) / f"nonfinite_epoch{epoch}_step{step}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        positive_users=B_p.users,
        positive_items_i=B_p.items_i,
        positive_items_j=B_p.items_j,
        negative_users=B_n.users,
        negative_items_i=B_n.items_i,
        negative_items_j=B_n.items_j,
    )
    return path


def _check_finite(parts: LossBreakdown, output_dir, epoch: int, step: int, B_p: TripleBatch, B_n: TripleBatch) -> None:
    if parts.is_finite():
        return
    values = parts.values()
    dump = _dump_batch(output_dir, epoch, step, B_p, B_n)
    logger.error("trainer.non_finite_loss", epoch=epoch, step=step, **values)
    raise NonFiniteLossError(
        f"non-finite loss at epoch {epoch} step {step}: "
        + ", ".join(f"{name}={value}" for name, value in values.items()),
        dump_path=dump,
    )


def write_training_log(path: Union[str, Path], rows: List[EpochLog]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(LOG_HEADER)] + [row.row() for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def train(
    graph: SignedBipartiteGraph,
    hp: HyperParams,
    variant: Variant = Variant.FULL,
    output_dir: Optional[Union[str, Path]] = None,
    checkpoint_every: int = 0,
    validation: Optional[EdgeSet] = None,
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
) -> TrainingResult:
    """Fit ModelParams on the signed training graph.

    One forward pass and one Adam step per (B_p, B_n) pair unless
    `hp.step_per_epoch`, which accumulates gradients over the epoch and steps
    once. With `hp.early_stopping`, `validation` holds the positive edges
    scored with Recall@10 every `hp.eval_every` epochs; the best parameters
    are returned.
    """
    output_dir = Path(output_dir) if output_dir is not None else None
    variant = Variant(variant)
    names = trainable_names(variant)
    params = init_params(graph.n_users, graph.n_items, hp.H, hp.seed).requires_grad_(names)
    state = OptimizerState()

    distorted = distort(graph, hp.p, hp.seed) if variant.uses_contrastive else None
    graphs = ModelGraphs.from_graphs(graph, distorted, variant=variant)
    dropout_generator = torch_generator(stream_generator(hp.seed, Stream.DROPOUT))
    infonce_generator = torch_generator(stream_generator(hp.seed, Stream.INFONCE))
    sides = _sides(variant)

    result = TrainingResult(params=params)
    best_params: Optional[ModelParams] = None
    stale = 0
    logger.info(
        "trainer.started",
        variant=variant.value,
        users=graph.n_users,
        items=graph.n_items,
        positive_edges=graph.positive.n_edges,
        negative_edges=graph.negative.n_edges,
        epochs=hp.epochs,
        trainable=list(names),
    )

    for epoch in range(1, hp.epochs + 1):
        started = time.perf_counter()
        if hp.distort_per_epoch and distorted is not None and epoch > 1:
            distorted = distort(graph, hp.p, hp.seed, counter=epoch - 1)
            graphs = graphs.with_distorted(distorted)

        sums: Dict[str, float] = {"total": 0.0, "db": 0.0, "cl": 0.0, "reg": 0.0}
        accumulated: Dict[str, torch.Tensor] = {}
        batches = sample_batches(graph, hp.neg_samples_per_edge, hp.batch_size, hp.seed, epoch - 1, sides)
        last_pair = None
        for step, (B_p, B_n) in enumerate(batches):
            last_pair = (B_p, B_n)
            embeddings = forward(
                params,
                graphs,
                hp.K,
                Mode.TRAIN,
                generator=dropout_generator,
                dropout_rate=hp.dropout_rate,
                attention_mode=hp.attention_mode,
            )
            parts = total_loss(
                B_p,
                B_n,
                embeddings,
                params,
                hp,
                variant,
                generator=infonce_generator,
                include_global=not hp.step_per_epoch,
            )
            _check_finite(parts, output_dir, epoch, step, B_p, B_n)
            for key, value in parts.values().items():
                sums[key] += value
            if parts.total.grad_fn is None:
                continue
            grads = gradients(parts.total, params, names)
            if hp.step_per_epoch:
                for name, grad in grads.items():
                    accumulated[name] = accumulated[name] + grad if name in accumulated else grad
            else:
                adam_step(params, grads, state, hp.lr)

        if hp.step_per_epoch and last_pair is not None:
            B_p, B_n = last_pair
            embeddings = forward(
                params,
                graphs,
                hp.K,
                Mode.TRAIN,
                generator=dropout_generator,
                dropout_rate=hp.dropout_rate,
                attention_mode=hp.attention_mode,
            )
            parts = total_loss(
                B_p, B_n, embeddings, params, hp, variant, generator=infonce_generator, include_db=False
            )
            _check_finite(parts, output_dir, epoch, -1, B_p, B_n)
            for key in ("cl", "reg"):
                sums[key] += parts.values()[key]
            sums["total"] += parts.values()["total"]
            for name, grad in gradients(parts.total, params, names).items():
                accumulated[name] = accumulated[name] + grad if name in accumulated else grad
            adam_step(params, accumulated, state, hp.lr)

        entry = EpochLog(
            epoch=epoch,
            total=sums["total"],
            db=sums["db"],
            cl=sums["cl"],
            reg=sums["reg"],
            wall_ms=(time.perf_counter() - started) * 1000.0,
        )
        result.log.append(entry)
        logger.info(
            "trainer.epoch",
            epoch=epoch,
            loss_total=entry.total,
            loss_db=entry.db,
            loss_cl=entry.cl,
            loss_reg=entry.reg,
            wall_ms=round(entry.wall_ms, 1),
        )
        if on_epoch is not None:
            on_epoch(entry)

        if output_dir is not None and checkpoint_every and epoch % checkpoint_every == 0:
            save_checkpoint(output_dir / f"checkpoint_epoch{epoch}.bin", params, graph.n_users, graph.n_items)

        if hp.early_stopping and validation is not None and len(validation) and epoch % hp.eval_every == 0:
            recall = _validation_recall(params, graphs, graph, validation, hp)
            if result.best_recall is None or recall > result.best_recall:
                result.best_recall, result.best_epoch = recall, epoch
                best_params = params.detached()
                stale = 0
            else:
                stale += hp.eval_every
            logger.info("trainer.validation", epoch=epoch, recall=recall, best=result.best_recall, stale=stale)
            if stale >= hp.patience:
                result.stopped_early = True
                logger.info("trainer.early_stop", epoch=epoch, best_epoch=result.best_epoch)
                break

    final = best_params if best_params is not None else params
    result.params = final.detached()
    logger.info(
        "trainer.finished",
        epochs_run=len(result.log),
        best_epoch=result.best_epoch,
        stopped_early=result.stopped_early,
        final_loss=result.log[-1].total if result.log else math.nan,
    )
    return result


def _validation_recall(
    params: ModelParams,
    graphs: ModelGraphs,
    graph: SignedBipartiteGraph,
    validation: EdgeSet,
    hp: HyperParams,
) -> float:
    with torch.no_grad():
        embeddings = forward(params, graphs, hp.K, Mode.EVAL, attention_mode=hp.attention_mode)
    report = evaluate(embeddings.Z, embeddings.V, graph, validation, [EARLY_STOPPING_K])
    return report.recall[EARLY_STOPPING_K]
