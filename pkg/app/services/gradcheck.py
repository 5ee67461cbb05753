"""Central finite differences against reverse-mode gradients of the full loss.

Runs in float64 on tiny random graphs with the dropout masks, distorted
graph and triples held fixed, so the loss is a deterministic function of
the parameters.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch

from app.core.config import HyperParams, Variant
from app.core.logging import get_logger
from app.core.seeding import Stream, derive_seed, stream_generator, torch_generator
from app.models.records import EdgeSet
from app.services.model_core import (
    DropoutMasks,
    EmbeddingSet,
    Mode,
    ModelGraphs,
    ModelParams,
    draw_dropout_masks,
    forward,
    init_params,
)
from app.services.objectives import (
    LossBreakdown,
    Side,
    TripleBatch,
    gradients,
    sample_triples,
    total_loss,
)
from app.services.signed_graph import SignedBipartiteGraph, build, distort

logger = get_logger(__name__)

STEP = 1e-3
TOLERANCE = 1e-4


@dataclass
class GradcheckConfig:
    max_users: int = 6
    max_items: int = 6
    H: int = 3
    K: int = 2
    b: float = 2.0
    tau: float = 0.8
    lambda1: float = 0.1
    lambda2: float = 0.1
    p: float = 0.3
    dropout_rate: float = 0.5
    variant: Variant = Variant.FULL

    def hyper_params(self, seed: int) -> HyperParams:
        return HyperParams(
            H=self.H,
            K=self.K,
            b=self.b,
            tau=self.tau,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            p=self.p,
            dropout_rate=self.dropout_rate,
            neg_samples_per_edge=1,
            seed=seed,
        )


@dataclass
class LossProblem:
    """A loss that depends only on ModelParams"""

    graph: SignedBipartiteGraph
    graphs: ModelGraphs
    masks: DropoutMasks
    B_p: TripleBatch
    B_n: TripleBatch
    hp: HyperParams
    variant: Variant

    def embeddings(self, params: ModelParams) -> EmbeddingSet:
        return forward(
            params, self.graphs, self.hp.K, Mode.TRAIN, masks=self.masks, attention_mode=self.hp.attention_mode
        )

    def loss(self, params: ModelParams) -> LossBreakdown:
        return total_loss(self.B_p, self.B_n, self.embeddings(params), params, self.hp, self.variant)

    def loss_and_pattern(self, params: ModelParams):
        """Loss value and the on/off pattern of every ReLU input"""
        embeddings = self.embeddings(params)
        value = total_loss(self.B_p, self.B_n, embeddings, params, self.hp, self.variant).total.item()
        return value, torch.cat([(x > 0).flatten() for x in embeddings.relu_inputs])


@dataclass
class ConfigResult:
    seed: int
    max_rel_error: float
    checked: int
    kinked: int
    worst: Optional[str] = None
    max_unfloored_rel_error: float = 0.0


@dataclass
class GradcheckReport:
    results: List[ConfigResult] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.results), default=0.0)

    @property
    def max_unfloored_rel_error(self) -> float:
        return max((r.max_unfloored_rel_error for r in self.results), default=0.0)

    @property
    def checked(self) -> int:
        return sum(r.checked for r in self.results)

    @property
    def kinked(self) -> int:
        return sum(r.kinked for r in self.results)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def random_signed_edges(n_users: int, n_items: int, rng: np.random.Generator) -> EdgeSet:
    """Every pair is positive, negative or absent; each side keeps at least one
    edge and every user keeps at least one item it has not interacted with"""
    while True:
        draw = rng.choice([1, -1, 0], size=(n_users, n_items), p=[0.35, 0.35, 0.3])
        full_pos = ((draw == 1).sum(axis=1) == n_items).any()
        full_neg = ((draw == -1).sum(axis=1) == n_items).any()
        if (draw == 1).any() and (draw == -1).any() and not full_pos and not full_neg:
            break
    users, items = np.nonzero(draw)
    return EdgeSet(users.astype(np.int64), items.astype(np.int64), draw[users, items].astype(np.int8))


def build_problem(seed: int, config: Optional[GradcheckConfig] = None) -> LossProblem:
    config = config or GradcheckConfig()
    rng = stream_generator(seed, Stream.INIT, counter=1)
    n_users = int(rng.integers(2, config.max_users + 1))
    n_items = int(rng.integers(2, config.max_items + 1))
    graph = build(random_signed_edges(n_users, n_items, rng), n_users, n_items)
    hp = config.hyper_params(seed)
    distorted = distort(graph, config.p, seed)
    graphs = ModelGraphs.from_graphs(graph, distorted, dtype=torch.float64, variant=config.variant)
    masks = draw_dropout_masks(
        graph.n_nodes,
        config.H,
        config.dropout_rate,
        torch_generator(stream_generator(seed, Stream.DROPOUT)),
        torch.float64,
    )
    sampler = stream_generator(seed, Stream.SAMPLING)
    return LossProblem(
        graph=graph,
        graphs=graphs,
        masks=masks,
        B_p=sample_triples(graph.positive, Side.POSITIVE, 1, sampler),
        B_n=sample_triples(graph.negative, Side.NEGATIVE, 1, sampler),
        hp=hp,
        variant=config.variant,
    )


def relative_error(analytic: float, numeric: float, floor: float = 1.0) -> float:
    """|g - g_hat| / max(|g|, |g_hat|, floor); floor=0 gives the plain relative error"""
    scale = max(abs(analytic), abs(numeric), floor)
    if scale == 0.0:
        return 0.0
    return abs(analytic - numeric) / scale


def check_problem(problem: LossProblem, params: ModelParams, step: float = STEP) -> ConfigResult:
    params = params.to(torch.float64).requires_grad_()
    analytic = {name: g.detach() for name, g in gradients(problem.loss(params).total, params).items()}
    base = params.detached()
    _, baseline_pattern = problem.loss_and_pattern(base)

    worst, worst_at, checked, kinked = 0.0, None, 0, 0
    unfloored = 0.0
    for name, tensor in base.named().items():
        flat = tensor.view(-1)
        for index in range(flat.numel()):
            original = flat[index].item()
            flat[index] = original + step
            plus, plus_pattern = problem.loss_and_pattern(base)
            flat[index] = original - step
            minus, minus_pattern = problem.loss_and_pattern(base)
            flat[index] = original
            if not (torch.equal(plus_pattern, baseline_pattern) and torch.equal(minus_pattern, baseline_pattern)):
                # a ReLU switched inside the stencil; the derivative is one-sided there
                kinked += 1
                continue
            numeric = (plus - minus) / (2.0 * step)
            g = analytic[name].view(-1)[index].item()
            error = relative_error(g, numeric)
            unfloored = max(unfloored, relative_error(g, numeric, floor=0.0))
            checked += 1
            if error > worst:
                worst, worst_at = error, f"{name}[{index}]"
    return ConfigResult(
        seed=-1,
        max_rel_error=worst,
        checked=checked,
        kinked=kinked,
        worst=worst_at,
        max_unfloored_rel_error=unfloored,
    )


def run_gradcheck(n_configs: int = 20, seed: int = 0, config: Optional[GradcheckConfig] = None) -> GradcheckReport:
    """Check every parameter coordinate on `n_configs` random problems"""
    config = config or GradcheckConfig()
    seeds = stream_generator(seed, Stream.INIT, counter=2)
    report = GradcheckReport()
    for _ in range(n_configs):
        problem_seed = derive_seed(seeds)
        problem = build_problem(problem_seed, config)
        params = init_params(problem.graph.n_users, problem.graph.n_items, config.H, problem_seed, torch.float64)
        result = check_problem(problem, params)
        result.seed = problem_seed
        report.results.append(result)
        logger.debug(
            "gradcheck.config",
            seed=problem_seed,
            users=problem.graph.n_users,
            items=problem.graph.n_items,
            max_rel_error=result.max_rel_error,
            max_unfloored_rel_error=result.max_unfloored_rel_error,
            worst=result.worst,
            kinked=result.kinked,
        )
    logger.info(
        "gradcheck.finished",
        configs=n_configs,
        max_rel_error=report.max_rel_error,
        max_unfloored_rel_error=report.max_unfloored_rel_error,
        checked=report.checked,
        kinked=report.kinked,
    )
    return report


def gradient_dict(problem: LossProblem, params: ModelParams) -> Dict[str, torch.Tensor]:
    params = params.to(torch.float64).requires_grad_()
    return {name: g.detach() for name, g in gradients(problem.loss(params).total, params).items()}
