"""Trainable parameters and the forward pass: light graph convolution on the
positive, negative and distorted graphs, the MLP branch and attention fusion."""

import math
import struct
from dataclasses import dataclass, fields, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import torch

from app.core.config import AttentionMode, Variant
from app.core.errors import CheckpointError, ConfigError, ShapeMismatchError
from app.core.seeding import Stream, derive_seed, stream_generator
from app.services.signed_graph import BipartiteView, DistortedGraph, SignedBipartiteGraph

CHECKPOINT_MAGIC = b"PANE"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<4sIIIII")

Adjacency = Union[BipartiteView, DistortedGraph, torch.Tensor]


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass
class ModelParams:
    """Theta_Emb = {Z0, V0} and Theta_NN = {W_mlp1, W_mlp2, W_att1, W_att2}"""

    Z0: torch.Tensor
    V0: torch.Tensor
    W_mlp1: torch.Tensor
    W_mlp2: torch.Tensor
    W_att1: torch.Tensor
    W_att2: torch.Tensor

    EMBEDDINGS = ("Z0", "V0")
    NETWORK = ("W_mlp1", "W_mlp2", "W_att1", "W_att2")

    def __post_init__(self):
        n, h = self.Z0.shape
        expected = {
            "Z0": (n, h),
            "V0": (n, h),
            "W_mlp1": (h, h),
            "W_mlp2": (h, h),
            "W_att1": (h, h),
            "W_att2": (h, 1),
        }
        for name, shape in expected.items():
            found = tuple(getattr(self, name).shape)
            if found != shape:
                raise ShapeMismatchError(name, shape, found)

    @property
    def n_nodes(self) -> int:
        return int(self.Z0.shape[0])

    @property
    def hidden(self) -> int:
        return int(self.Z0.shape[1])

    def named(self) -> Dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def __iter__(self) -> Iterator[torch.Tensor]:
        return iter(self.named().values())

    def map(self, fn) -> "ModelParams":
        return ModelParams(**{name: fn(tensor) for name, tensor in self.named().items()})

    def detached(self) -> "ModelParams":
        return self.map(lambda t: t.detach().clone())

    def to(self, dtype: torch.dtype) -> "ModelParams":
        return self.map(lambda t: t.detach().to(dtype))

    def requires_grad_(self, names=None) -> "ModelParams":
        for name, tensor in self.named().items():
            tensor.requires_grad_(names is None or name in names)
        return self

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self)


@dataclass
class DropoutMasks:
    """Inverted-dropout multipliers reused by the backward pass"""

    hidden: Optional[torch.Tensor] = None  # N x H, MLP hidden activation
    scores: Optional[torch.Tensor] = None  # N x 2, attention scores before softmax


@dataclass
class EmbeddingSet:
    Z: torch.Tensor
    Zp: torch.Tensor
    Zmlp: torch.Tensor
    V: torch.Tensor
    alpha: torch.Tensor
    Vtilde: Optional[torch.Tensor] = None
    masks: Optional[DropoutMasks] = None
    relu_inputs: Tuple[torch.Tensor, ...] = ()


@dataclass
class ModelGraphs:
    """Normalized adjacency matrices fed to the forward pass"""

    positive: torch.Tensor
    negative: torch.Tensor
    distorted: Optional[torch.Tensor] = None

    @classmethod
    def from_graphs(
        cls,
        graph: SignedBipartiteGraph,
        distorted: Optional[DistortedGraph] = None,
        dtype: torch.dtype = torch.float32,
        variant: Variant = Variant.FULL,
    ) -> "ModelGraphs":
        """Variant A passes nothing over G_p: its positive adjacency is empty"""
        if Variant(variant).uses_positive:
            positive = graph.positive.normalized_adjacency(dtype)
        else:
            n = graph.n_users + graph.n_items
            positive = torch.sparse_coo_tensor(
                torch.zeros((2, 0), dtype=torch.int64), torch.zeros(0, dtype=dtype), (n, n)
            ).coalesce()
        return cls(
            positive=positive,
            negative=graph.negative.normalized_adjacency(dtype),
            distorted=distorted.view.normalized_adjacency(dtype) if distorted is not None else None,
        )

    def with_distorted(self, distorted: DistortedGraph) -> "ModelGraphs":
        return replace(self, distorted=distorted.view.normalized_adjacency(self.positive.dtype))


def glorot_init(rows: int, cols: int, seed: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Uniform on [-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))]"""
    if rows < 1 or cols < 1:
        raise ConfigError(f"glorot_init needs positive dimensions, got {rows}x{cols}")
    bound = math.sqrt(6.0 / (rows + cols))
    rng = np.random.Generator(np.random.Philox(int(seed)))
    values = rng.uniform(-bound, bound, size=(rows, cols))
    return torch.from_numpy(values).to(dtype)


def init_params(n_users: int, n_items: int, hidden: int, seed: int, dtype: torch.dtype = torch.float32) -> ModelParams:
    n_nodes = n_users + n_items
    rng = stream_generator(seed, Stream.INIT)
    shapes = {
        "Z0": (n_nodes, hidden),
        "V0": (n_nodes, hidden),
        "W_mlp1": (hidden, hidden),
        "W_mlp2": (hidden, hidden),
        "W_att1": (hidden, hidden),
        "W_att2": (hidden, 1),
    }
    return ModelParams(**{name: glorot_init(r, c, derive_seed(rng), dtype) for name, (r, c) in shapes.items()})


def _adjacency(graph: Adjacency, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(graph, DistortedGraph):
        graph = graph.view
    if isinstance(graph, BipartiteView):
        return graph.normalized_adjacency(dtype)
    return graph


def propagate(graph: Adjacency, X0: torch.Tensor, K: int) -> Tuple[torch.Tensor, List[torch.Tensor]]:
    """Light graph convolution: X^(k+1) = D^-1/2 A D^-1/2 X^(k), averaged over k = 0..K"""
    if K < 0:
        raise ConfigError(f"propagation depth K must be >= 0, got {K}")
    adjacency = _adjacency(graph, X0.dtype)
    if adjacency.shape[0] != X0.shape[0]:
        raise ShapeMismatchError("propagation input", (adjacency.shape[0], X0.shape[1]), tuple(X0.shape))
    layers = [X0]
    current = X0
    for _ in range(K):
        current = torch.sparse.mm(adjacency, current)
        layers.append(current)
    return torch.stack(layers, dim=0).mean(dim=0), layers


def propagate_elementwise(view: BipartiteView, X0: np.ndarray, K: int) -> np.ndarray:
    """Per-node neighbor sums with 1/(sqrt|N(a)| sqrt|N(b)|) weights; reference implementation"""
    if K < 0:
        raise ConfigError(f"propagation depth K must be >= 0, got {K}")
    degrees = view.degrees()
    current = np.array(X0, dtype=np.float64)
    total = current.copy()
    for _ in range(K):
        following = np.zeros_like(current)
        for a in range(view.n_nodes):
            for b in view.neighbors(a):
                following[a] += current[b] / (math.sqrt(degrees[a]) * math.sqrt(degrees[b]))
        current = following
        total += current
    return total / (K + 1)


def mlp_transform(
    Z0: torch.Tensor,
    W_mlp1: torch.Tensor,
    W_mlp2: torch.Tensor,
    hidden_mask: Optional[torch.Tensor] = None,
    return_preactivations: bool = False,
):
    """Z'' = ReLU(ReLU(Z0 W1) W2), with an optional dropout mask on the hidden layer"""
    pre_hidden = Z0 @ W_mlp1
    hidden = torch.relu(pre_hidden)
    if hidden_mask is not None:
        hidden = hidden * hidden_mask
    pre_out = hidden @ W_mlp2
    out = torch.relu(pre_out)
    if return_preactivations:
        return out, (pre_hidden, pre_out)
    return out


def attention_fuse(
    Zp: torch.Tensor,
    Zmlp: torch.Tensor,
    W_att1: torch.Tensor,
    W_att2: torch.Tensor,
    score_mask: Optional[torch.Tensor] = None,
    mode: AttentionMode = AttentionMode.NODE,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Softmax over the two branch scores Tanh(X W_att1) W_att2, then a convex mix"""
    scores = torch.cat([torch.tanh(Zp @ W_att1) @ W_att2, torch.tanh(Zmlp @ W_att1) @ W_att2], dim=1)
    if score_mask is not None:
        scores = scores * score_mask
    if mode is AttentionMode.GLOBAL:
        scores = scores.mean(dim=0, keepdim=True).expand_as(scores)
    alpha = torch.softmax(scores, dim=1)
    Z = alpha[:, 0:1] * Zp + alpha[:, 1:2] * Zmlp
    return Z, alpha


def draw_dropout_masks(
    n_nodes: int,
    hidden: int,
    rate: float,
    generator: torch.Generator,
    dtype: torch.dtype = torch.float32,
) -> DropoutMasks:
    if rate <= 0.0:
        return DropoutMasks()
    keep = 1.0 - rate

    def draw(shape):
        mask = torch.rand(shape, generator=generator, dtype=torch.float64) < keep
        return mask.to(dtype) / keep

    return DropoutMasks(hidden=draw((n_nodes, hidden)), scores=draw((n_nodes, 2)))


def forward(
    params: ModelParams,
    graphs: ModelGraphs,
    K: int,
    mode: Mode = Mode.EVAL,
    masks: Optional[DropoutMasks] = None,
    generator: Optional[torch.Generator] = None,
    dropout_rate: float = 0.5,
    attention_mode: AttentionMode = AttentionMode.NODE,
) -> EmbeddingSet:
    """Compose Z', Z'', the fused Z, V and (train mode only) V~"""
    mode = Mode(mode)
    if mode is Mode.TRAIN and masks is None and dropout_rate > 0.0:
        masks = draw_dropout_masks(
            params.n_nodes, params.hidden, dropout_rate, generator or torch.Generator(), params.Z0.dtype
        )
    if mode is Mode.EVAL:
        masks = None
    active = masks or DropoutMasks()

    Zp, _ = propagate(graphs.positive, params.Z0, K)
    Zmlp, relu_inputs = mlp_transform(
        params.Z0, params.W_mlp1, params.W_mlp2, hidden_mask=active.hidden, return_preactivations=True
    )
    Z, alpha = attention_fuse(Zp, Zmlp, params.W_att1, params.W_att2, score_mask=active.scores, mode=attention_mode)
    V, _ = propagate(graphs.negative, params.V0, K)
    Vtilde = None
    if mode is Mode.TRAIN and graphs.distorted is not None:
        Vtilde, _ = propagate(graphs.distorted, params.V0, K)
    return EmbeddingSet(Z=Z, Zp=Zp, Zmlp=Zmlp, V=V, alpha=alpha, Vtilde=Vtilde, masks=masks, relu_inputs=relu_inputs)


@dataclass
class Checkpoint:
    params: ModelParams
    n_users: int
    n_items: int


def save_checkpoint(path: Union[str, Path], params: ModelParams, n_users: int, n_items: int) -> Path:
    path = Path(path)
    if n_users + n_items != params.n_nodes:
        raise ShapeMismatchError("checkpoint node count", (n_users + n_items,), (params.n_nodes,))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as out:
        out.write(
            _CHECKPOINT_HEADER.pack(
                CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.n_nodes, params.hidden, n_users, n_items
            )
        )
        for tensor in params:
            out.write(tensor.detach().cpu().numpy().astype("<f4", order="C").tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    payload = path.read_bytes()
    if len(payload) < _CHECKPOINT_HEADER.size:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, version, n_nodes, hidden, n_users, n_items = _CHECKPOINT_HEADER.unpack_from(payload)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if n_users + n_items != n_nodes:
        raise ShapeMismatchError(f"{path}: header node count", (n_users + n_items,), (n_nodes,))
    shapes = [
        ("Z0", (n_nodes, hidden)),
        ("V0", (n_nodes, hidden)),
        ("W_mlp1", (hidden, hidden)),
        ("W_mlp2", (hidden, hidden)),
        ("W_att1", (hidden, hidden)),
        ("W_att2", (hidden, 1)),
    ]
    expected_size = _CHECKPOINT_HEADER.size + 4 * sum(r * c for _, (r, c) in shapes)
    if len(payload) != expected_size:
        raise CheckpointError(f"{path}: expected {expected_size} bytes, found {len(payload)}")
    tensors = {}
    offset = _CHECKPOINT_HEADER.size
    for name, (rows, cols) in shapes:
        count = rows * cols
        array = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(rows, cols)
        tensors[name] = torch.from_numpy(array.astype(np.float32))
        offset += 4 * count
    return Checkpoint(params=ModelParams(**tensors), n_users=n_users, n_items=n_items)
