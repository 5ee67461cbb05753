import math

import numpy as np
import pytest
import torch

from app.core.config import HyperParams, Variant
from app.core.errors import NonFiniteLossError
from app.models.records import EdgeSet
from app.services import trainer
from app.services.model_core import init_params
from app.services.objectives import total_loss
from app.services.signed_graph import build
from app.services.synthetic import block_dataset
from app.services.trainer import LOG_HEADER, train, write_training_log


@pytest.fixture(scope="module")
def dataset():
    return block_dataset(n_users=20, n_items=40, seed=1)


@pytest.fixture(scope="module")
def graph(dataset):
    return build(dataset.train, dataset.n_users, dataset.n_items)


def tiny_hp(**overrides):
    values = dict(H=8, K=2, epochs=3, batch_size=64, neg_samples_per_edge=2, seed=5)
    values.update(overrides)
    return HyperParams(**values)


def losses(result):
    return [(row.total, row.db, row.cl, row.reg) for row in result.log]


def test_same_seed_same_log(graph):
    assert losses(train(graph, tiny_hp())) == losses(train(graph, tiny_hp()))


def test_different_seed_different_log(graph):
    assert losses(train(graph, tiny_hp())) != losses(train(graph, tiny_hp(seed=6)))


def test_log_has_every_component(graph):
    result = train(graph, tiny_hp())
    assert len(result.log) == 3
    assert all(row.cl > 0 and row.reg > 0 and row.db > 0 for row in result.log)
    assert all(math.isfinite(row.total) for row in result.log)


def test_variant_b_never_touches_v0(graph):
    hp = tiny_hp()
    result = train(graph, hp, variant=Variant.B)
    initial = init_params(graph.n_users, graph.n_items, hp.H, hp.seed)
    assert torch.equal(result.params.V0, initial.V0)
    assert not torch.equal(result.params.Z0, initial.Z0)
    assert all(row.cl == 0.0 for row in result.log)


def test_variant_a_only_trains_v0(graph):
    hp = tiny_hp()
    result = train(graph, hp, variant=Variant.A)
    initial = init_params(graph.n_users, graph.n_items, hp.H, hp.seed)
    assert torch.equal(result.params.Z0, initial.Z0)
    assert torch.equal(result.params.W_mlp1, initial.W_mlp1)
    assert not torch.equal(result.params.V0, initial.V0)


def test_positives_only_dataset():
    graph = build(EdgeSet.from_tuples([(u, (u + k) % 6, 1) for u in range(4) for k in range(2)]), 4, 6)
    result = train(graph, tiny_hp(), variant=Variant.B)
    assert len(result.log) == 3


def test_zero_epochs_returns_initialization(graph):
    hp = tiny_hp(epochs=0)
    result = train(graph, hp)
    assert result.log == []
    assert torch.equal(result.params.Z0, init_params(graph.n_users, graph.n_items, hp.H, hp.seed).Z0)


def test_step_per_epoch_schedule(graph):
    hp = tiny_hp(step_per_epoch=True)
    result = train(graph, hp)
    initial = init_params(graph.n_users, graph.n_items, hp.H, hp.seed)
    assert not torch.equal(result.params.Z0, initial.Z0)
    assert len(result.log) == 3


def test_distortion_per_epoch_changes_contrastive_term(graph):
    fixed = train(graph, tiny_hp(epochs=2))
    redrawn = train(graph, tiny_hp(epochs=2, distort_per_epoch=True))
    assert fixed.log[0].cl == redrawn.log[0].cl
    assert fixed.log[1].cl != redrawn.log[1].cl


def test_checkpoint_cadence(tmp_path, graph):
    train(graph, tiny_hp(epochs=4), output_dir=tmp_path, checkpoint_every=2)
    assert sorted(p.name for p in tmp_path.glob("checkpoint_epoch*.bin")) == [
        "checkpoint_epoch2.bin",
        "checkpoint_epoch4.bin",
    ]


def test_early_stopping(graph, dataset):
    hp = tiny_hp(epochs=30, early_stopping=True, patience=2, lr=0.0)
    result = train(graph, hp, validation=dataset.test)
    # nothing changes with lr=0, so the first evaluation stays best
    assert result.stopped_early
    assert result.best_epoch == 1
    assert len(result.log) == 3


def test_non_finite_loss_aborts_with_dump(tmp_path, graph, monkeypatch):
    def poisoned(*args, **kwargs):
        parts = total_loss(*args, **kwargs)
        parts.db = parts.db * float("nan")
        parts.total = parts.total * float("nan")
        return parts

    monkeypatch.setattr(trainer, "total_loss", poisoned)
    with pytest.raises(NonFiniteLossError) as excinfo:
        train(graph, tiny_hp(), output_dir=tmp_path)
    dump = excinfo.value.dump_path
    assert dump is not None and dump.exists()
    with np.load(dump) as arrays:
        assert "positive_users" in arrays.files


def test_training_log_file(tmp_path, graph):
    result = train(graph, tiny_hp(epochs=2))
    path = write_training_log(tmp_path / "train_log.tsv", result.log)
    lines = path.read_text().splitlines()
    assert lines[0].split("\t") == list(LOG_HEADER)
    assert len(lines) == 3
    assert lines[1].split("\t")[0] == "1"
