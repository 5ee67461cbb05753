import time

import pytest
import torch

from app.core.config import Variant
from app.services.gradcheck import (
    TOLERANCE,
    GradcheckConfig,
    build_problem,
    check_problem,
    gradient_dict,
    relative_error,
    run_gradcheck,
)
from app.services.model_core import ModelParams, init_params


def test_twenty_random_configurations():
    started = time.perf_counter()
    report = run_gradcheck(n_configs=20, seed=0)
    assert len(report.results) == 20
    assert report.checked > 0
    assert report.max_rel_error < TOLERANCE, [(r.seed, r.worst, r.max_rel_error) for r in report.results]
    assert time.perf_counter() - started < 60


@pytest.mark.parametrize("variant", [Variant.A, Variant.B, Variant.C, Variant.D])
def test_each_ablation_variant(variant):
    config = GradcheckConfig(variant=variant)
    for seed in (11, 12, 13):
        problem = build_problem(seed, config)
        params = init_params(problem.graph.n_users, problem.graph.n_items, config.H, seed, torch.float64)
        result = check_problem(problem, params)
        assert result.max_rel_error < TOLERANCE, (seed, result.worst)


def test_attention_gradient_vanishes_for_identical_branches():
    config = GradcheckConfig(K=0, dropout_rate=0.0)
    problem = build_problem(5, config)
    base = init_params(problem.graph.n_users, problem.graph.n_items, config.H, 5, torch.float64)
    params = ModelParams(
        Z0=base.Z0.abs(),
        V0=base.V0,
        W_mlp1=torch.eye(config.H, dtype=torch.float64),
        W_mlp2=torch.eye(config.H, dtype=torch.float64),
        W_att1=base.W_att1,
        W_att2=base.W_att2,
    )
    grads = gradient_dict(problem, params)
    assert float(grads["W_att2"].abs().max()) < 1e-12
    assert float(grads["Z0"].abs().max()) > 0.0


def test_relative_error_floor():
    assert relative_error(1e-9, 0.0) == pytest.approx(1e-9)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_unfloored_relative_error():
    assert relative_error(1e-9, 0.0, floor=0.0) == pytest.approx(1.0)
    assert relative_error(2e-6, 1e-6, floor=0.0) == pytest.approx(0.5)
    assert relative_error(0.0, 0.0, floor=0.0) == 0.0


def test_report_carries_unfloored_error():
    report = run_gradcheck(n_configs=2, seed=3)
    assert report.max_unfloored_rel_error >= report.max_rel_error
    assert all(r.max_unfloored_rel_error >= r.max_rel_error for r in report.results)
