from typing import Tuple

import numpy as np
import pytest

from app.core.logging import configure_logging
from app.models.records import EdgeSet
from app.services.signed_graph import build


def pytest_addoption(parser):
    parser.addoption(
        "--ml1m",
        action="store",
        default=None,
        metavar="PATH",
        help="ML-1M ratings.dat for the full-scale reproduction run",
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training runs that take minutes")
    config.addinivalue_line("markers", "extended: multi-hour reproduction runs; need --ml1m")
    configure_logging("WARNING")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--ml1m"):
        return
    skip = pytest.mark.skip(reason="pass --ml1m PATH to run")
    for item in items:
        if "extended" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def ml1m_path(request):
    return request.config.getoption("--ml1m")


@pytest.fixture
def small_edges() -> EdgeSet:
    """3 users, 4 items, both signs"""
    return EdgeSet.from_tuples(
        [
            (0, 0, 1),
            (0, 1, 1),
            (0, 2, -1),
            (1, 1, 1),
            (1, 3, -1),
            (2, 2, 1),
            (2, 0, -1),
            (2, 3, -1),
        ]
    )


@pytest.fixture
def small_graph(small_edges):
    return build(small_edges, 3, 4)


def random_bipartite(rng: np.random.Generator, max_nodes: int = 50, density: float = 0.2) -> Tuple[EdgeSet, int, int]:
    """Random positive edge set over at most `max_nodes` nodes"""
    n_users = int(rng.integers(1, max_nodes // 2 + 1))
    n_items = int(rng.integers(1, max_nodes - n_users + 1))
    mask = rng.random((n_users, n_items)) < density
    users, items = np.nonzero(mask)
    return EdgeSet(users, items, np.ones(len(users))), n_users, n_items
