import random

import pytest

from gcgsim.graph import Graph, pad_pair


def random_graph(rng: random.Random, n: int, n_labels: int = 3, p: float = 0.4, gid: str = "g") -> Graph:
    labels = tuple(rng.randrange(n_labels) for _ in range(n))
    edges = frozenset((u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p)
    return Graph(gid, labels, edges)


def oracle_suite(count: int = 200, max_n: int = 6, seed: int = 2024):
    """Seeded random pairs with at most ``max_n`` nodes per graph."""
    rng = random.Random(seed)
    pairs = []
    for i in range(count):
        g1 = random_graph(rng, rng.randint(1, max_n), rng.randint(1, 3), rng.uniform(0.1, 0.8), f"a{i}")
        g2 = random_graph(rng, rng.randint(1, max_n), rng.randint(1, 3), rng.uniform(0.1, 0.8), f"b{i}")
        pairs.append(pad_pair(g1, g2))
    return pairs


# Worked example, 0-based: G_i is the 4-cycle 0-1-2-3, G_j a 4-cycle 1-2-3-4 with pendant 0-4.
CYCLE_EDGES_I = frozenset({(0, 1), (1, 2), (2, 3), (0, 3)})
CYCLE_EDGES_J = frozenset({(0, 4), (3, 4), (2, 3), (1, 2), (1, 4)})
# v1->v1, v2->v5, v3->v4, v4->v3, padding->v2
DRAWN_MAPPING = (0, 4, 3, 2, 1)


@pytest.fixture
def cycle_pair():
    C, N, O = 0, 1, 2
    gi = Graph("Gi", (C, N, C, O), CYCLE_EDGES_I)
    gj = Graph("Gj", (C, C, C, C, N), CYCLE_EDGES_J)
    return pad_pair(gi, gj)


@pytest.fixture(scope="session")
def suite():
    return oracle_suite()
