import math
import random
from fractions import Fraction

import mpmath
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcgsim.graph import (
    NULL_LABEL,
    Alignment,
    Graph,
    InvalidAlignmentError,
    InvalidGraphError,
    LabelVocab,
    cost_from_partition,
    extract_partition,
    ged_under_mapping,
    graph_from_json,
    graph_to_json,
    pad_pair,
    sim_from_ged,
)

from conftest import DRAWN_MAPPING, random_graph


def path3():
    return Graph("p", (0, 0, 0), frozenset({(0, 1), (1, 2)}))


def test_graph_validation():
    with pytest.raises(InvalidGraphError):
        Graph("x", (), frozenset())
    with pytest.raises(InvalidGraphError):
        Graph("x", (0, 0), frozenset({(1, 1)}))
    with pytest.raises(InvalidGraphError):
        Graph("x", (0, 0), frozenset({(0, 2)}))
    g = Graph("x", (0, 1), frozenset({(1, 0)}))
    assert g.edges == frozenset({(0, 1)})


def test_json_roundtrip():
    vocab = LabelVocab()
    obj = {"id": "m", "labels": ["C", "N", "C"], "edges": [[0, 1], [1, 2]]}
    g = graph_from_json(obj, vocab)
    assert g.labels == (0, 1, 0)
    assert graph_to_json(g, vocab) == obj


def test_pad_equal_sizes():
    p = pad_pair(path3(), path3())
    assert p.pad_size == 3
    assert NULL_LABEL not in p.labels1 + p.labels2


def test_pad_cycle_shapes(cycle_pair):
    assert cycle_pair.pad_size == 5
    assert cycle_pair.labels1[4] == NULL_LABEL
    assert cycle_pair.adj1[4] == 0
    assert cycle_pair.labels2 == cycle_pair.g2.labels


def test_pad_single_nodes():
    assert pad_pair(Graph("a", (0,)), Graph("b", (1,))).pad_size == 1


def test_identity_mapping_costs_nothing():
    g = path3()
    assert ged_under_mapping(pad_pair(g, g), (0, 1, 2)).total == 0


def test_single_relabel():
    c = ged_under_mapping(pad_pair(Graph("a", (0,)), Graph("b", (1,))), (0,))
    assert (c.node_cost, c.edge_cost) == (1, 0)


def test_invalid_mapping_rejected():
    p = pad_pair(path3(), path3())
    with pytest.raises(InvalidAlignmentError):
        ged_under_mapping(p, (0, 0, 1))
    with pytest.raises(InvalidAlignmentError):
        extract_partition(p, (0, 1))


def test_drawn_mapping_cost(cycle_pair):
    # relabel v4, insert v2; delete e(1,4), insert e(2,3) and e(2,5)
    c = ged_under_mapping(cycle_pair, DRAWN_MAPPING)
    assert (c.node_cost, c.edge_cost) == (2, 3)


def test_drawn_mapping_partition(cycle_pair):
    part = extract_partition(cycle_pair, DRAWN_MAPPING)
    assert part.g1.aligned_nodes == {0, 1, 2}
    assert part.g1.aligned_edges == {(0, 1), (1, 2), (2, 3)}
    assert part.g1.unaligned_nodes == {3}
    assert part.g1.unaligned_edges == {(0, 3)}
    assert part.g2.aligned_nodes == {0, 3, 4}
    assert part.g2.aligned_edges == {(0, 4), (3, 4), (2, 3)}
    assert part.g2.unaligned_nodes == {1, 2}
    assert part.g2.unaligned_edges == {(1, 2), (1, 4)}


def test_identical_partition_has_no_unaligned():
    g = path3()
    part = extract_partition(pad_pair(g, g), (0, 1, 2))
    assert not part.g1.unaligned_nodes and not part.g1.unaligned_edges
    assert not part.g2.unaligned_nodes and not part.g2.unaligned_edges


def test_single_nodes_different_labels_unaligned():
    part = extract_partition(pad_pair(Graph("a", (0,)), Graph("b", (1,))), (0,))
    assert part.g1.unaligned_nodes == {0} and part.g2.unaligned_nodes == {0}


def test_sim_examples():
    assert sim_from_ged(0, 4, 4) == 1.0
    assert sim_from_ged(4, 4, 5) == pytest.approx(0.41111, abs=5e-6)
    assert sim_from_ged(4, 4, 5) == pytest.approx(float(mpmath.exp(mpmath.mpf(-8) / 9)), abs=1e-15)
    assert sim_from_ged(9, 9, 9) == pytest.approx(0.36788, abs=5e-6)
    with pytest.raises(ValueError):
        sim_from_ged(-1, 2, 2)


@given(st.integers(0, 60), st.integers(1, 40), st.integers(1, 40))
def test_sim_strictly_decreasing(ged, n1, n2):
    s0, s1 = sim_from_ged(ged, n1, n2), sim_from_ged(ged + 1, n1, n2)
    assert s1 < s0 <= 1.0
    assert (s0 == 1.0) == (ged == 0)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10_000))
def test_partition_cost_matches_mapping_cost(seed):
    rng = random.Random(seed)
    g1 = random_graph(rng, rng.randint(1, 7))
    g2 = random_graph(rng, rng.randint(1, 7))
    pair = pad_pair(g1, g2)
    perm = list(range(pair.pad_size))
    rng.shuffle(perm)
    part = extract_partition(pair, perm)
    assert cost_from_partition(pair, part) == ged_under_mapping(pair, perm)
    assert part.g1.aligned_nodes | part.g1.unaligned_nodes == set(range(g1.n))
    assert not part.g1.aligned_nodes & part.g1.unaligned_nodes
    assert part.g2.aligned_edges | part.g2.unaligned_edges == g2.edges


def test_alignment_inverse():
    a = Alignment((2, 0, 1))
    assert a.inverse() == (1, 2, 0)
