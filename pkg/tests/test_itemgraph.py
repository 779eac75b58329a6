import io

import numpy as np
import pytest

from reference import brute_graph
from magnn.itemgraph import build_graph, export_triples, neighbors

A, B, C, D = 0, 1, 2, 3


def rows_of(graph):
    return {i: dict(neighbors(graph, i)) for i in range(graph.num_items + 1)}


def test_single_sequence():
    g = build_graph([np.array([A, B, C, D])], 4)
    r = rows_of(g)
    assert r[A] == {B: pytest.approx(1 / 3), C: pytest.approx(1 / 3), D: pytest.approx(1 / 3)}
    assert r[B] == {C: 0.5, D: 0.5}
    assert r[C] == {D: 1.0}
    assert r[D] == {}


def test_counts_sum_across_users():
    g = build_graph([np.array([A, B]), np.array([A, B])], 2)
    assert neighbors(g, A) == [(B, 1.0)]


def test_self_pairs_dropped():
    g = build_graph([np.array([A, A, B])], 2)
    assert neighbors(g, A) == [(B, 1.0)]


def test_padding_and_range():
    g = build_graph([np.array([A, B, C])], 3)
    assert neighbors(g, g.pad) == []
    with pytest.raises(IndexError):
        neighbors(g, 4)
    with pytest.raises(IndexError):
        neighbors(g, -1)


def test_symmetric_flag():
    g = build_graph([np.array([A, B])], 2, symmetric=True)
    assert neighbors(g, B) == [(A, 1.0)]


def test_equals_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n_items = int(rng.integers(1, 16))
        seqs = [rng.integers(n_items, size=rng.integers(0, 13)) for _ in range(rng.integers(1, 11))]
        g = build_graph(seqs, n_items)
        assert rows_of(g) == brute_graph(seqs, n_items)


def test_row_stochastic():
    rng = np.random.default_rng(1)
    seqs = [rng.integers(40, size=30) for _ in range(20)]
    sums = build_graph(seqs, 40).row_sums()
    nonzero = sums[sums > 0]
    assert np.all(np.abs(nonzero - 1.0) <= 1e-12)
    assert np.all((sums == 0) | (np.abs(sums - 1.0) <= 1e-12))


def test_built_from_train_only():
    train = [np.array([0, 1, 2, 3])]
    before = build_graph(train, 6)
    # extra interactions only matter if passed in; the builder sees what it is given
    after = build_graph(train, 6)
    assert rows_of(before) == rows_of(after)
    assert rows_of(build_graph(train + [np.array([4, 5])], 6)) != rows_of(before)


def test_export_sorted_triples():
    g = build_graph([np.array([C, A, B])], 3)
    buf = io.StringIO()
    export_triples(g, buf)
    lines = [tuple(line.split("\t")[:2]) for line in buf.getvalue().splitlines()]
    assert lines == sorted(lines, key=lambda t: (int(t[0]), int(t[1])))
    assert len(lines) == 3
