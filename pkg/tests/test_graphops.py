import itertools

import networkx as nx
import numpy as np
import pytest

from rcmlab import graphops
from rcmlab.graphops import (GraphError, clusters, component, connected, disjoint_path_count, doubly_connected,
                             graph_from_edges, pivotal_vertices, separator_table)


def _nx(n, edges):
    g = nx.Graph()
    g.add_nodes_from(range(n))
    g.add_edges_from(edges)
    return g


def test_clusters_match_networkx():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 30))
        pairs = list(itertools.combinations(range(n), 2))
        edges = [p for p in pairs if rng.random() < 0.08]
        part = clusters(graph_from_edges(n, edges))
        ref = sorted(len(c) for c in nx.connected_components(_nx(n, edges)))
        roots = np.unique(part.parent)
        assert sorted(int(part.size[r]) for r in roots) == ref
        assert part.count == len(ref)


def test_component_and_connected():
    g = graph_from_edges(6, [(0, 1), (1, 2), (3, 4)])
    assert sorted(component(g, 0).tolist()) == [0, 1, 2]
    assert connected(g, 0, 2) and not connected(g, 0, 3)
    alive = np.array([True, False, True, True, True, True])
    assert sorted(component(g, 0, alive).tolist()) == [0]


def test_cycle_is_doubly_connected_path_is_not():
    cycle = graph_from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
    assert doubly_connected(cycle, 0, 2)
    path = graph_from_edges(3, [(0, 1), (1, 2)])
    assert not doubly_connected(path, 0, 2)
    assert pivotal_vertices(path, 0, 2) == [1]
    assert doubly_connected(path, 0, 1)


def test_double_connection_against_oracles():
    rng = np.random.default_rng(1)
    for n in range(2, 7):
        pairs = list(itertools.combinations(range(n), 2))
        for _ in range(60):
            edges = [p for p in pairs if rng.random() < 0.45]
            g = graph_from_edges(n, edges)
            ng = _nx(n, edges)
            for s, t in pairs:
                direct = ng.has_edge(s, t)
                if direct:
                    expect = True
                elif nx.has_path(ng, s, t):
                    expect = len(list(nx.node_disjoint_paths(ng, s, t))) >= 2
                else:
                    expect = False
                assert doubly_connected(g, s, t) == expect
                assert (direct or disjoint_path_count(n, edges, s, t) >= 2) == expect


def test_pivotal_vertices_against_networkx_cut_vertices():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = 7
        edges = [p for p in itertools.combinations(range(n), 2) if rng.random() < 0.35]
        g, ng = graph_from_edges(n, edges), _nx(n, edges)
        if not nx.has_path(ng, 0, n - 1):
            with pytest.raises(GraphError):
                pivotal_vertices(g, 0, n - 1)
            continue
        expect = [v for v in range(1, n - 1) if not nx.has_path(ng.subgraph(set(range(n)) - {v}), 0, n - 1)]
        assert pivotal_vertices(g, 0, n - 1) == expect


def test_separator_table_rows_are_pivotal_sets():
    rng = np.random.default_rng(3)
    for _ in range(40):
        n = 12
        edges = [p for p in itertools.combinations(range(n), 2) if rng.random() < 0.2]
        g = graph_from_edges(n, edges)
        members, words = separator_table(g, 0)
        assert members[0] == 0
        for p, v in enumerate(members[1:], start=1):
            bits = [members[b] for b in range(len(members)) if int(words[p, b // 64]) >> (b % 64) & 1]
            assert sorted(bits) == pivotal_vertices(g, 0, int(v))


def test_errors():
    g = graph_from_edges(3, [(0, 1)])
    with pytest.raises(GraphError):
        doubly_connected(g, 1, 1)
    with pytest.raises(GraphError):
        connected(g, 0, 5)
    with pytest.raises(GraphError):
        disjoint_path_count(3, [(0, 1)], 2, 2)
    assert graphops.disjoint_path_count(3, [], 0, 2) == 0
