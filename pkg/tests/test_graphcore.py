import itertools
from collections import Counter

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from graphgen.graphcore import (AddEdge, AddNode, Graph, GrammarError, GraphBuilder,
                                Ordering, OrderingError, PickNode, StopEdges, StopNodes,
                                canonical_ordering, count_orderings, decisions_from_graph,
                                enumerate_orderings, gen_synthetic, graph_from_json,
                                graph_to_json, random_tree, read_jsonl, replay,
                                uniform_random_ordering, write_jsonl)
from graphgen.metrics import is_cycle, is_tree

TRIANGLE = Graph.untyped(3, [(0, 1), (0, 2), (1, 2)])


def to_nx(g):
    G = nx.Graph()
    G.add_nodes_from(range(g.num_nodes))
    G.add_edges_from((u, v) for u, v, _ in g.edges)
    return G


@st.composite
def graphs(draw, max_nodes=8):
    n = draw(st.integers(1, max_nodes))
    pairs = list(itertools.combinations(range(n), 2))
    mask = draw(st.lists(st.booleans(), min_size=len(pairs), max_size=len(pairs)))
    return Graph.untyped(n, [p for p, keep in zip(pairs, mask) if keep])


class TestGraph:
    def test_canonical_edges(self):
        g = Graph.untyped(3, [(2, 0), (1, 2)])
        assert g.edges == ((0, 2, 0), (1, 2, 0))

    @pytest.mark.parametrize("edges", [[(0, 0)], [(0, 1), (1, 0)], [(0, 3)]])
    def test_rejects_bad_edges(self, edges):
        with pytest.raises(ValueError):
            Graph.untyped(3, edges)


class TestDecisions:
    def test_triangle_sequence_one(self):
        seq = decisions_from_graph(TRIANGLE)
        assert seq == [AddNode(0), StopEdges(),
                       AddNode(0), AddEdge(), PickNode(0), StopEdges(),
                       AddNode(0), AddEdge(), PickNode(0), AddEdge(), PickNode(1), StopEdges(),
                       StopNodes()]
        assert len(seq) == 13

    def test_triangle_sequence_two(self):
        # generation order (1, 0, 2): node 1 first, then node 0, then node 2
        seq = decisions_from_graph(TRIANGLE, Ordering((1, 0, 2)))
        picks = [d for d in seq if isinstance(d, PickNode)]
        assert picks == [PickNode(0), PickNode(0), PickNode(1)]
        assert nx.is_isomorphic(to_nx(replay(seq)), to_nx(TRIANGLE))

    def test_single_node(self):
        assert decisions_from_graph(Graph.untyped(1)) == [AddNode(0), StopEdges(), StopNodes()]

    def test_replay_single_node(self):
        assert replay([AddNode(0), StopEdges(), StopNodes()]) == Graph.untyped(1)

    def test_invalid_ordering(self):
        with pytest.raises(OrderingError):
            decisions_from_graph(TRIANGLE, Ordering((0, 0, 1)))

    def test_edge_order_override(self):
        seq = decisions_from_graph(TRIANGLE, Ordering((0, 1, 2), ((), (0,), (1, 0))))
        assert seq[7:11] == [AddEdge(), PickNode(1), AddEdge(), PickNode(0)]


class TestBuilder:
    def test_add_node(self):
        b = GraphBuilder().apply(AddNode(0))
        assert b.num_nodes == 1 and b.phase == "edge"

    def test_pick_adds_edge(self):
        b = GraphBuilder()
        for d in [AddNode(0), StopEdges(), AddNode(0), AddEdge(), PickNode(0, 0)]:
            b.apply(d)
        assert b.graph().edges == ((0, 1, 0),)

    def test_stop_nodes_in_edge_loop(self):
        b = GraphBuilder().apply(AddNode(0))
        with pytest.raises(GrammarError):
            b.apply(StopNodes())

    def test_pick_outside_edge_loop(self):
        b = GraphBuilder().apply(AddNode(0)).apply(StopEdges())
        with pytest.raises(GrammarError):
            b.apply(PickNode(0))

    def test_self_loop_rejected(self):
        b = GraphBuilder().apply(AddNode(0)).apply(AddEdge())
        with pytest.raises(GrammarError):
            b.apply(PickNode(0))

    def test_duplicates_counted_when_allowed(self):
        b = GraphBuilder(allow_duplicates=True)
        for d in [AddNode(0), StopEdges(), AddNode(0), AddEdge(), PickNode(0), AddEdge(),
                  PickNode(0)]:
            b.apply(d)
        assert b.duplicate_picks == 1 and b.graph().num_edges == 1
        with pytest.raises(GrammarError):
            strict = GraphBuilder()
            for d in [AddNode(0), StopEdges(), AddNode(0), AddEdge(), PickNode(0), AddEdge(),
                      PickNode(0)]:
                strict.apply(d)

    def test_replay_requires_stop(self):
        with pytest.raises(GrammarError):
            replay([AddNode(0), StopEdges()])


@settings(max_examples=60, deadline=None)
@given(graphs(), st.integers(0, 2**32 - 1))
def test_round_trip_isomorphic(g, seed):
    ord_ = uniform_random_ordering(g, np.random.default_rng(seed))
    seq = decisions_from_graph(g, ord_)
    back = replay(seq)
    # node t of the replayed graph is original node ord_.nodes[t]
    assert back.relabel(ord_.nodes) == g
    assert sum(isinstance(d, AddNode) for d in seq) == g.num_nodes
    assert sum(isinstance(d, StopEdges) for d in seq) == g.num_nodes
    assert sum(isinstance(d, StopNodes) for d in seq) == 1


def test_round_trip_exhaustive_four_nodes():
    pairs = list(itertools.combinations(range(4), 2))
    for mask in itertools.product([0, 1], repeat=len(pairs)):
        g = Graph.untyped(4, [p for p, k in zip(pairs, mask) if k])
        for perm in itertools.permutations(range(4)):
            back = replay(decisions_from_graph(g, Ordering(perm)))
            assert nx.is_isomorphic(to_nx(back), to_nx(g))


class TestOrderings:
    def test_single_node_identity(self):
        assert uniform_random_ordering(Graph.untyped(1), np.random.default_rng(0)).nodes == (0,)

    def test_uniform_over_permutations(self):
        rng = np.random.default_rng(11)
        counts = Counter(uniform_random_ordering(TRIANGLE, rng).nodes for _ in range(10000))
        assert len(counts) == 6
        for c in counts.values():
            assert abs(c / 10000 - 1 / 6) < 0.02
        assert chisquare(list(counts.values())).pvalue > 1e-3

    def test_fixed_seed(self):
        g = gen_synthetic("tree", np.random.default_rng(0), n=12)
        a = uniform_random_ordering(g, np.random.default_rng(5))
        b = uniform_random_ordering(g, np.random.default_rng(5))
        assert a == b

    def test_enumeration_count_path(self):
        path = Graph.untyped(3, [(0, 1), (1, 2)])
        # orders ending in the centre give two edge orders each
        assert count_orderings(path) == 8
        assert len(list(enumerate_orderings(path))) == 8

    @settings(max_examples=30, deadline=None)
    @given(graphs(max_nodes=5))
    def test_enumeration_distinct(self, g):
        # automorphisms can repeat a decision sequence; the orderings themselves never repeat
        orders = list(enumerate_orderings(g))
        assert len(orders) == len(set(orders)) == count_orderings(g)
        for o in orders:
            assert replay(decisions_from_graph(g, o)).relabel(o.nodes) == g

    def test_canonical_cycle_is_walk(self):
        g = Graph.untyped(5, [(0, 3), (3, 1), (1, 4), (4, 2), (2, 0)])
        order = canonical_ordering(g, "cycle").nodes
        for a, b in zip(order, order[1:]):
            assert g.edge_type(a, b) is not None

    def test_canonical_tree_is_bfs(self):
        g = Graph.untyped(5, [(0, 4), (4, 1), (0, 2), (2, 3)])
        assert canonical_ordering(g, "tree").nodes == (0, 2, 4, 3, 1)


class TestSynthetic:
    def test_cycle(self):
        g = gen_synthetic("cycle", np.random.default_rng(0), n=10)
        assert g.num_nodes == 10 and g.num_edges == 10 and is_cycle(g)

    def test_tree(self):
        g = gen_synthetic("tree", np.random.default_rng(0), n=15)
        assert g.num_edges == 14 and is_tree(g)
        assert nx.is_tree(to_nx(g))

    @pytest.mark.parametrize("seed", range(5))
    def test_ba_edge_count(self, seed):
        g = gen_synthetic("ba", np.random.default_rng(seed))
        assert g.num_nodes == 15 and g.num_edges == 26
        assert nx.is_connected(to_nx(g))

    def test_default_size_range(self):
        rng = np.random.default_rng(3)
        sizes = {gen_synthetic("cycle", rng).num_nodes for _ in range(300)}
        assert sizes == set(range(10, 21))

    @pytest.mark.parametrize("family,n", [("cycle", 2), ("tree", 0)])
    def test_too_small(self, family, n):
        with pytest.raises(ValueError):
            gen_synthetic(family, np.random.default_rng(0), n=n)

    def test_rank_family(self):
        rng = np.random.default_rng(0)
        for rank in (0, 1, 3):
            g = gen_synthetic("rank", rng, n=8, rank=rank)
            assert g.num_edges - g.num_nodes + 1 == rank
            assert nx.is_connected(to_nx(g))

    def test_prufer_uniform(self):
        # 4^(4-2) = 16 labelled trees on four nodes
        rng = np.random.default_rng(1)
        counts = Counter(random_tree(4, rng).edges for _ in range(16000))
        assert len(counts) == 16
        assert chisquare(list(counts.values())).pvalue > 1e-3


class TestJsonl:
    def test_format(self):
        g = Graph((0, 1), ((0, 1, 2),))
        assert graph_to_json(g) == '{"node_types":[0,1],"edges":[[0,1,2]]}'
        assert graph_from_json(graph_to_json(g)) == g

    def test_file_round_trip_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        gs = [gen_synthetic("tree", rng) for _ in range(20)]
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_jsonl(gs, a)
        write_jsonl(read_jsonl(a), b)
        assert a.read_bytes() == b.read_bytes()
        assert read_jsonl(a) == gs
