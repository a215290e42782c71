import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphgen import tensor as tn
from graphgen.graphcore import Graph
from graphgen.heads import (GraphModel, ModelConfig, empty_state, f_addedge, f_addnode,
                            f_init, f_nodes)
from graphgen.propnet import GraphState, init_propagation_params, propagate, readout
from graphgen.tensor import ShapeError, Tensor

H = 4


def random_graph(rng, n, p=0.4):
    pairs = [e for e in itertools.combinations(range(n), 2) if rng.random() < p]
    return Graph.untyped(n, pairs)


def prop_params(seed=0, rounds=2, untie=False, scale=1.0):
    rng = np.random.default_rng(seed)
    raw = init_propagation_params(rng, "p", H, H, rounds, untie)
    raw = {k: v * scale + (rng.normal(size=v.shape) * 0.1 if k.endswith("b") or ".b" in k else 0)
           for k, v in raw.items()}
    raw["embed.edge"] = rng.uniform(-1, 1, size=(2, H))
    raw["r.fm.W"] = rng.normal(size=(H, 2 * H))
    raw["r.fm.b"] = rng.normal(size=2 * H)
    raw["r.gm.W"] = rng.normal(size=(H, 2 * H))
    raw["r.gm.b"] = rng.normal(size=2 * H)
    return {k: Tensor(v, requires_grad=True) for k, v in raw.items()}


class TestPropagation:
    def test_zero_gru_halves_states_on_edgeless_graph(self):
        P = {k: Tensor(np.zeros_like(v.data)) for k, v in prop_params().items()}
        g = Graph.untyped(3)
        h = np.random.default_rng(0).normal(size=(3, H))
        out = GraphState(g, Tensor(h)).propagate_round(P, "p", 0)
        np.testing.assert_allclose(out.h.data, 0.5 * h, rtol=0, atol=1e-15)

    def test_zero_message_weights_give_zero_messages(self):
        P = prop_params()
        for k in list(P):
            if ".msg." in k:
                P[k] = Tensor(np.zeros_like(P[k].data))
        g = Graph.untyped(3, [(0, 1), (1, 2)])
        h = Tensor(np.random.default_rng(1).normal(size=(3, H)))
        with_edges = GraphState(g, h).propagate_round(P, "p", 0).h.data
        without = GraphState(Graph.untyped(3), h).propagate_round(P, "p", 0).h.data
        np.testing.assert_allclose(with_edges, without, rtol=0, atol=1e-15)

    def test_zero_rounds_is_identity(self):
        P = prop_params()
        h = Tensor(np.ones((2, H)))
        out = propagate(h, np.array([0]), np.array([1]), Tensor(np.zeros((1, H))), P, "p", 0)
        assert out is h

    def test_two_rounds_compose(self):
        P = prop_params()
        g = Graph.untyped(4, [(0, 1), (1, 2), (2, 3)])
        s = GraphState(g, Tensor(np.random.default_rng(2).normal(size=(4, H))))
        twice = s.propagate_round(P, "p", 0).propagate_round(P, "p", 1).h.data
        np.testing.assert_array_equal(s.propagate(P, "p", 2).h.data, twice)

    def test_width_mismatch(self):
        P = prop_params()
        s = GraphState(Graph.untyped(2, [(0, 1)]), Tensor(np.zeros((2, H + 1))))
        with pytest.raises(ShapeError):
            s.propagate_round(P, "p", 0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 2**32 - 1))
    def test_equivariance(self, n, seed):
        # untied reverse weights follow edge direction, so only the tied form is equivariant
        untie = False
        rng = np.random.default_rng(seed)
        P = prop_params(seed % 7, untie=untie)
        g = random_graph(rng, n)
        h = rng.normal(size=(n, H))
        perm = rng.permutation(n)  # new id of old node i is perm[i]
        g2 = g.relabel(perm)
        h2 = np.empty_like(h)
        h2[perm] = h
        out = GraphState(g, Tensor(h)).propagate(P, "p", 2, untie).h.data
        out2 = GraphState(g2, Tensor(h2)).propagate(P, "p", 2, untie).h.data
        np.testing.assert_allclose(out2[perm], out, rtol=1e-10, atol=1e-12)
        r1 = GraphState(g, Tensor(out)).readout(P, "r").data
        r2 = GraphState(g2, Tensor(out2)).readout(P, "r").data
        np.testing.assert_allclose(r1, r2, rtol=1e-10, atol=1e-12)

    def test_empty_readout_is_zero(self):
        P = prop_params()
        out = readout(Tensor(np.zeros((0, H))), np.zeros(0, dtype=int), 1, P, "r")
        np.testing.assert_array_equal(out.data, np.zeros((1, 2 * H)))

    def test_gated_readout_half(self):
        P = {"r.fm.W": Tensor(np.eye(H, 2 * H)), "r.fm.b": Tensor(np.zeros(2 * H)),
             "r.gm.W": Tensor(np.zeros((H, 2 * H))), "r.gm.b": Tensor(np.zeros(2 * H))}
        h = np.random.default_rng(3).normal(size=(3, H))
        out = readout(Tensor(h), np.zeros(3, dtype=int), 1, P, "r").data[0]
        np.testing.assert_allclose(out[:H], 0.5 * h.sum(axis=0), rtol=1e-14)
        np.testing.assert_array_equal(out[H:], 0.0)

    @pytest.mark.parametrize("untie", [False, True])
    def test_gradient_check(self, untie):
        P = prop_params(5, untie=untie)
        g = Graph((0, 0, 0, 0), ((0, 1, 0), (1, 2, 1), (0, 3, 1)))
        h0 = Tensor(np.random.default_rng(4).normal(size=(4, H)), requires_grad=True)
        s = GraphState(g, h0)

        def fn():
            out = s.propagate(P, "p", 2, untie)
            return tn.sum_all(GraphState(g, out.h).readout(P, "r") * Tensor(np.arange(2 * H)))

        params = {k: v for k, v in P.items()}
        params["h0"] = h0
        report = tn.grad_check(fn, params)
        assert report.passed, report.per_param


def zero_model(**kw):
    return GraphModel(ModelConfig(**kw)).zero_()


def state_of(model, g, seed=0):
    h = np.random.default_rng(seed).normal(size=(g.num_nodes, model.config.hidden))
    return GraphState(g, Tensor(h))


class TestHeads:
    def test_addnode_zero_untyped(self):
        m = zero_model()
        out = f_addnode(m, empty_state(m))
        np.testing.assert_allclose(np.exp(out.logp.data), [0.5, 0.5], rtol=0, atol=1e-15)
        assert out.outcomes == [0, "stop"]

    def test_addnode_zero_typed(self):
        m = zero_model(node_types=3)
        out = f_addnode(m, state_of(m, Graph.untyped(2, [(0, 1)])))
        np.testing.assert_allclose(np.exp(out.logp.data), [0.25] * 4, rtol=0, atol=1e-15)

    def test_addedge_zero(self):
        m = zero_model()
        out = f_addedge(m, state_of(m, Graph.untyped(2)), 1)
        assert np.exp(out.logp.data[0]) == 0.5

    def test_addedge_bias_shift(self):
        m = zero_model()
        m.params["addedge.out.b"].data[:] = 10.0
        out = f_addedge(m, state_of(m, Graph.untyped(2)), 1)
        np.testing.assert_allclose(np.exp(out.logp.data[0]), 1 / (1 + np.exp(-10)), rtol=1e-14)

    def test_addedge_out_of_range(self):
        m = zero_model()
        with pytest.raises(IndexError):
            f_addedge(m, state_of(m, Graph.untyped(2)), 2)

    def test_nodes_zero_three_candidates(self):
        m = zero_model()
        out = f_nodes(m, state_of(m, Graph.untyped(4)), 3)
        np.testing.assert_allclose(np.exp(out.logp.data), [1 / 3] * 3, rtol=1e-14)
        assert [u for u, _ in out.outcomes] == [0, 1, 2]

    def test_nodes_zero_two_edge_types(self):
        m = zero_model(edge_types=2)
        out = f_nodes(m, state_of(m, Graph.untyped(3)), 2)
        np.testing.assert_allclose(np.exp(out.logp.data), [0.25] * 4, rtol=1e-14)

    def test_nodes_empty_candidates(self):
        m = zero_model()
        with pytest.raises(ValueError):
            f_nodes(m, state_of(m, Graph.untyped(1)), 0)

    def test_nodes_never_self(self):
        m = GraphModel(ModelConfig(hidden=H), seed=3)
        out = f_nodes(m, state_of(m, Graph.untyped(5, [(0, 4)])), 4)
        assert all(u != 4 for u, _ in out.outcomes)

    def test_nodes_mask_connected(self):
        m = GraphModel(ModelConfig(hidden=H), seed=3)
        out = f_nodes(m, state_of(m, Graph.untyped(4, [(0, 3), (2, 3)])), 3, mask_connected=True)
        assert [u for u, _ in out.outcomes] == [1]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 3))
    def test_distributions_normalized(self, seed, K, J):
        rng = np.random.default_rng(seed)
        m = GraphModel(ModelConfig(hidden=H, node_types=K, edge_types=J), seed=seed % 1000)
        n = int(rng.integers(2, 7))
        g = Graph(tuple(int(k) for k in rng.integers(0, K, size=n)),
                  tuple((u, v, int(rng.integers(J))) for u, v in
                        itertools.combinations(range(n), 2) if rng.random() < 0.4))
        s = state_of(m, g, seed)
        for out in (f_addnode(m, s), f_nodes(m, s, n - 1)):
            p = np.exp(out.logp.data)
            assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12
        pe = np.exp(f_addedge(m, s, n - 1).logp.data)
        assert abs(pe.sum() - 1) < 1e-12

    def test_init_zero_weights(self):
        m = zero_model()
        out = f_init(m, state_of(m, Graph.untyped(3)))
        np.testing.assert_array_equal(out.data, np.zeros(m.config.hidden))

    def test_init_empty_graph_depends_on_embedding_only(self):
        m = GraphModel(ModelConfig(hidden=H), seed=1)
        out = f_init(m, empty_state(m)).data
        P = m.params
        expect = P["embed.node"].data[0] @ P["init.W"].data[:H] + P["init.b"].data
        np.testing.assert_allclose(out, expect, rtol=1e-14)

    def test_init_disambiguates(self):
        m = GraphModel(ModelConfig(hidden=H), seed=1)
        a = f_init(m, state_of(m, Graph.untyped(2, [(0, 1)]), 0)).data
        b = f_init(m, state_of(m, Graph.untyped(3), 1)).data
        assert not np.allclose(a, b)

    def test_zero_condition_projection_matches_unconditioned(self):
        base = GraphModel(ModelConfig(hidden=H), seed=2)
        cond = GraphModel(ModelConfig(hidden=H, cond_dim=8), seed=2)
        for k, v in base.params.items():
            cond.params[k].data[...] = v.data
        cond.params["init.Wc"].data[...] = 0.0
        s = state_of(base, Graph.untyped(3, [(0, 1)]))
        a = f_init(base, s).data
        b = f_init(cond, s, cond=[5.0, 4.0, 1.0]).data
        np.testing.assert_array_equal(a, b)

    def test_condition_on_unconditional_model(self):
        m = GraphModel(ModelConfig(hidden=H))
        with pytest.raises(ValueError):
            f_init(m, empty_state(m), cond=[1.0, 0.0, 0.0])

    @pytest.mark.parametrize("head", ["addnode", "addedge", "nodes", "init"])
    def test_head_gradients(self, head):
        m = GraphModel(ModelConfig(hidden=3, node_types=2, edge_types=2, cond_dim=4), seed=9)
        m.set_condition_stats(np.array([[3.0, 2.0, 0.0], [5.0, 6.0, 2.0]]))
        g = Graph((0, 1, 1), ((0, 2, 1), (1, 2, 0)))
        s = state_of(m, g, 2)
        w = Tensor(np.random.default_rng(0).normal(size=6))

        def fn():
            if head == "addnode":
                out = f_addnode(m, s).logp
            elif head == "addedge":
                out = f_addedge(m, s, 2).logp
            elif head == "nodes":
                out = f_nodes(m, s, 2).logp
            else:
                out = f_init(m, s, 1, cond=[4.0, 3.0, 1.0])
            return tn.sum_all(out * Tensor(w.data[:out.shape[0]]))

        prefix = {"addnode": ("addnode", "embed"), "addedge": ("addedge", "embed"),
                  "nodes": ("nodes", "embed"), "init": ("init", "cond", "embed.node")}[head]
        params = {k: v for k, v in m.params.items() if k.startswith(prefix)}
        report = tn.grad_check(fn, params)
        assert report.passed, report.per_param


def test_parameter_count_guard():
    n = GraphModel(ModelConfig(hidden=16, rounds=2)).num_parameters()
    assert 24_000 <= n <= 40_000
