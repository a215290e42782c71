import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphgen import tensor as tn
from graphgen.baselines import (ERModel, SeqConfig, SeqModel, Vocabulary, er_fit, er_logprob,
                                er_sample, er_samples, seq_logprob, seq_sample, seq_samples)
from graphgen.generator import Limits
from graphgen.graphcore import (AddEdge, AddNode, Graph, GrammarError, GraphBuilder, PickNode,
                                StopEdges, StopNodes, decisions_from_graph, gen_synthetic)

TRIANGLE_SEQ = decisions_from_graph(Graph.untyped(3, [(0, 1), (0, 2), (1, 2)]))
G32 = Graph.untyped(3, [(0, 1), (1, 2)])
G43 = Graph.untyped(4, [(0, 1), (1, 2), (2, 3)])


class TestErdosRenyi:
    def test_fit_single(self):
        assert er_fit([G32]).p == pytest.approx(2 / 3, abs=1e-15)

    def test_fit_edgeless(self):
        assert er_fit([Graph.untyped(4), Graph.untyped(2)]).p == 0.0

    def test_fit_pooled(self):
        m = er_fit([G32, G43])
        assert m.p == pytest.approx(5 / 9, abs=1e-15)
        assert m.node_counts == {3: 0.5, 4: 0.5}

    def test_fit_empty(self):
        with pytest.raises(ValueError):
            er_fit([])

    def test_edge_term(self):
        lp = er_logprob(er_fit([G32]), G32, include_size=False)
        assert abs(lp - math.log((2 / 3) ** 2 / 3)) < 1e-12
        assert abs(lp + 1.909543) < 1e-6

    def test_size_term_included(self):
        m = ERModel(2 / 3, {3: 0.25, 5: 0.75})
        assert abs(er_logprob(m, G32) - (math.log(0.25) + math.log(4 / 27))) < 1e-12

    def test_impossible_graphs(self):
        assert er_logprob(ERModel(0.0, {3: 1.0}), G32) == -math.inf
        assert er_logprob(ERModel(1.0, {3: 1.0}), G32) == -math.inf
        assert er_logprob(ERModel(1.0, {3: 1.0}), Graph.untyped(3, [(0, 1), (0, 2), (1, 2)])) == 0
        assert er_logprob(ERModel(0.5, {3: 1.0}), G43) == -math.inf

    def test_mle_perturbation(self):
        rng = np.random.default_rng(0)
        data = [gen_synthetic("tree", rng, n_min=4, n_max=9) for _ in range(30)]
        m = er_fit(data)

        def total(p):
            return sum(er_logprob(ERModel(p, m.node_counts), g) for g in data)

        best = total(m.p)
        assert total(m.p + 1e-3) <= best and total(m.p - 1e-3) <= best

    def test_mean_edges(self):
        m = ERModel(0.2, {15: 1.0})
        edges = [g.num_edges for g in er_samples(m, 10000, np.random.default_rng(0))]
        assert abs(np.mean(edges) - 21) < 1

    def test_deterministic(self):
        m = ERModel(0.3, {5: 0.5, 6: 0.5})
        assert er_sample(m, np.random.default_rng(4)) == er_sample(m, np.random.default_rng(4))

    def test_dict_round_trip(self):
        m = er_fit([G32, G43])
        assert ERModel.from_dict(m.to_dict()) == m

    def test_invalid_probability(self):
        with pytest.raises(ValueError):
            ERModel(1.5, {3: 1.0})


class TestVocabulary:
    def test_triangle_thirteen_tokens(self):
        v = Vocabulary()
        toks = [v.encode(d) for d in TRIANGLE_SEQ]
        assert len(toks) == 13
        assert [v.decode(t) for t in toks] == TRIANGLE_SEQ

    def test_size(self):
        assert Vocabulary().size == 4 + 25
        assert Vocabulary(3, 2, 10).size == 3 + 3 + 20

    def test_out_of_vocabulary(self):
        with pytest.raises(GrammarError, match="max_nodes"):
            Vocabulary(max_nodes=5).encode(PickNode(5))

    def test_legal_masks(self):
        v = Vocabulary(max_nodes=5)
        b = GraphBuilder()
        assert np.nonzero(v.legal(b))[0].tolist() == [0, 1]
        b.apply(AddNode(0))
        assert np.nonzero(v.legal(b))[0].tolist() == [v.stop_edges]
        b.apply(StopEdges()).apply(AddNode(0)).apply(AddEdge())
        assert np.nonzero(v.legal(b))[0].tolist() == [v.pick0]


def small_seq(**kw):
    return SeqModel(SeqConfig(hidden=4, embed=4, max_nodes=8, **kw), seed=1)


class TestSeqModel:
    def test_zero_weights_uniform_over_legal(self):
        m = SeqModel(SeqConfig()).zero_()
        lp, steps = seq_logprob(m, TRIANGLE_SEQ)
        b = GraphBuilder()
        expect = []
        for d in TRIANGLE_SEQ:
            expect.append(-math.log(m.vocab.legal(b).sum()))
            b.apply(d)
        np.testing.assert_allclose(steps, expect, rtol=0, atol=1e-12)
        assert abs(lp - 11 * math.log(0.5)) < 1e-12

    def test_parameter_count(self):
        assert SeqModel(SeqConfig()).num_parameters() == 36_829

    def test_batch_matches_steps(self):
        m = small_seq()
        seqs = [TRIANGLE_SEQ, [StopNodes()], decisions_from_graph(G43)]
        with tn.no_tape():
            batch = m.batch_logprobs(seqs).data
        for lp, s in zip(batch, seqs):
            assert abs(lp - sum(m.step_logprobs(s))) < 1e-12

    def test_illegal_sequence_rejected(self):
        with pytest.raises(GrammarError):
            seq_logprob(small_seq(), [AddNode(0), AddEdge(), PickNode(0)])

    def test_gradients(self):
        m = SeqModel(SeqConfig(hidden=3, embed=3, max_nodes=4, cond_dim=3), seed=2)
        m.set_condition_stats(np.array([[3.0, 2.0, 0.0], [4.0, 4.0, 1.0]]))

        def fn():
            return tn.sum_all(m.batch_logprobs([TRIANGLE_SEQ, decisions_from_graph(G43)],
                                               [[3.0, 3.0, 1.0], [4.0, 3.0, 0.0]]))

        report = tn.grad_check(fn, m.params, eps=1e-5, tol=1e-4)
        assert report.passed, report.per_param

    def test_sampling_deterministic(self):
        m = small_seq()
        a = seq_sample(m, np.random.default_rng(3))
        b = seq_sample(m, np.random.default_rng(3))
        assert a[0] == b[0] and a[1].decisions == b[1].decisions

    def test_masked_samples_replay(self):
        m = small_seq()
        for s in seq_samples(m, 200, np.random.default_rng(0), Limits(max_nodes=8)):
            assert "grammar_error" not in s.graph.flags
            if not s.truncated:
                b = GraphBuilder(allow_duplicates=True)
                for d in s.trace.decisions:
                    b.apply(d)
                assert b.phase == "done"
                assert b.graph().edges == s.graph.edges

    def test_unmasked_can_fail_grammar(self):
        m = SeqModel(SeqConfig(hidden=4, embed=4, max_nodes=8, masked=False), seed=1)
        out = seq_samples(m, 200, np.random.default_rng(0), Limits(max_nodes=8))
        assert any("grammar_error" in s.graph.flags for s in out)
        assert all(s.truncated for s in out if "grammar_error" in s.graph.flags)

    def test_conditional_requires_condition(self):
        m = small_seq(cond_dim=4)
        with pytest.raises(ValueError):
            seq_logprob(m, TRIANGLE_SEQ)
        with pytest.raises(ValueError):
            seq_logprob(small_seq(), TRIANGLE_SEQ, cond=[3.0, 3.0, 1.0])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_seq_sample_replay_consistency(seed):
    m = SeqModel(SeqConfig(hidden=6, embed=6, max_nodes=10), seed=seed % 100)
    for s in seq_samples(m, 5, np.random.default_rng(seed), Limits(max_nodes=10)):
        if "truncated" in s.graph.flags:
            continue
        lp, _ = seq_logprob(m, s.trace.decisions)
        assert abs(lp - s.trace.log_prob()) < 1e-10
