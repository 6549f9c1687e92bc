"""Embedding architectures: contract examples, oracles, and structural invariants."""
from __future__ import annotations

import numpy as np
import pytest
from scipy import sparse

from nominator import tensor as T
from nominator.dom import DomNode, DomTree
from nominator.embedders import (
    EmbedderConfig, Fcn, GcnGru, GcnMean, LstmBidirectional,
    LstmBidirectionalEmbeddings, LstmBottomUp, LstmTopDown, PageGraph,
    TransformerEncoderEmbedder, build_embedder, classify, init_head,
)
from nominator.tensor import Tensor
from oracles import (
    gcn_gru_reference, gcn_mean_reference, lstm_chain_reference,
    transformer_layer_reference,
)


def tree_from_parents(parents: list[int | None]) -> DomTree:
    nodes = [DomNode(id=i, parent=p, tag="div") for i, p in enumerate(parents)]
    return DomTree.build("t", nodes)


def graph_from_parents(parents, rng, input_dim=6) -> PageGraph:
    tree = tree_from_parents(parents)
    return PageGraph(tree, rng.standard_normal((len(parents), input_dim)))


def shuffled_graph(graph: PageGraph, rng) -> PageGraph:
    """Same page with neighbor and child list order scrambled."""
    out = PageGraph(graph.tree, graph.x)
    out.neighbors = [rng.permutation(nbrs) for nbrs in graph.neighbors]
    out.children = [rng.permutation(kids) for kids in graph.children]
    rows, cols, vals = [], [], []
    for v, nbrs in enumerate(out.neighbors):
        if len(nbrs):
            rows.extend([v] * len(nbrs))
            cols.extend(int(u) for u in nbrs)
            vals.extend([1.0 / len(nbrs)] * len(nbrs))
    out.adj_mean = sparse.csr_matrix((vals, (rows, cols)), shape=(out.n, out.n))
    out.adj_mean.sort_indices()
    return out


def star_graph_pair(rng, input_dim=6):
    """Two stars over the same feature multiset with leaves in different order."""
    feats = rng.standard_normal((4, input_dim))
    root = rng.standard_normal(input_dim)
    perm = [2, 0, 3, 1]
    x_a = np.vstack([root, feats])
    x_b = np.vstack([root, feats[perm]])
    parents = [None, 0, 0, 0, 0]
    return (
        PageGraph(tree_from_parents(parents), x_a),
        PageGraph(tree_from_parents(parents), x_b),
    )


CHAIN = [None, 0, 1, 2]          # depth-3 path
BRANCHY = [None, 0, 0, 1, 1, 2, 2, 5, 5]  # 9 nodes


class TestGcnMean:
    def test_isolated_root_empty_mean_and_normalization(self):
        cfg = EmbedderConfig(kind="gcn-mean", input_dim=4, dim=4, layers=1)
        emb = GcnMean(cfg)
        rng = np.random.default_rng(0)
        params = emb.init_params(rng)
        params["layer1.W"].data = np.vstack([np.eye(4), np.zeros((4, 4))])
        params["layer1.w"].data = np.zeros(4)
        graph = PageGraph(tree_from_parents([None]), np.array([[3.0, 4.0, 0.0, 0.0]]))
        z = emb.embed(graph, [0], params).data
        assert np.allclose(z, [[0.6, 0.8, 0.0, 0.0]], atol=1e-12)

    def test_matches_straight_line_reference(self):
        rng = np.random.default_rng(1)
        cfg = EmbedderConfig(kind="gcn-mean", input_dim=6, dim=5, layers=2)
        emb = GcnMean(cfg)
        params = emb.init_params(rng)
        graph = graph_from_parents([None, 0, 0, 1, 1, 2], rng)
        mine = emb.embed(graph, np.arange(graph.n), params).data
        ref = gcn_mean_reference(graph.x, graph.neighbors, params, layers=2)
        assert np.abs(mine - ref).max() <= 1e-9

    def test_layer_outputs_unit_or_zero_norm(self):
        rng = np.random.default_rng(2)
        cfg = EmbedderConfig(kind="gcn-mean", input_dim=6, dim=8, layers=3)
        emb = GcnMean(cfg)
        params = emb.init_params(rng)
        graph = graph_from_parents(BRANCHY, rng)
        for layer in emb.layer_outputs(graph, params):
            norms = np.linalg.norm(layer.data, axis=1)
            assert np.all((norms <= 1e-12) | (np.abs(norms - 1.0) <= 1e-6))

    def test_neighbor_order_is_irrelevant_bitwise(self):
        rng = np.random.default_rng(3)
        cfg = EmbedderConfig(kind="gcn-mean", input_dim=6, dim=5, layers=2)
        emb = GcnMean(cfg)
        params = emb.init_params(rng)
        graph = graph_from_parents(BRANCHY, rng)
        base = emb.embed(graph, np.arange(graph.n), params).data
        other = emb.embed(shuffled_graph(graph, rng), np.arange(graph.n), params).data
        assert np.array_equal(base, other)

    def test_aggregation_cost_is_nodes_times_layers(self):
        rng = np.random.default_rng(4)
        cfg = EmbedderConfig(kind="gcn-mean", input_dim=6, dim=5, layers=2)
        emb = GcnMean(cfg)
        params = emb.init_params(rng)
        graph = graph_from_parents(BRANCHY, rng)
        emb.embed(graph, np.arange(graph.n), params)
        assert emb.eval_count == graph.n * 2


class TestGcnGru:
    def test_zero_output_head_gives_zero_embeddings(self):
        rng = np.random.default_rng(5)
        cfg = EmbedderConfig(kind="gcn-gru", input_dim=6, dim=5)
        emb = GcnGru(cfg)
        params = emb.init_params(rng)
        params["out.W"].data = np.zeros_like(params["out.W"].data)
        params["out.b"].data = np.zeros_like(params["out.b"].data)
        graph = graph_from_parents(BRANCHY, rng)
        assert not emb.embed(graph, np.arange(graph.n), params).data.any()

    def test_matches_straight_line_reference(self):
        rng = np.random.default_rng(6)
        cfg = EmbedderConfig(kind="gcn-gru", input_dim=6, dim=5)
        emb = GcnGru(cfg)
        params = emb.init_params(rng)
        graph = graph_from_parents([None, 0, 0, 0, 0], rng)  # 5-node star
        mine = emb.embed(graph, np.arange(graph.n), params).data
        ref = gcn_gru_reference(graph.x, graph.neighbors, params)
        assert np.abs(mine - ref).max() <= 1e-9

    def test_neighbor_order_is_irrelevant_bitwise(self):
        rng = np.random.default_rng(7)
        cfg = EmbedderConfig(kind="gcn-gru", input_dim=6, dim=5)
        emb = GcnGru(cfg)
        params = emb.init_params(rng)
        graph = graph_from_parents(BRANCHY, rng)
        base = emb.embed(graph, np.arange(graph.n), params).data
        other = emb.embed(shuffled_graph(graph, rng), np.arange(graph.n), params).data
        assert np.array_equal(base, other)


class TestTransformerEncoder:
    def test_single_node_sequence(self):
        rng = np.random.default_rng(8)
        cfg = EmbedderConfig(kind="te", input_dim=6, dim=4, heads=2)
        emb = TransformerEncoderEmbedder(cfg)
        params = emb.init_params(rng)
        graph = graph_from_parents([None], rng)
        z = emb.embed(graph, [0], params).data
        assert z.shape == (1, 4) and np.isfinite(z).all()
        assert np.array_equal(z, emb.embed(graph, [0], params).data)

    def test_matches_straight_line_reference(self):
        rng = np.random.default_rng(9)
        cfg = EmbedderConfig(kind="te", input_dim=6, dim=4, heads=2)
        emb = TransformerEncoderEmbedder(cfg)
        params = emb.init_params(rng)
        graph = graph_from_parents([None, 0, 0, 1], rng)
        for v in range(graph.n):
            seq_ids = np.concatenate(([v], graph.neighbors[v]))
            ref = transformer_layer_reference(graph.x[seq_ids], params, heads=2)
            mine = emb.embed(graph, [v], params).data[0]
            assert np.abs(mine - ref[0]).max() <= 1e-9

    def test_neighbor_permutation_within_tolerance(self):
        rng = np.random.default_rng(10)
        cfg = EmbedderConfig(kind="te", input_dim=6, dim=4, heads=2)
        emb = TransformerEncoderEmbedder(cfg)
        params = emb.init_params(rng)
        graph = graph_from_parents(BRANCHY, rng)
        base = emb.embed(graph, np.arange(graph.n), params).data
        other = emb.embed(shuffled_graph(graph, rng), np.arange(graph.n), params).data
        assert np.abs(base - other).max() <= 1e-9

    def test_oversized_neighborhoods_truncate(self):
        rng = np.random.default_rng(11)
        cfg = EmbedderConfig(kind="te", input_dim=3, dim=4, heads=2, max_neighbors=4)
        emb = TransformerEncoderEmbedder(cfg)
        params = emb.init_params(rng)
        graph = graph_from_parents([None] + [0] * 10, rng, input_dim=3)
        small = emb.embed(graph, [0], params).data
        graph.neighbors[0] = graph.neighbors[0][:4]
        assert np.array_equal(small, emb.embed(graph, [0], params).data)


class TestLstmTopDown:
    def make(self, rng, parents=CHAIN):
        cfg = EmbedderConfig(kind="lstm-td", input_dim=6, dim=5)
        emb = LstmTopDown(cfg)
        params = emb.init_params(rng)
        return emb, params, graph_from_parents(parents, rng)

    def test_root_is_single_cell_from_zero_state(self):
        rng = np.random.default_rng(12)
        emb, params, graph = self.make(rng)
        z = emb.embed(graph, [0], params).data[0]
        assert np.abs(z - lstm_chain_reference([graph.x[0]], params)).max() <= 1e-12

    def test_depth3_chain_matches_unrolled_cells(self):
        rng = np.random.default_rng(13)
        emb, params, graph = self.make(rng)
        z = emb.embed(graph, [3], params).data[0]
        ref = lstm_chain_reference([graph.x[i] for i in range(4)], params)
        assert np.abs(z - ref).max() <= 1e-9

    def test_only_root_path_matters(self):
        rng = np.random.default_rng(14)
        emb, params, graph = self.make(rng, parents=BRANCHY)
        target = 7  # path 0 -> 2 -> 5 -> 7
        base = emb.embed(graph, [target], params).data
        x2 = graph.x.copy()
        for off_path in (1, 3, 4, 6, 8):
            x2[off_path] += rng.standard_normal(6)
        other = emb.embed(PageGraph(graph.tree, x2), [target], params).data
        assert np.array_equal(base, other)

    def test_full_page_costs_one_cell_per_node(self):
        rng = np.random.default_rng(15)
        emb, params, graph = self.make(rng, parents=BRANCHY)
        emb.embed(graph, np.arange(graph.n), params)
        assert emb.eval_count == graph.n


class TestLstmBottomUp:
    def make(self, rng, parents=BRANCHY):
        cfg = EmbedderConfig(kind="lstm-bu", input_dim=6, dim=5)
        emb = LstmBottomUp(cfg)
        params = emb.init_params(rng)
        return emb, params, graph_from_parents(parents, rng)

    def test_leaf_equals_standard_cell_from_zero_state(self):
        rng = np.random.default_rng(16)
        emb, params, graph = self.make(rng)
        leaf = 8
        z = emb.embed(graph, [leaf], params).data[0]
        ref = lstm_chain_reference([graph.x[leaf]], params, prefix="bu")
        assert np.abs(z - ref).max() <= 1e-12

    def test_single_child_reduces_to_chain(self):
        rng = np.random.default_rng(17)
        emb, params, graph = self.make(rng, parents=CHAIN)
        z = emb.embed(graph, [0], params).data[0]
        ref = lstm_chain_reference([graph.x[i] for i in (3, 2, 1, 0)], params, prefix="bu")
        assert np.abs(z - ref).max() <= 1e-9

    def test_child_order_is_irrelevant_bitwise(self):
        rng = np.random.default_rng(18)
        emb, params, graph = self.make(rng)
        base = emb.embed(graph, np.arange(graph.n), params).data
        other = emb.embed(shuffled_graph(graph, rng), np.arange(graph.n), params).data
        assert np.array_equal(base, other)

    def test_only_subtree_matters(self):
        rng = np.random.default_rng(19)
        emb, params, graph = self.make(rng)
        target = 2  # subtree {2, 5, 6, 7, 8}
        base = emb.embed(graph, [target], params).data
        x2 = graph.x.copy()
        for outside in (0, 1, 3, 4):
            x2[outside] -= rng.standard_normal(6)
        other = emb.embed(PageGraph(graph.tree, x2), [target], params).data
        assert np.array_equal(base, other)

    def test_full_page_costs_one_cell_per_node(self):
        rng = np.random.default_rng(20)
        emb, params, graph = self.make(rng)
        emb.embed(graph, np.arange(graph.n), params)
        assert emb.eval_count == graph.n


class TestBidirectional:
    def test_equals_concat_of_both_directions_bitwise(self):
        rng = np.random.default_rng(21)
        cfg = EmbedderConfig(kind="lstm-bi", input_dim=6, dim=5)
        bi = LstmBidirectional(cfg)
        params = bi.init_params(rng)
        graph = graph_from_parents(BRANCHY, rng)
        ids = np.arange(graph.n)
        combined = bi.embed(graph, ids, params).data
        td = LstmTopDown(EmbedderConfig(kind="lstm-td", input_dim=6, dim=5))
        bu = LstmBottomUp(EmbedderConfig(kind="lstm-bu", input_dim=6, dim=5))
        assert np.array_equal(combined[:, :5], td.embed(graph, ids, params).data)
        assert np.array_equal(combined[:, 5:], bu.embed(graph, ids, params).data)

    def test_output_dims_double(self):
        for kind in ("lstm-bi", "lstm-bie"):
            cfg = EmbedderConfig(kind=kind, input_dim=6, dim=150)
            assert cfg.out_dim == 300


class TestBidirectionalEmbeddings:
    def make(self, rng):
        cfg = EmbedderConfig(kind="lstm-bie", input_dim=6, dim=5)
        emb = LstmBidirectionalEmbeddings(cfg)
        return emb, emb.init_params(rng)

    def test_root_reencoding_is_single_cell_on_bottom_up_state(self):
        rng = np.random.default_rng(22)
        emb, params = self.make(rng)
        graph = graph_from_parents(BRANCHY, rng)
        z = emb.embed(graph, [0], params).data[0]
        up_root = z[5:]
        ref = lstm_chain_reference([up_root], params, prefix="down")
        assert np.abs(z[:5] - ref).max() <= 1e-9

    def test_distant_leaf_perturbation_propagates(self):
        rng = np.random.default_rng(23)
        emb, params = self.make(rng)
        graph = graph_from_parents(BRANCHY, rng)
        target, distant_leaf = 3, 8  # separate branches of the tree
        base = emb.embed(graph, [target], params).data
        x2 = graph.x.copy()
        x2[distant_leaf] += 1.0
        other = emb.embed(PageGraph(graph.tree, x2), [target], params).data
        assert np.abs(base - other).max() > 1e-8


class TestFcn:
    def test_ignores_every_other_node(self):
        rng = np.random.default_rng(24)
        cfg = EmbedderConfig(kind="fcn", input_dim=6, dim=5)
        emb = Fcn(cfg)
        params = emb.init_params(rng)
        graph = graph_from_parents(BRANCHY, rng)
        base = emb.embed(graph, [4], params).data
        x2 = graph.x.copy()
        x2[[0, 1, 2, 3, 5, 6, 7, 8]] = rng.standard_normal((8, 6))
        other = emb.embed(PageGraph(graph.tree, x2), [4], params).data
        assert np.array_equal(base, other)

    def test_identity_weights_pass_nonnegative_features_through(self):
        rng = np.random.default_rng(25)
        cfg = EmbedderConfig(kind="fcn", input_dim=4, dim=4)
        emb = Fcn(cfg)
        params = emb.init_params(rng)
        for name in ("fc1.W", "fc2.W"):
            params[name].data = np.eye(4)
        for name in ("fc1.b", "fc2.b"):
            params[name].data = np.zeros(4)
        x = np.abs(rng.standard_normal((3, 4)))
        graph = PageGraph(tree_from_parents([None, 0, 0]), x)
        assert np.allclose(emb.embed(graph, [0, 1, 2], params).data, x)


class TestClassifier:
    def test_zero_head_is_uniform(self):
        head = init_head(np.random.default_rng(26), 5)
        head["head.W"].data = np.zeros((5, 7))
        head["head.b"].data = np.zeros(7)
        probs = classify(Tensor(np.random.default_rng(0).standard_normal((3, 5))), head).data
        assert np.allclose(probs, 1.0 / 7.0, atol=1e-12)

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(27)
        head = init_head(rng, 5)
        probs = classify(Tensor(rng.standard_normal((100, 5))), head).data
        assert np.all(probs > 0)
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-9

    def test_argmax_invariant_to_constant_logit_shift(self):
        rng = np.random.default_rng(28)
        head = init_head(rng, 5)
        z = Tensor(rng.standard_normal((10, 5)))
        base = classify(z, head).data.argmax(axis=1)
        head["head.b"].data = head["head.b"].data + 123.0
        assert np.array_equal(base, classify(z, head).data.argmax(axis=1))


class TestRenumberedChildren:
    @pytest.mark.parametrize("kind", ["gcn-mean", "gcn-gru", "lstm-bu", "te"])
    def test_root_embedding_stable_under_child_renumbering(self, kind):
        rng = np.random.default_rng(29)
        cfg = EmbedderConfig(kind=kind, input_dim=6, dim=4, heads=2)
        emb = build_embedder(cfg)
        params = emb.init_params(rng)
        head = init_head(rng, cfg.out_dim)
        g_a, g_b = star_graph_pair(rng)
        z_a = emb.embed(g_a, [0], params)
        z_b = emb.embed(g_b, [0], params)
        assert np.abs(z_a.data - z_b.data).max() <= 1e-9
        p_a = classify(z_a, head).data
        p_b = classify(z_b, head).data
        assert p_a.argmax() == p_b.argmax()
