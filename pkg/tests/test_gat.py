import numpy as np
import pytest

from oracles import dense_attention, dense_layer
from sememelm import autodiff as ad
from sememelm import gat
from sememelm.autodiff import Tensor
from sememelm.lexicon import RelationTriple, SememeInventory
from sememelm.relgraph import GraphError, add_virtual_node, build_graph, extract_subgraph, permute_subgraph


class Mask:
    """Minimal graph stand-in: just a receive mask."""

    def __init__(self, mask):
        self.mask = np.asarray(mask, dtype=bool)

    def receive_mask(self):
        return self.mask


def params(dim=4, out_dim=3, layers=2, seed=0):
    return gat.init_gat_params(np.random.default_rng(seed), dim, out_dim, layers)


def graph(n, edges):
    inventory = SememeInventory(tuple(f"s{i}" for i in range(n)), ("r",))
    return build_graph(inventory, [RelationTriple(s, 0, d) for s, d in edges])


class TestLayer:
    def test_matches_dense_oracle(self):
        p = params(dim=4, seed=1)
        rng = np.random.default_rng(2)
        H = rng.normal(size=(5, 4))
        edges = [(0, 0, 1), (2, 0, 1), (1, 0, 3), (4, 0, 4), (3, 0, 0)]
        mask = np.eye(5, dtype=bool)
        for s, _, d in edges:
            mask[d, s] = True
        got = gat.gat_layer(p, 0, Tensor(H), Mask(mask)).value
        want = dense_layer(H, p.W[0].value, p.Wq[0].value, p.Wk[0].value, edges, 0.2)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_alpha_rows_sum_to_one_on_support(self):
        p = params(dim=3, seed=4)
        mask = np.array([[1, 0, 0], [1, 1, 0], [1, 1, 1]], dtype=bool)
        alpha = gat.attention_coefficients(p, 1, Tensor(np.random.default_rng(0).normal(size=(3, 3))), Mask(mask))
        np.testing.assert_allclose(alpha.value.sum(axis=1), 1.0)
        assert np.all(alpha.value[~mask] == 0.0)
        assert np.all(alpha.value[mask] > 0.0)

    def test_alpha_matches_oracle(self):
        p = params(dim=3, seed=5)
        H = np.random.default_rng(6).normal(size=(4, 3))
        edges = [(0, 0, 2), (1, 0, 2), (3, 0, 2), (2, 0, 0)]
        mask = np.eye(4, dtype=bool)
        for s, _, d in edges:
            mask[d, s] = True
        alpha = gat.attention_coefficients(p, 0, Tensor(H), Mask(mask)).value
        np.testing.assert_allclose(alpha, dense_attention(H, p.Wq[0].value, p.Wk[0].value, edges, 4), atol=1e-12)

    def test_zero_weights_give_zero_states(self):
        p = params(dim=3)
        p.W[0].value[:] = 0.0
        H = np.random.default_rng(0).normal(size=(3, 3))
        out = gat.gat_layer(p, 0, Tensor(H), Mask(np.ones((3, 3)))).value
        np.testing.assert_array_equal(out, 0.0)

    def test_single_node_identity(self):
        p = params(dim=3)
        p.W[0].value[:] = np.eye(3)
        h = np.array([[1.0, -2.0, 0.5]])
        out = gat.gat_layer(p, 0, Tensor(h), Mask([[True]])).value
        np.testing.assert_allclose(out, [[1.0, -0.4, 0.5]])

    def test_slope_is_configurable(self):
        p = params(dim=2)
        p.W[0].value[:] = np.eye(2)
        p.leaky_slope = 0.0
        out = gat.gat_layer(p, 0, Tensor([[-1.0, 1.0]]), Mask([[True]])).value
        np.testing.assert_allclose(out, [[0.0, 1.0]])

    def test_bad_layer_index(self):
        with pytest.raises(IndexError):
            gat.attention_coefficients(params(layers=2), 2, Tensor(np.ones((1, 4))), Mask([[True]]))


class TestParams:
    def test_shapes_validated(self):
        p = params(dim=4, out_dim=3)
        with pytest.raises(ad.ShapeError):
            gat.GatParams(p.W, p.Wq, p.Wk, ad.parameter(np.zeros((1, 5))), p.W_proj)

    def test_multi_head_rejected(self):
        with pytest.raises(ValueError):
            gat.init_gat_params(np.random.default_rng(0), 4, 3, heads=2)

    def test_named_parameters(self):
        assert set(params(layers=2).named_parameters()) == {
            "W0", "Wq0", "Wk0", "W1", "Wq1", "Wk1", "virtual_seed", "W_proj"}


class TestEncodePair:
    def setup_method(self):
        self.g = graph(4, [(0, 2), (2, 3), (1, 2)])
        self.sub = add_virtual_node(extract_subgraph(self.g, {0, 1}, {2, 3}))
        self.p = params(dim=4, out_dim=3, seed=7)
        self.init = np.random.default_rng(8).normal(size=(4, 4))

    def oracle(self, sub, init, p):
        H = np.vstack([init[n] if n >= 0 else p.virtual_seed.value[0] for n in sub.local_nodes])
        for l in range(p.layers):
            H = dense_layer(H, p.W[l].value, p.Wq[l].value, p.Wk[l].value, sub.local_edges, p.leaky_slope)
        return H

    def test_two_layers_against_oracle(self):
        trace = []
        h_g, sememes = gat.encode_pair(self.p, self.sub, self.init, trace)
        assert trace == [0, 1]
        H = self.oracle(self.sub, self.init, self.p)
        v = self.sub.virtual_index
        np.testing.assert_allclose(h_g.value, H[[v]], atol=1e-12)
        np.testing.assert_allclose(sememes.value, np.delete(H, v, axis=0), atol=1e-12)
        assert h_g.shape == (1, 4)

    def test_layer_count_follows_params(self):
        p = params(dim=4, layers=3, seed=9)
        trace = []
        gat.encode_pair(p, self.sub, self.init, trace)
        assert trace == [0, 1, 2]

    def test_permutation_invariant(self):
        h_g, _ = gat.encode_pair(self.p, self.sub, self.init)
        order = [4, 2, 0, 3, 1]
        h_perm, _ = gat.encode_pair(self.p, permute_subgraph(self.sub, order), self.init)
        np.testing.assert_allclose(h_perm.value, h_g.value, atol=1e-12)

    def test_unaugmented_rejected(self):
        with pytest.raises(GraphError):
            gat.encode_pair(self.p, extract_subgraph(self.g, {0}, {1}), self.init)

    def test_batch_is_block_diagonal(self):
        other = add_virtual_node(extract_subgraph(self.g, {3}, {1}))
        batch = gat.batch_subgraphs([self.sub, other])
        H = gat.encode_batch(self.p, batch, Tensor(self.init)).value
        solo_a, _ = gat.encode_pair(self.p, self.sub, self.init)
        solo_b, _ = gat.encode_pair(self.p, other, self.init)
        np.testing.assert_allclose(H[batch.virtual_rows], np.vstack([solo_a.value, solo_b.value]), atol=1e-12)

    def test_gradient_check(self):
        p = params(dim=3, out_dim=2, seed=1)
        init = np.random.default_rng(2).normal(size=(4, 3))

        def loss():
            h_g, _ = gat.encode_pair(p, self.sub, init)
            return ad.sum_all(ad.tanh(gat.project(p, h_g)))

        assert ad.grad_check(loss, p.named_parameters()) < 1e-6


class TestProject:
    def test_linear_map(self):
        p = params(dim=4, out_dim=3)
        h = np.arange(4.0)[None, :]
        np.testing.assert_allclose(gat.project(p, Tensor(h)).value, h @ p.W_proj.value.T)

    def test_width_checked(self):
        with pytest.raises(ad.ShapeError):
            gat.project(params(dim=4), Tensor(np.ones((1, 3))))
