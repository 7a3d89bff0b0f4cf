from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from renas.autograd import Tensor, concat_channels, cross_entropy, finite_diff_check
from renas.config import ConfigError, SearchConfig
from renas.supergraph import (
    NodeSpec,
    apply_node,
    apply_op,
    build_parent,
    count_params,
    features,
    network_forward,
    route_blocks,
    split_blocks,
)


def small_config(**kw):
    base = dict(seed=0, M=1, N=2, K=2, C0=4, classes=3, image_size=8)
    base.update(kw)
    return SearchConfig(**base)


def images(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def naive_route(preds, gamma, j, K):
    """Per-block triple loop over predecessors, source blocks and target blocks."""
    C = preds[0][1].shape[1]
    w = C // K
    out = [np.zeros_like(preds[0][1][:, :w]) for _ in range(K)]
    for i, X in preds:
        for k in range(K):
            for l in range(K):
                out[k] += gamma[(i, j)][l, k] * X[:, l * w : (l + 1) * w]
    return out


class TestBuildParent:
    def test_stage_shapes(self):
        x = images((2, 3, 32, 32))
        expected = {1: (2, 32, 16, 16), 2: (2, 64, 8, 8), 3: (2, 128, 4, 4)}
        for M, shape in expected.items():
            net = build_parent(SearchConfig(M=M, N=2, K=4, C0=16))
            assert features(net, x, [[0, 0]] * M).shape == shape
        net = build_parent(SearchConfig(M=3, N=4, K=4, C0=16))
        assert network_forward(net, x, [[0, 3, 1, 5]] * 3).shape == (2, 10)

    def test_edge_counts(self):
        net = build_parent(SearchConfig(M=1, N=1, K=2, C0=8))
        assert net.gamma_params() == []
        net = build_parent(SearchConfig(M=2, N=3, K=2, C0=8))
        assert len(net.node_keys()) == 6
        assert len(net.gamma_params()) == 6
        assert all(g.shape == (2, 2) for _, g in net.gamma_params())

    def test_k_must_divide_channels(self):
        with pytest.raises(ConfigError, match="K=3.*C0=16|C0=16.*K=3"):
            build_parent(SearchConfig(M=1, N=2, K=3, C0=16))

    def test_spatial_underflow(self):
        with pytest.raises(ConfigError):
            build_parent(SearchConfig(M=3, N=2, K=2, C0=8, image_size=4))

    def test_initial_values(self):
        net = build_parent(small_config(K=4, C0=8))
        for _, g in net.gamma_params():
            np.testing.assert_array_equal(g.data, np.full((4, 4), 0.25))
        assert np.all(net.alpha.scores == 0.0)
        assert net.alpha.scores.shape == (2, 6)

    def test_same_seed_same_weights(self):
        a, b = build_parent(small_config(seed=3)), build_parent(small_config(seed=3))
        for (na, ta), (nb, tb) in zip(a.weight_params(), b.weight_params()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)
        c = build_parent(small_config(seed=4))
        assert not np.array_equal(a.stem.data, c.stem.data)


class TestRouteBlocks:
    def test_single_block_scales(self):
        X = images((1, 4, 3, 3))
        out = route_blocks([(0, X)], {(0, 1): Tensor([[2.0]])}, 1)
        np.testing.assert_array_equal(out[0].data, 2.0 * X.data)

    def test_all_ones_sums_blocks(self):
        X = images((2, 6, 3, 3))
        out = route_blocks([(0, X)], {(0, 1): Tensor(np.ones((2, 2)))}, 1)
        s = X.data[:, :3] + X.data[:, 3:]
        for k in range(2):
            np.testing.assert_allclose(out[k].data, s, atol=1e-15)

    def test_three_predecessors_against_loops(self):
        rng = np.random.default_rng(1)
        preds = [(i, images((2, 8, 4, 4), seed=i)) for i in range(3)]
        gamma = {(i, 3): Tensor(rng.normal(size=(4, 4))) for i in range(3)}
        out = route_blocks(preds, gamma, 3)
        ref = naive_route([(i, X.data) for i, X in preds], {key: g.data for key, g in gamma.items()}, 3, 4)
        for k in range(4):
            np.testing.assert_allclose(out[k].data, ref[k], rtol=0, atol=1e-12)
        np.testing.assert_allclose(route_blocks(preds, gamma, 3, k=2).data, ref[2], atol=1e-12)

    def test_ordering_violation(self):
        X = images((1, 4, 2, 2))
        with pytest.raises(ValueError, match="ordering"):
            route_blocks([(2, X)], {(2, 1): Tensor(np.ones((2, 2)))}, 1)

    def test_shape_disagreement(self):
        g = {(0, 2): Tensor(np.ones((2, 2))), (1, 2): Tensor(np.ones((2, 2)))}
        with pytest.raises(ValueError, match="shape"):
            route_blocks([(0, images((1, 4, 2, 2))), (1, images((1, 4, 3, 3)))], g, 2)

    def test_zero_row_isolates_source_block(self):
        rng = np.random.default_rng(2)
        X = images((1, 8, 3, 3))
        g = rng.normal(size=(4, 4))
        g[1, :] = 0.0
        before = route_blocks([(0, X)], {(0, 1): Tensor(g)}, 1)
        Xc = X.data.copy()
        Xc[:, 2:4] = rng.normal(size=(1, 2, 3, 3)) * 100
        after = route_blocks([(0, Tensor(Xc))], {(0, 1): Tensor(g)}, 1)
        for a, b in zip(before, after):
            np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.sampled_from([1, 2, 4, 8]), st.integers(0, 10_000))
    def test_k1_is_node_level_and_partition_is_bijective(self, K, seed):
        rng = np.random.default_rng(seed)
        X = Tensor(rng.normal(size=(1, 8, 2, 2)))
        blocks = split_blocks(X, K)
        np.testing.assert_array_equal(concat_channels(blocks).data if K > 1 else blocks[0].data, X.data)
        preds = [(0, X), (1, Tensor(rng.normal(size=(1, 8, 2, 2))))]
        if K == 1:
            g = {(0, 2): Tensor([[0.3]]), (1, 2): Tensor([[-1.7]])}
            out = route_blocks(preds, g, 2)
            np.testing.assert_allclose(out[0].data, 0.3 * preds[0][1].data - 1.7 * preds[1][1].data, atol=1e-14)


class TestApplyNode:
    def _node(self, K=2, C=8, op="conv3", identity=True):
        width = C // K
        w = np.zeros((width, width, 3, 3))
        w[np.arange(width), np.arange(width), 1, 1] = 1.0
        per_block = [[Tensor(w if identity else np.random.default_rng(k).normal(size=w.shape))] for k in range(K)]
        return NodeSpec(node_index=1, channels=C, blocks=K, stride=1, in_width=width, op_weights=[per_block])

    def test_identity_weights(self):
        node = self._node()
        blocks = [images((2, 4, 5, 5), seed=s) for s in range(2)]
        out = apply_node(node, blocks, 0, ["conv3"])
        assert out.shape == (2, 8, 5, 5)
        np.testing.assert_allclose(out.data, np.maximum(np.concatenate([b.data for b in blocks], axis=1), 0), atol=1e-15)

    def test_blockwise_composition(self):
        node = self._node(identity=False)
        blocks = [images((1, 4, 4, 4), seed=s) for s in range(2)]
        ref = np.concatenate([apply_op("conv3", node.op_weights[0][k], blocks[k]).data for k in range(2)], axis=1)
        np.testing.assert_allclose(apply_node(node, blocks, 0, ["conv3"]).data, ref, atol=1e-15)

    def test_bad_choice_and_block_count(self):
        node = self._node()
        blocks = [images((1, 4, 4, 4))] * 2
        with pytest.raises(ValueError, match="outside"):
            apply_node(node, blocks, 1, ["conv3"])
        with pytest.raises(ValueError, match="blocks"):
            apply_node(node, blocks[:1], 0, ["conv3"])


class TestNetworkForward:
    def test_shape_and_finite(self):
        net = build_parent(small_config(classes=10, C0=8))
        out = network_forward(net, images((2, 3, 8, 8)), [[0, 4]])
        assert out.shape == (2, 10)
        assert np.all(np.isfinite(out.data))

    def test_wrong_channels(self):
        net = build_parent(small_config())
        with pytest.raises(ValueError, match="images"):
            network_forward(net, images((2, 1, 8, 8)), [[0, 0]])

    def test_zero_routing_isolates_first_node(self):
        net = build_parent(small_config(N=3))
        for g in net.dags[0].gamma.values():
            g.data[:] = 0.0
        a = network_forward(net, images((2, 3, 8, 8), seed=1), [[0, 1, 2]]).data
        # perturbing node-0 weights cannot reach the output when every gamma is zero
        for ws in net.dags[0].nodes[0].op_weights[0]:
            for w in ws:
                w.data += 10.0
        b = network_forward(net, images((2, 3, 8, 8), seed=1), [[0, 1, 2]]).data
        np.testing.assert_array_equal(a, b)

    def test_deterministic(self):
        net = build_parent(small_config())
        x = images((2, 3, 8, 8))
        assert network_forward(net, x, [[1, 2]]).data.tobytes() == network_forward(net, x, [[1, 2]]).data.tobytes()

    @pytest.mark.parametrize("choices", [[[0, 1]], [[1, 0]]])
    def test_gradients_of_w_and_gamma(self, choices):
        cfg = small_config(op_set=("dwsep5", "conv3"))
        net = build_parent(cfg)
        rng = np.random.default_rng(5)
        for _, g in net.gamma_params():
            g.data[:] = rng.normal(size=g.shape)
        x = images((2, 3, 8, 8), seed=3)
        labels = np.array([0, 2])
        params = [t for _, t in net.weight_params()] + [t for _, t in net.gamma_params()]
        err = finite_diff_check(lambda: cross_entropy(network_forward(net, x, choices), labels), params)
        assert err < 1e-4


class TestCountParams:
    def test_linear_head(self):
        fake = SimpleNamespace(weight_params=lambda: [("w", Tensor(np.zeros((10, 128)))), ("b", Tensor(np.zeros(10)))])
        assert count_params(fake) == 1290

    def test_single_conv(self):
        fake = SimpleNamespace(weight_params=lambda: [("w", Tensor(np.zeros((4, 4, 3, 3))))])
        assert count_params(fake) == 144

    def test_toy_parent_by_hand(self):
        # M=1, N=2, K=2, C0=8, 3 input channels, 10 classes, six ops.
        # stem: 8*3*3*3 = 216
        # node 0 (in 8 -> 8 per block), per block:
        #   dwsep k: 8*k*k + 8*8 -> 136, 264, 456; conv k: 64*k*k -> 576, 1600, 3136
        #   sum 6168, times 2 blocks = 12336
        # node 1 (in 8 -> 8 per block): identical widths, 12336
        # head: 10*16 + 10 = 170
        net = build_parent(SearchConfig(M=1, N=2, K=2, C0=8))
        assert count_params(net) == 216 + 12336 + 12336 + 170 == 25058

    def test_excludes_gamma_and_alpha(self):
        net = build_parent(SearchConfig(M=1, N=3, K=2, C0=8))
        total = count_params(net)
        for _, g in net.gamma_params():
            g.data[:] = 5.0
        assert count_params(net) == total
        assert all("g" not in name.split(".")[-1] for name, _ in net.weight_params())
