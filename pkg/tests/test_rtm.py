import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import best_partition_sse, chebyshev_neighbors, stable_sort_topk

from vct import rtm
from vct.backbone import FeatureMap
from vct.numerics import ShapeError, Tensor, grad_check, ops
from vct import numerics as nx


def fmap(arr, sid=1):
    return FeatureMap(Tensor(np.asarray(arr, dtype=float)), sid)


# -- difference map -----------------------------------------------------------


def test_difference_map_examples():
    x = np.random.default_rng(0).standard_normal((3, 3, 4))
    assert np.array_equal(rtm.difference_map(fmap(x), fmap(x, 2)).data.data, np.zeros((9, 4)))
    y = np.random.default_rng(1).standard_normal((3, 3, 4))
    assert np.array_equal(
        rtm.difference_map(fmap(x), fmap(y)).data.data, rtm.difference_map(fmap(y), fmap(x)).data.data
    )
    d = rtm.difference_map(fmap([[[1.0, -2.0]]]), fmap([[[3.0, 1.0]]]))
    assert d.data.data.tolist() == [[2.0, 3.0]]
    assert d.grid == (1, 1)
    with pytest.raises(ShapeError):
        rtm.difference_map(fmap(np.ones((2, 2, 1))), fmap(np.ones((2, 3, 1))))


# -- adjacency ----------------------------------------------------------------


def test_adjacency_single_node_and_zero_features():
    g = rtm.build_adjacency(np.ones((1, 3)), (1, 1), 8)
    assert g.edges() == {}
    g = rtm.build_adjacency(np.zeros((12, 3)), (3, 4), 8)
    assert all(w == 0 for w in g.edges().values())


def test_adjacency_2x2_moore_against_pairwise_dots():
    xbar = np.array([[1.0], [2.0], [3.0], [4.0]])
    g = rtm.build_adjacency(xbar, (2, 2), 8)
    expected = {
        (i, j): float(xbar[i] @ xbar[j])
        for i in range(4)
        for j in range(i + 1, 4)
        if chebyshev_neighbors((2, 2), i, j)
    }
    assert g.edges() == expected
    assert sorted(expected.values()) == [2, 3, 4, 6, 8, 12]


@pytest.mark.parametrize("knn", [4, 8, 16])
def test_stencil_degrees_and_symmetry(knn):
    g = rtm.build_adjacency(np.ones((49, 2)), (7, 7), knn)
    assert g.degree(3 * 7 + 3) == knn
    assert max(g.degree(i) for i in range(g.n)) == knn
    a = g.dense()
    assert np.array_equal(a, a.T)
    assert np.all(np.diag(a) == 0)


def test_unsupported_knn():
    with pytest.raises(ValueError, match="4, 8, 16"):
        rtm.build_adjacency(np.ones((4, 1)), (2, 2), 5)


def random_graph(rng):
    h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    xbar = np.abs(rng.standard_normal((h * w, int(rng.integers(1, 5)))))
    return rtm.build_adjacency(xbar, (h, w), int(rng.choice([4, 8, 16])))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_normalized_operator_spectrum(seed):
    g = random_graph(np.random.default_rng(seed))
    op = rtm.normalized_operator(g)
    assert np.max(np.abs(op - op.T)) <= 1e-12
    eig = np.linalg.eigvalsh(op)
    assert eig.min() >= -1 - 1e-9 and eig.max() <= 1 + 1e-9
    a_t = g.dense() + np.eye(g.n)
    dm = np.diag(1 / np.sqrt(a_t.sum(1)))
    assert np.allclose(op.sum(1), dm @ (a_t @ (dm @ np.ones(g.n))), atol=1e-12)


# -- GCN ----------------------------------------------------------------------


def test_gcn_isolated_nodes_reduce_to_projection():
    rng = np.random.default_rng(2)
    g = rtm.build_adjacency(np.zeros((6, 3)), (2, 3), 8)  # all weights zero -> A = 0
    h, w = Tensor(rng.standard_normal((6, 3))), Tensor(rng.standard_normal((3, 1)))
    p = rtm.gcn_forward(g, h, [w])
    assert np.allclose(p.data.data, 1 / (1 + np.exp(-(h.data @ w.data))), atol=1e-15)


def test_gcn_zero_features_give_half():
    g = rtm.build_adjacency(np.ones((9, 2)), (3, 3), 8)
    p = rtm.gcn_forward(g, Tensor(np.zeros((9, 2))), [Tensor(np.ones((2, 1)))])
    assert np.array_equal(p.data.data, np.full((9, 1), 0.5))


def test_gcn_two_node_hand_normalized():
    g = rtm.SpatialGraph(2, (1, 2), [np.array([1]), np.array([0])], [np.array([1.0]), np.array([1.0])])
    assert np.allclose(rtm.normalized_operator(g), [[0.5, 0.5], [0.5, 0.5]])
    p = rtm.gcn_forward(g, Tensor([[2.0], [0.0]]), [Tensor([[1.0]])])
    sig1 = 1 / (1 + math.exp(-1))
    assert np.allclose(p.data.data[:, 0], [sig1, sig1])


def test_gcn_multilayer_and_errors():
    rng = np.random.default_rng(3)
    g = random_graph(rng)
    c = 3
    reg = nx.ParameterRegistry()
    rtm.init_gcn(reg, c, 3, rng)
    h = Tensor(np.abs(rng.standard_normal((g.n, c))))
    p = rtm.gcn_forward(g, h, rtm.gcn_weights(reg, 3))
    assert p.data.shape == (g.n, 1)
    assert np.all((p.data.data >= 0) & (p.data.data <= 1))
    with pytest.raises(ValueError):
        rtm.gcn_forward(g, h, rtm.gcn_weights(reg, 3), layers=0)


def test_gcn_gradients():
    rng = np.random.default_rng(4)
    g = rtm.build_adjacency(np.abs(rng.standard_normal((12, 3))), (3, 4), 8)
    h = Tensor(rng.standard_normal((12, 3)), requires_grad=True)
    w0 = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    w1 = Tensor(rng.standard_normal((3, 1)), requires_grad=True)
    probe = Tensor(rng.standard_normal((12, 1)))
    f = lambda: ops.sum(nx.mul(rtm.gcn_forward(g, h, [w0, w1]).data, probe))  # noqa: E731
    for t in (h, w0, w1):
        assert grad_check(f, t, tol=1e-4).passed


# -- selection ----------------------------------------------------------------


def test_topk_examples():
    assert rtm.topk_indices([0.9, 0.1, 0.5, 0.2], 2).tolist() == [1, 3]
    p = np.random.default_rng(5).random(6)
    assert rtm.topk_indices(p, 6).tolist() == list(range(6))
    assert rtm.topk_indices(np.full(5, 0.3), 3).tolist() == stable_sort_topk([0.3] * 5, 3) == [0, 1, 2]
    with pytest.raises(ValueError):
        rtm.topk_indices(p, 0)
    with pytest.raises(ValueError):
        rtm.topk_indices(p, 7)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 16), st.floats(-5, 5))
def test_topk_matches_stable_sort_and_shift(seed, k, c):
    rng = np.random.default_rng(seed)
    # coarse-quantized values so ties are frequent
    p = np.round(rng.random(16) * 4) / 4
    idx = rtm.topk_indices(p, k)
    assert idx.tolist() == stable_sort_topk(p.tolist(), k)
    assert rtm.topk_indices(p + c, k).tolist() == idx.tolist()


def test_select_gathers_same_rows_from_both_branches():
    rng = np.random.default_rng(6)
    x1, x2 = rng.standard_normal((2, 2, 3)), rng.standard_normal((2, 2, 3))
    f1, f2, idx = rtm.select_topk_unchanged(np.array([0.4, 0.1, 0.3, 0.9]), fmap(x1), fmap(x2, 2), 2)
    assert idx.tolist() == [1, 2]
    assert np.array_equal(f1.data, x1.reshape(4, 3)[[1, 2]])
    assert np.array_equal(f2.data, x2.reshape(4, 3)[[1, 2]])


# -- K-means ------------------------------------------------------------------


def test_kmeans_single_cluster_is_mean():
    f = np.random.default_rng(7).standard_normal((9, 3))
    t = rtm.kmeans_cluster(Tensor(f), 1, seed=0)
    assert np.allclose(t.tokens.data, f.mean(0, keepdims=True))


def test_kmeans_saturated_is_permutation():
    f = np.random.default_rng(8).standard_normal((6, 2))
    t = rtm.kmeans_cluster(Tensor(f), 6, seed=3)
    assert sorted(map(tuple, t.tokens.data.round(12))) == sorted(map(tuple, f.round(12)))
    assert t.sse_history[-1] == pytest.approx(0.0, abs=1e-20)


def test_kmeans_1d_known_optimum():
    pts = np.array([[0.0], [0.1], [10.0], [10.1]])
    t = rtm.kmeans_cluster(Tensor(pts), 2, seed=0)
    assert sorted(t.tokens.data[:, 0].tolist()) == pytest.approx([0.05, 10.05])
    assert best_partition_sse(pts, 2) == pytest.approx(0.01)
    assert t.sse_history[-1] == pytest.approx(0.01)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(0, 100))
def test_kmeans_invariants(seed, l, kseed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(l, 20))
    pts = rng.standard_normal((n, 3))
    if rng.random() < 0.3:
        pts[: n // 2] = pts[0]  # duplicates exercise empty-cluster re-seeding
    t = rtm.kmeans_cluster(Tensor(pts), l, max_iters=30, seed=kseed)
    hist = np.array(t.sse_history)
    assert np.all(np.diff(hist) <= 1e-9 * (1 + hist[:-1]))
    for c in range(l):
        members = pts[t.assignments == c]
        if len(members):
            assert np.all(t.tokens.data[c] >= members.min(0) - 1e-12)
            assert np.all(t.tokens.data[c] <= members.max(0) + 1e-12)
    again = rtm.kmeans_cluster(Tensor(pts), l, max_iters=30, seed=kseed)
    assert np.array_equal(again.tokens.data, t.tokens.data)
    assert np.array_equal(again.assignments, t.assignments)


def test_kmeans_more_clusters_than_distinct_points():
    pts = np.array([[1.0, 1.0]] * 3 + [[2.0, 0.0]] * 3)
    t = rtm.kmeans_cluster(Tensor(pts), 4, seed=1)
    assert t.tokens.shape == (4, 2)
    assert set(map(tuple, t.tokens.data)) <= {(1.0, 1.0), (2.0, 0.0)}


def test_kmeans_tokens_are_differentiable():
    rng = np.random.default_rng(9)
    f = Tensor(rng.standard_normal((10, 3)), requires_grad=True)
    probe = Tensor(rng.standard_normal((3, 3)))
    fn = lambda: ops.sum(nx.mul(rtm.kmeans_cluster(f, 3, seed=2).tokens, probe))  # noqa: E731
    assert grad_check(fn, f, samples=None).passed


# -- full mining --------------------------------------------------------------


def gcn_for(c, layers=1, seed=0):
    reg = nx.ParameterRegistry()
    rtm.init_gcn(reg, c, layers, np.random.default_rng(seed))
    return rtm.gcn_weights(reg, layers)


def test_mining_identical_inputs():
    x = np.random.default_rng(10).standard_normal((4, 4, 6))
    cfg = rtm.RTMConfig(k=5, l=2)
    out = rtm.mine_reliable_tokens(fmap(x), fmap(x, 2), cfg, gcn_for(6))
    assert np.array_equal(out.xbar.data.data, np.zeros((16, 6)))
    assert np.array_equal(out.p.data.data, np.full((16, 1), 0.5))
    assert out.indices.tolist() == [0, 1, 2, 3, 4]
    assert np.array_equal(out.t1.tokens.data, out.t2.tokens.data)


def test_mining_paper_shapes():
    rng = np.random.default_rng(11)
    c = 8
    x1, x2 = rng.standard_normal((32, 32, c)), rng.standard_normal((32, 32, c))
    out = rtm.mine_reliable_tokens(fmap(x1), fmap(x2, 2), rtm.RTMConfig(k=1000, l=10, layers=1), gcn_for(c))
    assert out.k == 1000 and len(out.indices) == 1000
    assert out.t1.tokens.shape == (10, c) and out.t2.tokens.shape == (10, c)
    assert out.p.as_image().shape == (32, 32)


def test_mining_clamps_k_to_grid():
    rng = np.random.default_rng(12)
    x1, x2 = rng.standard_normal((2, 2, 3)), rng.standard_normal((2, 2, 3))
    cfg = rtm.RTMConfig(k=1000, l=2, seed=4)
    out = rtm.mine_reliable_tokens(fmap(x1), fmap(x2, 2), cfg, gcn_for(3))
    assert out.k == 4 and out.indices.tolist() == [0, 1, 2, 3]
    direct = rtm.kmeans_cluster(Tensor(x1.reshape(4, 3)), 2, cfg.max_iters, cfg.seed)
    assert np.array_equal(out.t1.tokens.data, direct.tokens.data)


def test_mining_deterministic():
    rng = np.random.default_rng(13)
    x1, x2 = rng.standard_normal((6, 6, 4)), rng.standard_normal((6, 6, 4))
    cfg = rtm.RTMConfig(k=20, l=4, seed=9)
    a = rtm.mine_reliable_tokens(fmap(x1), fmap(x2, 2), cfg, gcn_for(4))
    b = rtm.mine_reliable_tokens(fmap(x1), fmap(x2, 2), cfg, gcn_for(4))
    assert np.array_equal(a.indices, b.indices)
    assert a.t1.tokens.data.tobytes() == b.t1.tokens.data.tobytes()


def test_mining_prefers_unchanged_positions():
    rng = np.random.default_rng(14)
    x1 = rng.standard_normal((6, 6, 4))
    x2 = x1.copy()
    x2[:3] += 5.0  # top half changed
    out = rtm.mine_reliable_tokens(fmap(x1), fmap(x2, 2), rtm.RTMConfig(k=18, l=3), gcn_for(4))
    assert set(out.indices.tolist()) == set(range(18, 36))


def test_uniform_tokens_stride():
    x = np.arange(16 * 2, dtype=float).reshape(4, 4, 2)
    t = rtm.uniform_tokens(fmap(x), 4)
    assert np.array_equal(t.data, x.reshape(16, 2)[[0, 4, 8, 12]])


def test_sparse_operator_matches_dense():
    rng = np.random.default_rng(12)
    for knn in (4, 8, 16):
        x = np.abs(rng.standard_normal((20, 3)))
        g = rtm.build_adjacency(x, (4, 5), knn)
        dense = rtm.normalized_operator(g)
        assert np.allclose(rtm.normalized_operator_sparse(g).toarray(), dense, atol=1e-14)


def test_constant_matmul_gradient():
    from scipy import sparse

    rng = np.random.default_rng(13)
    m = sparse.random(6, 5, density=0.5, random_state=1, format="csr")
    x = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    assert np.allclose(nx.constant_matmul(m, x).data, m.toarray() @ x.data)
    probe = rng.standard_normal((6, 3))
    assert grad_check(lambda: nx.ops.sum(nx.mul(nx.constant_matmul(m, x), probe)), x).passed
