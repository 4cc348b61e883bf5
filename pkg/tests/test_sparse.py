import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qgnn import instrument
from qgnn.graph import EdgeList, GraphCSR, GraphViews
from qgnn.quant import dequantize_tensor, quantize_tensor
from qgnn.rng import rng_seed
from qgnn.sparse import (FUSED, MULTI_SPMM, MULTI_SPMV, incidence_spmm, plan_kernels, sddmm_add,
                         sddmm_dot, segment_softmax, softmax_backward, spmm_edge_scaled,
                         spmm_three_operand)

from conftest import dense_adjacency, random_graph

TOL = 1e-5
N_GRAPHS = 200


def graphs(n=N_GRAPHS, seed=0):
    g = np.random.default_rng(seed)
    for _ in range(n):
        yield g, random_graph(g)


# --- dense oracles ----------------------------------------------------------------

def dense_spmm(views, alpha, X, reverse=False):
    H = alpha.shape[1]
    D = X.shape[1] // H
    out = np.zeros((views.num_nodes, X.shape[1]))
    for h in range(H):
        A = dense_adjacency(views, alpha[:, h].astype(np.float64))
        out[:, h * D:(h + 1) * D] = (A.T if reverse else A) @ X[:, h * D:(h + 1) * D]
    return out


def dense_softmax(views, E):
    el = views.edges
    V, H = views.num_nodes, E.shape[1]
    alpha = np.zeros_like(E, dtype=np.float64)
    for h in range(H):
        M = np.full((V, V), -np.inf)
        M[el.dst, el.src] = E[:, h]
        P = np.exp(M - M.max(axis=1, keepdims=True))
        P /= P.sum(axis=1, keepdims=True)
        alpha[:, h] = P[el.dst, el.src]
    return alpha


def incidence_as_csr(inc):
    """The incidence matrix as a generic sparse matrix whose columns are edges."""
    return GraphCSR(inc.row_offsets, inc.incident_edge_ids, inc.incident_edge_ids)


# --- kernel planning ---------------------------------------------------------------

def test_plan_kernels():
    assert plan_kernels(4, 32).strategy == MULTI_SPMM and plan_kernels(4, 32).kernel_count == 4
    assert plan_kernels(2, 1).strategy == MULTI_SPMV
    p = plan_kernels(8, 16, k_max=6)
    assert p.strategy == FUSED and p.kernel_count == 1
    assert plan_kernels(6, 16, k_max=6).strategy == MULTI_SPMM
    with pytest.raises(ValueError):
        plan_kernels(0, 4)


# --- FP32 equivalence with dense masked formulations -------------------------------

def test_spmm_matches_dense():
    for g, views in graphs():
        H = int(g.integers(1, 9))
        D = int(g.integers(1, 5))
        alpha = g.random((views.num_edges, H)).astype(np.float32)
        X = g.standard_normal((views.num_nodes, H * D)).astype(np.float32)
        for k_max in (1, 6):  # forces the fused fallback and the per-head split
            got = spmm_edge_scaled(views.in_csr, alpha, X, k_max=k_max)
            assert np.abs(got - dense_spmm(views, alpha, X)).max() <= TOL
            rev = spmm_edge_scaled(views.out_csr, alpha, X, k_max=k_max)
            assert np.abs(rev - dense_spmm(views, alpha, X, reverse=True)).max() <= TOL


def test_split_and_fused_spmm_agree_bitwise(rng):
    views = random_graph(rng)
    alpha = rng.random((views.num_edges, 4)).astype(np.float32)
    X = rng.standard_normal((views.num_nodes, 12)).astype(np.float32)
    a = spmm_edge_scaled(views.in_csr, alpha, X, k_max=6)
    b = spmm_edge_scaled(views.in_csr, alpha, X, k_max=2)
    np.testing.assert_array_equal(a, b)


def test_three_operand_oracle_matches_dense():
    for g, views in graphs(50):
        w = g.random(views.num_edges)
        X = g.standard_normal((views.num_nodes, 1))
        got = spmm_three_operand(views.in_csr, w, X)
        np.testing.assert_allclose(got, dense_adjacency(views, w) @ X, atol=1e-12)


def test_sddmm_matches_dense():
    for g, views in graphs():
        el = views.edges
        H = int(g.integers(1, 5))
        D = int(g.integers(1, 5))
        S = g.standard_normal((views.num_nodes, H)).astype(np.float32)
        Dm = g.standard_normal((views.num_nodes, H)).astype(np.float32)
        full = S[:, None, :].astype(np.float64) + Dm[None, :, :]
        got = sddmm_add(views.out_csr, S, Dm)
        assert np.abs(got - full[el.src, el.dst]).max() <= TOL

        A = g.standard_normal((views.num_nodes, H * D)).astype(np.float32)
        B = g.standard_normal((views.num_nodes, H * D)).astype(np.float32)
        got = sddmm_dot(views.out_csr, A, B, heads=H)
        for h in range(H):
            sl = slice(h * D, (h + 1) * D)
            dense = B[:, sl].astype(np.float64) @ A[:, sl].T.astype(np.float64)  # [src, dst]
            assert np.abs(got[:, h] - dense[el.src, el.dst]).max() <= TOL


def test_segment_softmax_matches_dense():
    for g, views in graphs():
        E = (3 * g.standard_normal((views.num_edges, int(g.integers(1, 4))))).astype(np.float32)
        alpha, _ = segment_softmax(views.in_inc, E)
        assert np.abs(alpha - dense_softmax(views, E)).max() <= TOL


def test_softmax_backward_matches_dense():
    for g, views in graphs():
        el = views.edges
        E = g.standard_normal((views.num_edges, 2)).astype(np.float32)
        alpha, _ = segment_softmax(views.in_inc, E)
        dA = g.standard_normal(alpha.shape).astype(np.float32)
        dE, P = softmax_backward(views.in_inc, alpha, dA, el.dst)
        a64 = alpha.astype(np.float64)
        P_ref = np.zeros((views.num_nodes, 2))
        np.add.at(P_ref, el.dst, a64 * dA)
        assert np.abs(P - P_ref).max() <= TOL
        assert np.abs(dE - a64 * (dA - P_ref[el.dst])).max() <= TOL


def test_incidence_equals_three_operand_exactly():
    for g, views in graphs():
        F = g.standard_normal((views.num_edges, int(g.integers(1, 4)))).astype(np.float32)
        for inc in (views.in_inc, views.out_inc):
            ones = np.ones((views.num_edges, F.shape[1]), np.float32)
            generic = spmm_three_operand(incidence_as_csr(inc), F, ones)
            np.testing.assert_array_equal(incidence_spmm(inc, F), generic)
        # against the graph-ordered form: integer-valued edge data makes every sum exact
        Fi = g.integers(-50, 50, (views.num_edges, 1)).astype(np.float32)
        via_graph = spmm_three_operand(views.in_csr, Fi[:, 0], np.ones((views.num_nodes, 1), np.float32))
        np.testing.assert_array_equal(incidence_spmm(views.in_inc, Fi), via_graph)


# --- softmax properties ------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.floats(-50, 50))
def test_softmax_normalised_and_shift_invariant(seed, shift):
    g = np.random.default_rng(seed)
    views = random_graph(g, 16)
    E = g.standard_normal((views.num_edges, 2))
    alpha, _ = segment_softmax(views.in_inc, E)
    sums = np.zeros((views.num_nodes, 2))
    np.add.at(sums, views.edges.dst, alpha)
    np.testing.assert_allclose(sums, 1.0, rtol=1e-12)
    shifted, _ = segment_softmax(views.in_inc, E + shift)
    np.testing.assert_allclose(shifted, alpha, atol=1e-9)


def test_softmax_large_scores_stay_finite():
    views = GraphViews.build(EdgeList.from_pairs(2, [(0, 0), (1, 0), (1, 1)]))
    alpha, _ = segment_softmax(views.in_inc, np.array([[1000.0], [999.0], [-1000.0]]))
    assert np.isfinite(alpha).all()
    assert alpha[:, 0] == pytest.approx([1 / (1 + np.exp(-1)), np.exp(-1) / (1 + np.exp(-1)), 1.0])


def test_softmax_jacobian_finite_difference(rng):
    views = random_graph(rng, 12)
    E = rng.standard_normal((views.num_edges, 2))
    R = rng.standard_normal(E.shape)

    def f(Ev):
        return float((segment_softmax(views.in_inc, Ev)[0] * R).sum())

    alpha, _ = segment_softmax(views.in_inc, E)
    dE, _ = softmax_backward(views.in_inc, alpha, R, views.edges.dst)
    h = 1e-6
    fd = np.zeros_like(E)
    for idx in np.ndindex(*E.shape):
        Ep, Em = E.copy(), E.copy()
        Ep[idx] += h
        Em[idx] -= h
        fd[idx] = (f(Ep) - f(Em)) / (2 * h)
    np.testing.assert_allclose(dE, fd, atol=1e-7)


def test_zero_in_degree_rejected():
    views = GraphViews.build(EdgeList.from_pairs(2, [(0, 0)]))
    with pytest.raises(ValueError):
        segment_softmax(views.in_inc, np.zeros((1, 1)))


# --- quantized operands --------------------------------------------------------------

def test_quantized_operands_match_dequantized_oracle(rng):
    views = random_graph(rng)
    H, D = 2, 3
    X = rng.standard_normal((views.num_nodes, H * D)).astype(np.float32)
    alpha = rng.random((views.num_edges, H)).astype(np.float32)
    Q, _ = quantize_tensor(X, 8, rng_seed(0))
    Xd = dequantize_tensor(Q)
    np.testing.assert_allclose(spmm_edge_scaled(views.in_csr, alpha, Q), dense_spmm(views, alpha, Xd),
                               atol=1e-5)
    QB, _ = quantize_tensor(X[::-1].copy(), 8, rng_seed(1))
    got = sddmm_dot(views.out_csr, Q, QB, heads=H)
    ref = sddmm_dot(views.out_csr, Xd, dequantize_tensor(QB), heads=H)
    np.testing.assert_allclose(got, ref, atol=1e-5)
    S = X[:, :H].copy()
    QS, _ = quantize_tensor(S, 8, rng_seed(2))
    np.testing.assert_allclose(sddmm_add(views.out_csr, QS, S),
                               sddmm_add(views.out_csr, dequantize_tensor(QS), S), atol=1e-6)
    F = rng.standard_normal((views.num_edges, 2)).astype(np.float32)
    QF, _ = quantize_tensor(F, 8, rng_seed(3))
    np.testing.assert_allclose(incidence_spmm(views.in_inc, QF),
                               incidence_spmm(views.in_inc, dequantize_tensor(QF)), atol=1e-5)


def test_sddmm_dot_mixed_operands_rejected(rng):
    views = random_graph(rng)
    X = rng.standard_normal((views.num_nodes, 2)).astype(np.float32)
    Q, _ = quantize_tensor(X, 8, rng_seed(0))
    with pytest.raises(ValueError):
        sddmm_dot(views.out_csr, Q, X)
    with pytest.raises(ValueError):
        sddmm_dot(views.out_csr, X, X[:, :1])


def test_random_access_bytes_quarter_at_8_bits(rng):
    views = random_graph(rng)
    H, D = 4, 8
    X = rng.standard_normal((views.num_nodes, H * D)).astype(np.float32)
    S = rng.standard_normal((views.num_nodes, H)).astype(np.float32)
    alpha = rng.random((views.num_edges, H)).astype(np.float32)
    F = rng.standard_normal((views.num_edges, H)).astype(np.float32)
    q = lambda T: quantize_tensor(T, 8, rng_seed(0))[0]  # noqa: E731
    calls = {
        "spmm": (lambda Y: spmm_edge_scaled(views.in_csr, alpha, Y), X),
        "sddmm_dot": (lambda Y: sddmm_dot(views.out_csr, Y, Y, heads=H), X),
        "sddmm_add": (lambda Y: sddmm_add(views.out_csr, Y, Y), S),
        "incidence_spmm": (lambda Y: incidence_spmm(views.in_inc, Y), F),
    }
    for name, (fn, T) in calls.items():
        QT = q(T)
        with instrument.recording() as r32:
            fn(T)
        with instrument.recording() as r8:
            fn(QT)
        assert r32.random_bytes[name] > 0
        assert r8.random_bytes[name] * 4 == r32.random_bytes[name], name
