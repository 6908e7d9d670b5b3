import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from capsseg.autodiff import ContractError, ShapeError, Tensor, backward
from capsseg.autodiff import functional as F
from capsseg.capsules import (CapsuleLayerParams, capsule_conv_nd, capsule_deconv_nd, capsule_lengths,
                              capsules_to_channels, compute_votes, dynamic_routing, fully_connected_routing, route,
                              squash, to_primary_capsules)
from oracles import matvec_votes_ref, routing_ref, squash_ref

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# ------------------------------------------------------------------ squash


def test_squash_cases():
    assert np.array_equal(squash(np.zeros(3)).data, np.zeros(3))
    v = squash(np.array([0.6, 0.8])).data
    np.testing.assert_allclose(v, [0.3, 0.4], atol=1e-15)
    v = squash(np.array([0.0, 3.0, 0.0])).data
    np.testing.assert_allclose(v, [0.0, 0.9, 0.0], atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_squash_matches_reference(s):
    np.testing.assert_allclose(squash(s).data, squash_ref(s.tolist()), atol=1e-12)
    assert np.linalg.norm(squash(s).data) < 1.0


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 4, elements=finite), st.floats(1.0001, 5.0))
def test_squash_monotone_in_norm(s, k):
    if np.linalg.norm(s) < 1e-6:
        return
    assert np.linalg.norm(squash(s * k).data) > np.linalg.norm(squash(s).data)


def test_squash_gradient_at_zero_is_finite():
    s = Tensor(np.zeros((2, 3)), requires_grad=True)
    backward(F.sum(squash(s)))
    assert np.all(np.isfinite(s.grad))


# ------------------------------------------------------------------ reshapes and votes


def test_primary_capsules():
    f = np.arange(16 * 5 * 6, dtype=float).reshape(1, 16, 5, 6)
    g = to_primary_capsules(f, 8)
    assert g.shape == (1, 5, 6, 2, 8)
    assert np.array_equal(capsules_to_channels(g).data, f)
    one = to_primary_capsules(np.array([1.0, 2, 3, 4]).reshape(1, 4, 1, 1), 4).data
    assert one.reshape(-1).tolist() == [1.0, 2.0, 3.0, 4.0]
    with pytest.raises(ShapeError):
        to_primary_capsules(np.zeros((1, 6, 2, 2)), 4)


def test_votes_identity_bias_and_oracle():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(3, 2, 4))
    eye = np.zeros((3, 2, 4, 1, 4))
    eye[:, :, :, 0, :] = np.eye(4)
    np.testing.assert_array_equal(compute_votes(u, eye).data[..., 0, :], u)
    B = rng.normal(size=(5, 2))
    v = compute_votes(np.zeros((3, 2, 4)), rng.normal(size=(3, 2, 4, 5, 2)), B).data
    np.testing.assert_array_equal(v, np.broadcast_to(B, v.shape))
    M = rng.normal(size=(3, 2, 4, 5, 2))
    np.testing.assert_allclose(compute_votes(u, M).data, matvec_votes_ref(u, M), atol=1e-12)
    with pytest.raises(ShapeError):
        compute_votes(u, rng.normal(size=(3, 2, 3, 5, 2)))


# ------------------------------------------------------------------ routing


def test_single_iteration_is_uniform_average():
    rng = np.random.default_rng(1)
    votes = rng.normal(size=(6, 3, 4))
    v, c, _ = dynamic_routing(votes, 1)
    assert np.allclose(c.data, 1 / 3)
    np.testing.assert_allclose(v.data, squash_ref_rows(votes.sum(axis=0) / 3), atol=1e-12)


def squash_ref_rows(s):
    return np.array([squash_ref(r.tolist()) for r in s])


def test_identical_children_keep_uniform_coupling_across_children():
    rng = np.random.default_rng(2)
    one = rng.normal(size=(1, 3, 4))
    votes = np.repeat(one, 5, axis=0)
    for K in (1, 2, 3, 4):
        trace = []
        v, c, _ = dynamic_routing(votes, K, trace=trace)
        for t in trace:
            assert np.allclose(t, t[:1], atol=1e-15)
        np.testing.assert_allclose(v.data, squash_ref_rows((c.data[:, :, None] * votes).sum(axis=0)), atol=1e-12)


def test_two_children_one_parent_script():
    votes = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    v, _, _ = dynamic_routing(votes, 3)
    ref, _ = routing_ref(votes.tolist(), 3)
    np.testing.assert_allclose(v.data, ref, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_routing_matches_reference_and_simplex(I, J, D, K, seed):
    votes = np.random.default_rng(seed).normal(size=(I, J, D)) * 2
    trace = []
    v, c, _ = dynamic_routing(votes, K, trace=trace)
    ref, hist = routing_ref(votes.tolist(), K)
    np.testing.assert_allclose(v.data, ref, atol=1e-12)
    for t, h in zip(trace, hist):
        np.testing.assert_allclose(t, h, atol=1e-12)
        assert np.all(t >= 0) and np.allclose(t.sum(axis=-1), 1.0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
def test_fused_route_equals_composed(I, K, seed):
    rng = np.random.default_rng(seed)
    votes = Tensor(rng.normal(size=(3, I, 2, 4)), requires_grad=True)
    r = rng.normal(size=(3, 2, 4))
    a = route(votes, K)
    b = dynamic_routing(votes, K)[0]
    np.testing.assert_allclose(a.data, b.data, atol=1e-14)
    backward(F.sum(a * r))
    ga, votes.grad = votes.grad, None
    backward(F.sum(b * r))
    np.testing.assert_allclose(ga, votes.grad, atol=1e-12)


def test_child_permutation_equivariance():
    rng = np.random.default_rng(3)
    votes = rng.normal(size=(7, 3, 4))
    perm = rng.permutation(7)
    np.testing.assert_allclose(route(votes, 3).data, route(votes[perm], 3).data, atol=1e-12)


def test_outlier_loses_coupling():
    rng = np.random.default_rng(4)
    base = np.array([1.0, 0.5, -0.3])
    votes = np.zeros((5, 2, 3))
    votes[:4, 0] = base + 0.01 * rng.normal(size=(4, 3))
    votes[4, 0] = -base
    votes[:, 1] = 0.1 * rng.normal(size=(5, 3))
    _, hist = routing_ref(votes.tolist(), 3)
    trace = []
    dynamic_routing(votes, 3, trace=trace)
    np.testing.assert_allclose(trace[-1], hist[-1], atol=1e-12)
    assert trace[-1][4, 0] < trace[-1][:4, 0].min()


def test_routing_rejects_zero_iterations():
    with pytest.raises(ContractError):
        dynamic_routing(np.zeros((2, 2, 2)), 0)
    with pytest.raises(ContractError):
        CapsuleLayerParams(Tensor(np.zeros((1, 1, 1, 1, 1, 1))), iterations=0)


# ------------------------------------------------------------------ layers


def test_degenerate_conv_and_deconv_are_pointwise_squash():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 4, 5, 1, 3))
    M = np.eye(3).reshape(1, 1, 1, 3, 1, 3)
    expect = squash(x).data
    np.testing.assert_allclose(capsule_conv_nd(x, CapsuleLayerParams(Tensor(M), iterations=1)).data, expect, atol=1e-14)
    p = CapsuleLayerParams(Tensor(M), iterations=1, mode="deconv")
    np.testing.assert_allclose(capsule_deconv_nd(x, p).data, expect, atol=1e-14)


def test_full_extent_conv_equals_fully_connected():
    rng = np.random.default_rng(6)
    for _ in range(5):
        x = rng.normal(size=(2, 3, 3, 2, 4))
        M = rng.normal(size=(3, 3, 2, 4, 3, 5)) * 0.5
        conv = capsule_conv_nd(x, CapsuleLayerParams(Tensor(M), iterations=3)).data[:, 0, 0]
        W = M.reshape(18, 4, 3, 5)
        fc = fully_connected_routing(x.reshape(2, 18, 4), W, iterations=3).data
        np.testing.assert_allclose(conv, fc, atol=1e-12)


def test_stride_translation():
    rng = np.random.default_rng(7)
    x = np.zeros((1, 12, 12, 2, 3))
    x[:, 2:8, 2:8] = rng.normal(size=(1, 6, 6, 2, 3))
    p = CapsuleLayerParams(Tensor(rng.normal(size=(3, 3, 2, 3, 2, 3))), iterations=3, stride=2, padding=1)
    y = capsule_conv_nd(x, p).data
    ys = capsule_conv_nd(np.roll(x, (2, 2), axis=(1, 2)), p).data
    np.testing.assert_allclose(ys[:, 1:, 1:], y[:, :-1, :-1], atol=1e-13)


def test_deconv_single_position_routes_one_child_each():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 1, 1, 1, 3))
    M = rng.normal(size=(2, 2, 1, 3, 2, 3))
    p = CapsuleLayerParams(Tensor(M), iterations=3, stride=2, mode="deconv")
    y = capsule_deconv_nd(x, p).data
    assert y.shape == (1, 2, 2, 2, 3)
    for a in range(2):
        for b in range(2):
            vote = np.einsum("d,dje->je", x[0, 0, 0, 0], M[a, b, 0])
            ref, _ = routing_ref([vote.tolist()], 3)
            np.testing.assert_allclose(y[0, a, b], ref, atol=1e-12)


def test_deconv_shape_and_compact_equivalence():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 4, 4, 2, 3))
    M = rng.normal(size=(2, 2, 2, 3, 2, 3))
    assert capsule_deconv_nd(x, CapsuleLayerParams(Tensor(M), stride=2, mode="deconv")).shape == (1, 8, 8, 2, 3)
    M4 = Tensor(rng.normal(size=(4, 4, 2, 3, 2, 3)) * 0.5)
    p = CapsuleLayerParams(M4, stride=2, padding=1, mode="deconv")
    np.testing.assert_allclose(capsule_deconv_nd(x, p, compact=True).data,
                               capsule_deconv_nd(x, p, compact=False).data, atol=1e-13)


def test_deconv_3d_shape():
    x = np.random.default_rng(10).normal(size=(1, 2, 2, 2, 1, 2))
    M = Tensor(np.random.default_rng(11).normal(size=(2, 2, 2, 1, 2, 2, 2)))
    y = capsule_deconv_nd(x, CapsuleLayerParams(M, stride=2, mode="deconv"), rank=3)
    assert y.shape == (1, 4, 4, 4, 2, 2)


def test_fc_routing_cases():
    child = np.array([[[0.3, -1.2, 2.0]]])
    np.testing.assert_allclose(fully_connected_routing(child, np.eye(3).reshape(1, 3, 1, 3), iterations=1).data[0, 0],
                               squash_ref([0.3, -1.2, 2.0]), atol=1e-15)
    rng = np.random.default_rng(12)
    ch = rng.normal(size=(1, 4, 3))
    W = rng.normal(size=(4, 3, 2, 3))
    votes = np.einsum("id,idje->ije", ch[0], W)
    np.testing.assert_allclose(fully_connected_routing(ch, W, iterations=1).data[0],
                               squash_ref_rows(votes.mean(axis=0) * 4 / 2), atol=1e-12)


def test_layer_shape_errors():
    M = Tensor(np.zeros((3, 3, 2, 3, 2, 3)))
    with pytest.raises(ShapeError):
        capsule_conv_nd(np.zeros((1, 5, 5, 2, 4)), CapsuleLayerParams(M))
    with pytest.raises(ShapeError):
        capsule_conv_nd(np.zeros((1, 2, 2, 2, 3)), CapsuleLayerParams(M))
    with pytest.raises(ContractError):
        capsule_conv_nd(np.zeros((1, 5, 5, 2, 3)), CapsuleLayerParams(M, mode="deconv"))


def test_lengths():
    assert not capsule_lengths(np.zeros((2, 3, 4))).data.any()
    assert capsule_lengths(np.array([[0.6, 0.8]])).data.tolist() == [1.0]
    g = squash(np.random.default_rng(13).normal(size=(4, 4, 3, 5)) * 10).data
    assert np.all(capsule_lengths(g).data < 1)
