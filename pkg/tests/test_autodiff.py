import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsseg.autodiff import (ContractError, OptimizerState, ShapeError, Tensor, adam_step, backward, conv_nd, create,
                              einsum, gradcheck, no_grad, plateau_update, softmax_axis, transposed_conv_nd, unfold)
from capsseg.autodiff import functional as F
from capsseg.autodiff.conv import compact_scatter_slots, scatter_slots


def loop_conv(x, w, stride, pad, dil):
    """Direct nested-loop cross-correlation, any rank."""
    rank = x.ndim - 2
    xp = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * rank)
    ks = w.shape[2:]
    out_sp = [(xp.shape[2 + a] - dil * (ks[a] - 1) - 1) // stride + 1 for a in range(rank)]
    out = np.zeros((x.shape[0], w.shape[0], *out_sp))
    for n in range(x.shape[0]):
        for co in range(w.shape[0]):
            for o in itertools.product(*map(range, out_sp)):
                acc = 0.0
                for ci in range(x.shape[1]):
                    for k in itertools.product(*map(range, ks)):
                        pos = tuple(oo * stride + kk * dil for oo, kk in zip(o, k))
                        acc += xp[(n, ci) + pos] * w[(co, ci) + k]
                out[(n, co) + o] = acc
    return out


# ------------------------------------------------------------------ create


def test_create_cases():
    assert np.array_equal(create([2, 2]).data, np.zeros((2, 2)))
    assert np.array_equal(create([3], "constant", value=1.5).data, [1.5, 1.5, 1.5])
    a = create([4], "uniform", seed=7)
    b = create([4], "uniform", seed=7)
    assert np.array_equal(a.data, b.data)
    assert a.data.dtype == np.float64


def test_create_rejects_bad_input():
    with pytest.raises(ShapeError):
        create([0, 3])
    with pytest.raises(ContractError):
        create([3], "normal")


# ------------------------------------------------------------------ convolution


def test_conv_identity_and_sum():
    x = np.random.default_rng(0).normal(size=(1, 1, 4, 5))
    assert np.array_equal(conv_nd(x, np.ones((1, 1, 1, 1))).data, x)
    assert conv_nd(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3))).data.reshape(-1).tolist() == [9.0]


@pytest.mark.parametrize("rank,stride,pad,dil", [(2, 1, 0, 3), (2, 2, 1, 1), (3, 1, 1, 2), (3, 2, 0, 1)])
def test_conv_matches_loop_oracle(rank, stride, pad, dil):
    rng = np.random.default_rng(rank * 10 + dil)
    x = rng.normal(size=(2, 2) + (9,) * rank)
    w = rng.normal(size=(3, 2) + (2,) * rank)
    got = conv_nd(x, w, stride=stride, padding=pad, dilation=dil).data
    np.testing.assert_allclose(got, loop_conv(x, w, stride, pad, dil), atol=1e-12)


def test_tconv_single_pixel_and_shape():
    out = transposed_conv_nd(np.ones((1, 1, 1, 1)), np.ones((1, 1, 2, 2)), stride=2).data
    assert np.array_equal(out, np.ones((1, 1, 2, 2)))
    assert transposed_conv_nd(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2)), stride=2).shape == (1, 1, 4, 4)


@pytest.mark.parametrize("rank,stride,pad,dil", [(2, 2, 1, 1), (2, 1, 0, 2), (3, 2, 1, 1)])
def test_tconv_is_adjoint_of_conv(rank, stride, pad, dil):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3) + (7,) * rank)
    w = rng.normal(size=(2, 3) + (3,) * rank)
    y = conv_nd(x, w, stride, pad, dil).data
    r = rng.normal(size=y.shape)
    back = transposed_conv_nd(r, w, stride, pad, dil).data
    # the adjoint may be shorter than x when the stride leaves a remainder
    xs = x[(slice(None), slice(None)) + tuple(slice(0, n) for n in back.shape[2:])]
    assert abs(np.sum(y * r) - np.sum(xs * back)) < 1e-10 * max(1.0, abs(np.sum(y * r)))


def test_conv_gradients():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
    r = rng.normal(size=(1, 2, 3, 3))
    rep = gradcheck(lambda: F.sum(conv_nd(x, w, stride=2, padding=1, dilation=1) * r), {"x": x, "w": w}, eps=1e-6)
    assert rep.passed, rep.table()
    r2 = rng.normal(size=(1, 2, 9, 9))
    rep = gradcheck(lambda: F.sum(transposed_conv_nd(x, w, stride=2, padding=1) * r2), {"x": x, "w": w}, eps=1e-6)
    assert rep.passed, rep.table()


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv_nd(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_unfold_windows():
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    w = unfold(x, 2, stride=2).data
    assert w.shape == (1, 2, 2, 4, 1)
    assert w[0, 1, 0, :, 0].tolist() == [8.0, 9.0, 12.0, 13.0]


def test_compact_scatter_keeps_every_vote():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 3, 3, 16, 2))
    full = scatter_slots(x, 4, stride=2, padding=1).data
    compact = compact_scatter_slots(x, 4, stride=2, padding=1).data
    assert full.shape[:3] == compact.shape[:3] == (1, 6, 6)
    assert compact.shape[3] == 4
    # same votes per position, only the never-filled slots are dropped
    for f in (lambda a: a.sum(axis=3), lambda a: (a * a).sum(axis=3), lambda a: (a != 0).sum(axis=3)):
        np.testing.assert_allclose(f(full), f(compact), atol=1e-12)


# ------------------------------------------------------------------ softmax / einsum


def test_softmax_cases():
    assert np.allclose(softmax_axis(np.zeros(4)).data, 0.25)
    np.testing.assert_allclose(softmax_axis(np.log([2.0, 1.0])).data, [2 / 3, 1 / 3], atol=1e-15)
    x = np.random.default_rng(0).normal(size=(3, 5, 4)) * 10
    e = np.exp(x - x.max(axis=1, keepdims=True))
    np.testing.assert_allclose(softmax_axis(x, axis=1).data, e / e.sum(axis=1, keepdims=True), atol=1e-12)


@pytest.mark.parametrize("spec", ["ij,jk->ik", "pkcd,kcdje->pkcje", "pij,pijd->pjd", "pijd,pjd->pij", "i,j->ij",
                                  "bij,bij->b"])
def test_einsum_matches_numpy(spec):
    rng = np.random.default_rng(len(spec))
    dims = {}
    ins = spec.split("->")[0].split(",")
    for term in ins:
        for ch in term:
            dims.setdefault(ch, int(rng.integers(1, 4)))
    ops = [Tensor(rng.normal(size=[dims[c] for c in t]), requires_grad=True) for t in ins]
    np.testing.assert_allclose(einsum(spec, *ops).data, np.einsum(spec, *[o.data for o in ops]), atol=1e-13)
    r = rng.normal(size=einsum(spec, *ops).shape)
    rep = gradcheck(lambda: F.sum(einsum(spec, *ops) * r), ops, eps=1e-6)
    assert rep.passed


# ------------------------------------------------------------------ backward


def test_backward_simple():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(F.sum(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    y = Tensor([1.0, 2.0], requires_grad=True)
    backward(F.sum(y * y))
    assert y.grad.tolist() == [2.0, 4.0]


def test_backward_needs_scalar_and_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_gradcheck_sum_of_squares_and_constant():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
    assert gradcheck(lambda: F.sum(x * x), [x]).max_rel_error < 1e-9
    rep = gradcheck(lambda: F.sum(Tensor(np.ones(3))) + 0.0 * F.sum(x), [x])
    assert rep.max_rel_error == 0.0


def test_gradcheck_through_routing_block():
    from capsseg.capsules import dynamic_routing

    rng = np.random.default_rng(5)
    votes = Tensor(rng.normal(size=(2, 4, 3, 5)), requires_grad=True)
    r = rng.normal(size=(2, 3, 5))
    rep = gradcheck(lambda: F.sum(dynamic_routing(votes, 2)[0] * r), [votes], eps=1e-6)
    assert rep.max_rel_error < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 16))
def test_broadcast_grad_shapes(a, b, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(a, 1)), requires_grad=True)
    y = Tensor(rng.normal(size=(1, b)), requires_grad=True)
    backward(F.sum(x * y + x - y))
    np.testing.assert_allclose(x.grad, y.data.sum() + b)
    np.testing.assert_allclose(y.grad, x.data.sum() - a)


# ------------------------------------------------------------------ optimizer


def test_adam_zero_grad_is_noop():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    st_ = OptimizerState.for_params(p, lr=0.1)
    adam_step(st_, p, {"w": np.zeros(2)})
    assert p["w"].data.tolist() == [1.0, -2.0]
    assert not st_.m["w"].any() and not st_.v["w"].any()


def test_adam_first_step_hand_evaluated():
    p = {"a": Tensor(np.array([0.0, 0.0, 0.0]), requires_grad=True),
         "b": Tensor(np.array([0.0, 0.0, 0.0]), requires_grad=True)}
    st_ = OptimizerState.for_params(p, lr=0.01)
    g = np.array([3.0, -0.5, 1e-3])
    adam_step(st_, p, {"a": g, "b": g.copy()})
    # step 1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    expect = -0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p["a"].data, expect, rtol=1e-12)
    assert np.array_equal(p["a"].data, p["b"].data)


def test_plateau_decay_and_counters():
    s = OptimizerState(lr=1.0)
    assert not plateau_update(s, 0.5, 100, 300, 0.1)
    assert not plateau_update(s, 0.5, 100, 300, 0.1)
    assert not plateau_update(s, 0.4, 100, 300, 0.1)
    assert plateau_update(s, 0.5, 100, 300, 0.1)
    assert s.lr == pytest.approx(0.1) and s.since_improvement == 300 and s.decay_wait == 0
    assert not plateau_update(s, 0.6, 100, 300, 0.1)
    assert s.since_improvement == 0
