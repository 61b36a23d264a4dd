import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from raven.numerics import NonFiniteError, ParamStore, Tape, Tensor, grad_check, no_grad, ops
from raven.numerics.params import MAGIC

from conftest import store64


def check_unary(fn, shape, rng, tol=1e-6, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    w = rng.normal(size=fn(Tensor(x)).shape)
    s = store64(x=x)
    err = grad_check(lambda p: ops.sum(ops.mul(fn(p.t("x")), Tensor(w))), s)
    assert err < tol


# ----------------------------------------------------------------- matmul

def test_matmul_identity():
    a = np.array([[1.0, 2], [3, 4]])
    np.testing.assert_array_equal(ops.matmul(np.eye(2), a).data, a)


def test_matmul_selector_row():
    assert ops.matmul([[1.0, 0]], [[5.0], [7]]).data.tolist() == [[5.0]]


def test_matmul_grads_match_finite_differences(rng):
    s = store64(a=rng.normal(size=(3, 4)), b=rng.normal(size=(4, 2)))
    w = Tensor(rng.normal(size=(3, 2)))
    assert grad_check(lambda p: ops.sum(ops.mul(ops.matmul(p.t("a"), p.t("b")), w)), s) < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        ops.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_batched_matmul_broadcast_grad(rng):
    s = store64(a=rng.normal(size=(2, 3, 4)), b=rng.normal(size=(4, 5)))
    assert grad_check(lambda p: ops.sum(ops.tanh(ops.matmul(p.t("a"), p.t("b")))), s) < 1e-6


# ----------------------------------------------------------------- softmax

def test_softmax_uniform():
    np.testing.assert_allclose(ops.softmax_rows(np.zeros((1, 3))).data, [[1 / 3] * 3], atol=1e-7)


def test_softmax_ln3():
    np.testing.assert_allclose(ops.softmax_rows(np.array([[0.0, math.log(3)]])).data, [[0.25, 0.75]],
                               atol=1e-12)


@given(x=st.floats(-50, 50), c=st.floats(-10, 10))
def test_softmax_shift_invariant(x, c):
    a = ops.softmax_rows(np.array([[x, x + c]])).data
    b = ops.softmax_rows(np.array([[0.0, c]])).data
    np.testing.assert_allclose(a, b, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 6), n=st.integers(1, 9), seed=st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(m, n, seed):
    x = np.random.default_rng(seed).normal(scale=20, size=(m, n)).astype(np.float32)
    s = ops.softmax_rows(x).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        ops.softmax_rows(np.array([[0.0, np.nan]]))


def test_softmax_grad(rng):
    check_unary(lambda t: ops.softmax(t, axis=-1), (3, 5), rng)


# ----------------------------------------------------------------- layer norm

def test_layer_norm_constant_is_zero():
    np.testing.assert_array_equal(ops.layer_norm(np.full((1, 5), 3.0)).data, 0.0)


def test_layer_norm_unit_pair():
    out = ops.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2)).data
    np.testing.assert_allclose(out, [1, -1], atol=1e-5)


def test_layer_norm_needs_two_features():
    with pytest.raises(ValueError):
        ops.layer_norm(np.ones((3, 1)))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 40), seed=st.integers(0, 10_000), scale=st.floats(0.1, 100))
def test_layer_norm_moments(n, seed, scale):
    x = np.random.default_rng(seed).normal(scale=scale, size=(4, n))
    y = ops.layer_norm(x).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-6)
    var = y.var(axis=-1)
    expect = x.var(axis=-1) / (x.var(axis=-1) + 1e-5)
    np.testing.assert_allclose(var, expect, atol=1e-5)


def test_layer_norm_grad(rng):
    s = store64(x=rng.normal(size=(3, 6)), g=rng.normal(size=6), b=rng.normal(size=6))
    w = Tensor(rng.normal(size=(3, 6)))
    f = lambda p: ops.sum(ops.mul(ops.layer_norm(p.t("x"), p.t("g"), p.t("b")), w))  # noqa: E731
    assert grad_check(f, s) < 1e-4


# ----------------------------------------------------------------- activations

def test_activation_values():
    assert ops.silu(np.array(0.0)).data == 0.0
    assert ops.sigmoid(np.array(0.0)).data == 0.5
    np.testing.assert_allclose(ops.silu(np.array(1.0)).data, 1 / (1 + math.exp(-1)), rtol=1e-12)


def test_sigmoid_extremes_are_finite():
    out = ops.sigmoid(np.array([-1000.0, 1000.0])).data
    np.testing.assert_array_equal(out, [0.0, 1.0])


@pytest.mark.parametrize("fn", [ops.silu, ops.sigmoid, ops.softplus, ops.tanh, ops.exp,
                                lambda t: ops.smooth_l1(t, 0.7), lambda t: ops.clip(t, -0.5, 0.5),
                                lambda t: ops.power(t, 2.0), ops.neg])
def test_elementwise_grads(fn, rng):
    check_unary(fn, (4, 3), rng)


def test_log_and_div_grads(rng):
    check_unary(ops.log, (5,), rng, positive=True)
    s = store64(a=rng.normal(size=(2, 3)), b=np.abs(rng.normal(size=(3,))) + 1)
    assert grad_check(lambda p: ops.sum(ops.div(p.t("a"), p.t("b"))), s) < 1e-6


def test_structural_op_grads(rng):
    s = store64(a=rng.normal(size=(2, 3, 4)), b=rng.normal(size=(2, 3, 4)))
    w = Tensor(rng.normal(size=(4, 3, 4)))

    def f(p):
        a, b = p.t("a"), p.t("b")
        x = ops.concat([a, ops.swapaxes(ops.swapaxes(b, 0, 1), 0, 1)], axis=0)
        y = ops.stack([ops.mean(x, axis=0), ops.sum(x, axis=0)], axis=0)  # (2,3,4)
        z = ops.reshape(ops.transpose(y, (1, 0, 2)), (3, 8))
        z = ops.getitem(z, (slice(None), slice(1, 7)))
        return ops.sum(ops.mul(ops.broadcast_to(ops.sum(z, axis=0, keepdims=True), (4, 6)),
                               Tensor(w.data.reshape(4, 12)[:, :6])))

    assert grad_check(f, s) < 1e-6


def test_linear_grad(rng):
    s = store64(x=rng.normal(size=(5, 3)), w=rng.normal(size=(3, 4)), b=rng.normal(size=4))
    assert grad_check(lambda p: ops.sum(ops.silu(ops.linear(p.t("x"), p.t("w"), p.t("b")))), s) < 1e-6


# ----------------------------------------------------------------- conv1d

def conv_loop(x, w, stride, pad, groups):
    c_in, length = x.shape
    c_out, cpg, k = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad)))
    lout = (length + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, lout))
    opg = c_out // groups
    for o in range(c_out):
        g = o // opg
        for t in range(lout):
            for c in range(cpg):
                for j in range(k):
                    out[o, t] += xp[g * cpg + c, t * stride + j] * w[o, c, j]
    return out


def test_conv1d_k1_is_matmul(rng):
    x = rng.normal(size=(3, 7))
    w = rng.normal(size=(5, 3, 1))
    np.testing.assert_allclose(ops.conv1d(x, w).data, w[:, :, 0] @ x, atol=1e-12)


def test_conv1d_averaging_kernel_keeps_constant():
    out = ops.conv1d(np.full((1, 9), 2.5), np.full((1, 1, 3), 1 / 3)).data
    np.testing.assert_allclose(out, 2.5, atol=1e-12)


@pytest.mark.parametrize("stride,pad,groups", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (3, 1, 4)])
def test_conv1d_matches_loop_oracle(stride, pad, groups, rng):
    x = rng.normal(size=(4, 11))
    w = rng.normal(size=(4, 4 // groups, 3))
    out = ops.conv1d(x, w, stride=stride, pad=pad, groups=groups).data
    np.testing.assert_allclose(out, conv_loop(x, w, stride, pad, groups), atol=1e-6)


@pytest.mark.parametrize("stride,pad,groups", [(1, 0, 1), (2, 1, 1), (1, 2, 2)])
def test_conv1d_grads(stride, pad, groups, rng):
    s = store64(x=rng.normal(size=(2, 4, 9)), w=rng.normal(size=(4, 4 // groups, 3)), b=rng.normal(size=4))
    f = lambda p: ops.sum(ops.tanh(ops.conv1d(p.t("x"), p.t("w"), p.t("b"), stride, pad, groups)))  # noqa: E731
    assert grad_check(f, s) < 1e-6


def test_conv1d_group_mismatch():
    with pytest.raises(ValueError):
        ops.conv1d(np.ones((3, 8)), np.ones((4, 2, 3)), groups=2)
    with pytest.raises(ValueError):
        ops.conv1d(np.ones((2, 2)), np.ones((2, 2, 5)))


def test_conv2d_same_grad_and_identity(rng):
    x = rng.normal(size=(2, 5, 4, 3))
    w = np.zeros((3, 3, 3, 3))
    w[1, 1] = np.eye(3)
    np.testing.assert_allclose(ops.conv2d_same(x, w).data, x, atol=1e-12)
    s = store64(x=x, w=rng.normal(size=(3, 3, 3, 2)), b=rng.normal(size=2))
    assert grad_check(lambda p: ops.sum(ops.tanh(ops.conv2d_same(p.t("x"), p.t("w"), p.t("b")))), s) < 1e-6


# ----------------------------------------------------------------- pooling / upsampling

def test_pool_identity_and_mean():
    x = np.array([[1.0, 2, 3, 4]])
    np.testing.assert_array_equal(ops.adaptive_avg_pool(x, 4).data, x)
    np.testing.assert_allclose(ops.adaptive_avg_pool(x, 1).data, [[2.5]])


def test_pool_uneven_bins():
    np.testing.assert_allclose(ops.adaptive_avg_pool(np.array([[1.0, 2, 3, 4, 5]]), 2).data, [[2, 4.5]])


def test_pool_range():
    with pytest.raises(ValueError):
        ops.adaptive_avg_pool(np.ones((1, 4)), 5)
    with pytest.raises(ValueError):
        ops.adaptive_avg_pool(np.ones((1, 4)), 0)


@settings(max_examples=30, deadline=None)
@given(k=st.integers(1, 8), mult=st.integers(1, 6), seed=st.integers(0, 1000))
def test_pool_preserves_mean_when_divisible(k, mult, seed):
    x = np.random.default_rng(seed).normal(size=(2, k * mult))
    np.testing.assert_allclose(ops.adaptive_avg_pool(x, k).data.mean(-1), x.mean(-1), atol=1e-12)


def test_pool_and_upsample_grads(rng):
    check_unary(lambda t: ops.adaptive_avg_pool(t, 3), (2, 7), rng)
    check_unary(ops.upsample_bilinear, (1, 3, 4, 2), rng)


def test_upsample_constant_and_weights():
    out = ops.upsample_bilinear(np.full((2, 3, 2), 1.5)).data
    assert out.shape == (4, 6, 2)
    np.testing.assert_allclose(out, 1.5)
    np.testing.assert_allclose(ops.upsample_matrix(5).sum(axis=1), 1.0)


# ----------------------------------------------------------------- tape and store

def test_gradcheck_linear_squared_loss(rng):
    x, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 1))
    s = store64(w=rng.normal(size=(3, 1)))
    f = lambda p: ops.sum(ops.power(ops.sub(ops.matmul(Tensor(x), p.t("w")), Tensor(y)), 2.0))  # noqa: E731
    assert grad_check(f, s) < 1e-8


def test_frozen_param_gets_no_grad(rng):
    s = store64(w=rng.normal(size=(3,)), f=rng.normal(size=(3,)))
    s.set_trainable("f", False)
    f = lambda p: ops.sum(ops.mul(p.t("w"), p.t("f")))  # noqa: E731
    assert grad_check(f, s) < 1e-8
    assert not s.param("f").grad.any()
    assert s.param("w").grad.any()


def test_unused_nodes_get_no_grad(rng):
    a = Tensor(rng.normal(size=3), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    with Tape() as tape:
        ops.exp(b)
        loss = ops.sum(ops.mul(a, a))
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, 2 * a.data)
    assert b.grad is None


def test_grad_accumulates_over_shared_input(rng):
    a = Tensor(rng.normal(size=4), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.add(ops.mul(a, 3.0), ops.mul(a, a)))
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, 3 + 2 * a.data)


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with no_grad():
            ops.exp(a)
    assert len(tape) == 0


def test_non_finite_is_error():
    with pytest.raises(NonFiniteError):
        ops.log(np.array([-1.0]))


def test_replay_is_bit_identical():
    def run():
        r = np.random.default_rng(7)
        s = ParamStore(np.float32)
        s.add("w", r.normal(size=(8, 8)))
        s.add("x", r.normal(size=(4, 8)))
        s.begin()
        with Tape() as tape:
            y = ops.layer_norm(ops.silu(ops.matmul(s.t("x"), s.t("w"))))
            loss = ops.sum(ops.mul(y, y))
        tape.backward(loss)
        s.collect_grads()
        return loss.data.tobytes(), s.param("w").grad.tobytes(), s.param("x").grad.tobytes()

    assert run() == run()


def test_checkpoint_round_trip(tmp_path, rng):
    s = ParamStore()
    s.add("enc.w", rng.normal(size=(3, 4)))
    s.add("scalar", np.array(2.0))
    s.add("v", rng.normal(size=7))
    s.save(tmp_path / "w.rvwt")
    raw = (tmp_path / "w.rvwt").read_bytes()
    assert raw[:4] == MAGIC == b"RVWT"
    back = ParamStore.load(tmp_path / "w.rvwt")
    assert back.names() == s.names()
    for n in s.names():
        np.testing.assert_array_equal(back[n], s[n])
    assert back.content_hash() == s.content_hash()


def test_checkpoint_bad_magic():
    with pytest.raises(ValueError):
        ParamStore.from_bytes(b"NOPE" + bytes(8))


def test_store_rejects_duplicates_and_shape_changes():
    s = ParamStore()
    s.add("a", np.zeros(3))
    with pytest.raises(KeyError):
        s.add("a", np.zeros(3))
    with pytest.raises(ValueError):
        s.set_value("a", np.zeros(4))
    assert s.param("a").grad.shape == s["a"].shape
