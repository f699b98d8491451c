import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ckt_surrogate.numerics import (
    MLP, Adam, CosineSchedule, NonFiniteError, Parameter, adam_step, attention_core,
    causal_self_attention, causal_self_attention_backward, check_finite, gelu, gelu_backward,
    grad_check, layer_norm, layer_norm_backward, linear, linear_backward, log_softmax, matmul,
    merge_heads, relative_error, softmax, split_heads,
)

finite = st.floats(-10, 10, allow_nan=False)


# ---- matmul

def test_matmul_identity(rng):
    a = rng.normal(size=(3, 3))
    assert np.array_equal(matmul(np.eye(3), a), a)


def test_matmul_hand_case():
    out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    assert np.array_equal(out, [[3.0], [7.0]])


def test_matmul_triple_loop(rng):
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(a, b), ref, rtol=1e-13, atol=1e-14)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_linear_backward_matches_fd(rng):
    x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
    dy = rng.normal(size=(4, 2))
    dx, dw, db = linear_backward(dy, x, w)
    eps = 1e-6
    num = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        wp, wm = w.copy(), w.copy()
        wp[idx] += eps
        wm[idx] -= eps
        num[idx] = np.sum(dy * (linear(x, wp, b) - linear(x, wm, b))) / (2 * eps)
    np.testing.assert_allclose(dw, num, rtol=1e-7)
    np.testing.assert_allclose(db, dy.sum(0))


# ---- tensors / parameters

def test_parameter_grad_shape_and_zero():
    p = Parameter(np.ones((2, 3)))
    assert p.grad.shape == p.value.shape and p.value.dtype == np.float64
    p.grad += 5
    p.zero_grad()
    assert not p.grad.any()
    with pytest.raises(ValueError):
        Parameter(np.ones(3), grad=np.ones(2))


def test_check_finite_raises():
    with pytest.raises(NonFiniteError):
        check_finite(np.array([1.0, np.nan]))
    with pytest.raises(FloatingPointError):
        check_finite(np.array([np.inf]))


# ---- gelu

def test_gelu_zero_and_asymptote():
    assert gelu(np.array(0.0)) == 0.0
    assert abs(gelu(np.array(6.0)) - 6.0) < 1e-6


def test_gelu_reference_value():
    # tanh form evaluated independently with math
    x = 1.0
    ref = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    assert abs(gelu(np.array(x)) - ref) < 1e-15


def test_gelu_grad_at_half():
    x, eps = np.array(0.5), 1e-6
    num = (gelu(x + eps) - gelu(x - eps)) / (2 * eps)
    assert abs(gelu_backward(np.array(1.0), x) - num) < 1e-6


@given(arrays(np.float64, 7, elements=finite))
def test_gelu_grad_property(x):
    eps = 1e-6
    num = (gelu(x + eps) - gelu(x - eps)) / (2 * eps)
    np.testing.assert_allclose(gelu_backward(np.ones_like(x), x), num, atol=1e-6)


def test_gelu_does_not_mutate_input(rng):
    x = rng.normal(size=10)
    x0 = x.copy()
    gelu(x)
    assert np.array_equal(x, x0)


# ---- softmax

@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(s):
    p = softmax(s)
    assert np.all(np.abs(p.sum(-1) - 1.0) < 1e-12)
    np.testing.assert_allclose(np.log(p), log_softmax(s), atol=1e-9)


def test_softmax_shift_invariant(rng):
    s = rng.normal(size=(3, 5))
    np.testing.assert_allclose(softmax(s), softmax(s + 100.0), rtol=1e-12)


# ---- layer norm

def test_layer_norm_constant_row():
    y, _ = layer_norm(np.full((1, 6), 3.0), np.ones(6), np.zeros(6))
    assert np.all(np.abs(y) < 1e-12)


def test_layer_norm_normalized_row_unchanged(rng):
    x = rng.normal(size=16)
    x = (x - x.mean()) / x.std()
    y, _ = layer_norm(x[None], np.ones(16), np.zeros(16))
    np.testing.assert_allclose(y[0], x, rtol=1e-5, atol=1e-5)


def test_layer_norm_shape_error():
    with pytest.raises(ValueError):
        layer_norm(np.ones((2, 4)), np.ones(3), np.zeros(3))


def test_layer_norm_backward_fd(rng):
    x, g, b = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)
    dy = rng.normal(size=(3, 5))
    _, cache = layer_norm(x, g, b)
    dx, dg, db = layer_norm_backward(dy, cache)
    eps = 1e-6
    for arr, grad in ((x, dx), (g, dg), (b, db)):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            fp = np.sum(dy * layer_norm(x, g, b)[0])
            arr[idx] = old - eps
            fm = np.sum(dy * layer_norm(x, g, b)[0])
            arr[idx] = old
            num[idx] = (fp - fm) / (2 * eps)
        assert np.max(relative_error(grad, num)) < 1e-5


# ---- attention

def _attn_weights(rng, d):
    return {"w_qkv": rng.normal(size=(d, 3 * d)), "b_qkv": rng.normal(size=3 * d),
            "w_o": rng.normal(size=(d, d)), "b_o": rng.normal(size=d)}


def test_split_merge_roundtrip(rng):
    x = rng.normal(size=(2, 5, 8))
    assert np.array_equal(merge_heads(split_heads(x, 4)), x)
    with pytest.raises(ValueError):
        split_heads(x, 3)


def test_attention_single_token_is_value_path(rng):
    d = 8
    w = _attn_weights(rng, d)
    x = rng.normal(size=(1, d))
    y, _ = causal_self_attention(x, w, heads=4)
    v = x @ w["w_qkv"][:, 2 * d:] + w["b_qkv"][2 * d:]
    np.testing.assert_allclose(y, v @ w["w_o"] + w["b_o"], rtol=1e-12)


def test_attention_causal_masking(rng):
    d, T = 8, 6
    w = _attn_weights(rng, d)
    x = rng.normal(size=(T, d))
    y, _ = causal_self_attention(x, w, heads=4)
    for j in range(T - 1):
        x2 = x.copy()
        x2[j + 1:] += rng.normal(size=(T - j - 1, d))
        y2, _ = causal_self_attention(x2, w, heads=4)
        assert np.array_equal(y2[:j + 1], y[:j + 1])


def test_attention_query_offset_matches_full(rng):
    q = rng.normal(size=(2, 5, 4))
    k = rng.normal(size=(2, 5, 4))
    full, _ = attention_core(q, k, k)
    tail, _ = attention_core(q[:, 3:], k, k, q_start=3)
    np.testing.assert_allclose(tail, full[:, 3:], rtol=1e-13)


def test_attention_full_jacobian(rng):
    T, d = 3, 4
    w = _attn_weights(rng, d)
    x = rng.normal(size=(T, d))
    y, cache = causal_self_attention(x, w, heads=2)
    eps = 1e-6
    for o in np.ndindex(y.shape):
        dy = np.zeros_like(y)
        dy[o] = 1.0
        dx, grads = causal_self_attention_backward(dy, cache)
        num = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += eps
            xm[idx] -= eps
            num[idx] = (causal_self_attention(xp, w, 2)[0][o]
                        - causal_self_attention(xm, w, 2)[0][o]) / (2 * eps)
        err = relative_error(dx, num)
        assert np.max(err) < 1e-4


def test_attention_weight_grads(rng):
    T, d = 4, 4
    w = {k: Parameter(v) for k, v in _attn_weights(rng, d).items()}
    x = rng.normal(size=(T, d))
    dy = rng.normal(size=(T, d))

    def loss(backward=False):
        vals = {k: p.value for k, p in w.items()}
        y, cache = causal_self_attention(x, vals, heads=2)
        if backward:
            _, g = causal_self_attention_backward(dy, cache)
            for k in w:
                w[k].grad[...] = g[k]
        return float(np.sum(dy * y))

    assert grad_check(loss, w, epsilon=1e-6).passed


# ---- optimiser

def test_adam_zero_gradient_no_move():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Adam([p], lr=0.1)
    adam_step([p], opt)
    assert np.array_equal(p.value, [1.0, -2.0])


def test_adam_first_step_is_lr():
    p = Parameter(np.array([0.0]))
    opt = Adam([p], lr=1e-3)
    p.grad[...] = 1.0
    opt.step()
    assert abs(p.value[0] + 1e-3) < 1e-10


def test_adam_decreases_quadratic():
    p = Parameter(np.array([1.0]))
    opt = Adam([p], lr=0.05)
    vals = []
    for _ in range(10):
        opt.zero_grad()
        p.grad += 2 * p.value
        opt.step()
        vals.append(float(p.value[0] ** 2))
    assert all(b < a for a, b in zip([1.0] + vals, vals))


def test_adam_moments_match_shapes():
    ps = [Parameter(np.ones((2, 3))), Parameter(np.ones(4))]
    opt = Adam(ps)
    assert [m.shape for m in opt.m] == [p.shape for p in ps]
    with pytest.raises(ValueError):
        adam_step(ps[:1], opt)


def test_cosine_schedule():
    s = CosineSchedule(1e-3, 100, 1e-5)
    assert s(0) == 1e-3
    assert s(100) == 1e-5
    assert abs(s(50) - (1e-5 + 0.5 * (1e-3 - 1e-5))) < 1e-18
    lrs = [s(t) for t in range(101)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_adam_uses_schedule():
    p = Parameter(np.zeros(1))
    opt = Adam([p], lr=1.0, total_steps=4)
    got = []
    for _ in range(4):
        p.grad[...] = 1.0
        got.append(opt.step())
    np.testing.assert_allclose(got, [CosineSchedule(1.0, 4)(t) for t in range(4)])


# ---- grad check

def test_grad_check_linear_exact(rng):
    w = Parameter(rng.normal(size=(3, 2)))
    c = rng.normal(size=(3, 2))

    def loss(backward=False):
        if backward:
            w.grad[...] = c
        return float(np.sum(c * w.value))

    rep = grad_check(loss, {"w": w})
    assert rep.max_error < 1e-9


def test_grad_check_catches_sign_flip(rng):
    w = Parameter(rng.normal(size=4))

    def loss(backward=False):
        if backward:
            w.grad[...] = -2 * w.value       # wrong sign
        return float(np.sum(w.value ** 2))

    rep = grad_check(loss, {"w": w})
    assert rep.max_error > 1e-1 and not rep.passed


def test_mlp_grad_check(rng):
    for act in ("relu", "tanh", "gelu"):
        net = MLP((3, 5, 2), act, members=2, seeds=[1, 2])
        x = rng.normal(size=(4, 3))
        t = rng.normal(size=(2, 4, 2))

        def loss(backward=False):
            for p in net.parameters():
                p.zero_grad()
            y = net.forward(x, keep_cache=backward)
            if backward:
                net.backward(2 * (y - t))
            return float(np.sum((y - t) ** 2))

        assert grad_check(loss, net.params, epsilon=1e-6).passed, act


def test_mlp_members_independent():
    net = MLP((2, 4, 1), "relu", members=3, seeds=[0, 1, 2])
    w = net.params["w0"].value
    assert not np.array_equal(w[0], w[1])
    again = MLP((2, 4, 1), "relu", members=3, seeds=[0, 1, 2])
    assert np.array_equal(w, again.params["w0"].value)
