"""Tensor core: forward semantics, gradient soundness, adjointness, RNG."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import vptr.tensor as T
from vptr.tensor import (Rng, Tensor, concat, conv2d, conv2d_transposed,
                         finite_diff_check, gelu, layer_norm, leaky_relu, log,
                         logsumexp_last, matmul, no_grad, relu, sigmoid,
                         softmax_last, softplus, t_abs, take_rows, tanh)

F64 = np.float64


def t64(arr, **kw):
    return Tensor(np.asarray(arr, dtype=F64), **kw)


def rand64(rng, *shape):
    return Tensor(rng.normal(shape, dtype=F64))


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    rng = Rng(1)
    a = Tensor(rng.normal((4, 4), dtype=F64))
    out = matmul(a, t64(np.eye(4)))
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_hand_2x2():
    out = matmul(t64([[1, 2], [3, 4]]), t64([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_grad_is_ones_bT():
    rng = Rng(2)
    a = Tensor(rng.normal((3, 5), dtype=F64), requires_grad=True)
    b = Tensor(rng.normal((5, 4), dtype=F64))
    matmul(a, b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 4)) @ b.data.T, rtol=1e-12)
    err = finite_diff_check(lambda t: matmul(t, b).sum(), a, h=1e-5)
    assert err < 1e-6


def test_matmul_batch_broadcast():
    rng = Rng(3)
    a = rand64(rng, 2, 3, 4, 5)
    b = rand64(rng, 3, 5, 6)
    out = matmul(a, b)
    assert out.shape == (2, 3, 4, 6)
    expect = np.einsum("bcik,ckj->bcij", a.data, b.data)
    np.testing.assert_allclose(out.data, expect, rtol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_uniform():
    out = softmax_last(t64([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-12)


def test_softmax_large_logit_stable():
    out = softmax_last(t64([1000.0, 0.0]))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)


def test_softmax_grad_random_len7():
    rng = Rng(4)
    x = rand64(rng, 7)
    w = rng.normal((7,), dtype=F64)  # random linear functional => JVP check
    err = finite_diff_check(lambda t: (softmax_last(t) * Tensor(w)).sum(), x)
    assert err < 1e-6


def test_softmax_fully_masked_row_zeros():
    x = t64([[1.0, 2.0], [3.0, 4.0]])
    mask = np.array([[True, True], [False, False]])
    out = softmax_last(x, mask=mask)
    assert np.allclose(out.data[0].sum(), 1.0)
    np.testing.assert_array_equal(out.data[1], [0.0, 0.0])


def test_softmax_masked_grad():
    rng = Rng(5)
    x = rand64(rng, 3, 5)
    mask = rng.uniform((3, 5)) > 0.3
    mask[0] = False  # one fully masked row
    w = rng.normal((3, 5), dtype=F64)
    err = finite_diff_check(
        lambda t: (softmax_last(t, mask=mask) * Tensor(w)).sum(), x)
    assert err < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=9))
def test_softmax_rows_sum_to_one(vals):
    out = softmax_last(t64(vals))
    assert abs(out.data.sum() - 1.0) < 1e-6


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------

def test_layer_norm_constant_input():
    x = t64(np.full((2, 8), 3.7))
    out = layer_norm(x, t64(np.ones(8)), t64(np.zeros(8)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-4)


def test_layer_norm_two_point():
    out = layer_norm(t64([1.0, 3.0]), t64(np.ones(2)), t64(np.zeros(2)),
                     eps=1e-12)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-5)


def test_layer_norm_normalizes_channel_axis():
    rng = Rng(6)
    x = rand64(rng, 4, 3, 16)
    out = layer_norm(x, t64(np.ones(16)), t64(np.zeros(16)))
    np.testing.assert_allclose(out.data.mean(-1), 0.0, atol=1e-7)
    np.testing.assert_allclose(out.data.var(-1), 1.0, atol=1e-4)


def test_layer_norm_grad():
    rng = Rng(7)
    x = rand64(rng, 3, 6)
    gain = Tensor(rng.normal((6,), dtype=F64))
    bias = Tensor(rng.normal((6,), dtype=F64))
    w = rng.normal((3, 6), dtype=F64)

    def f(ts):
        return (layer_norm(ts[0], ts[1], ts[2]) * Tensor(w)).sum()

    assert finite_diff_check(f, [x, gain, bias]) < 1e-5


# ---------------------------------------------------------------------------
# conv2d: naive loop oracle
# ---------------------------------------------------------------------------

def naive_conv2d(x, w, stride, padding, groups):
    b, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((b, cout, oh, ow), dtype=x.dtype)
    co_g = cout // groups
    for bi in range(b):
        for co in range(cout):
            gi = co // co_g
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cin_g):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (xp[bi, gi * cin_g + ci,
                                           i * stride + ki, j * stride + kj]
                                        * w[co, ci, ki, kj])
                    out[bi, co, i, j] = acc
    return out


def test_conv2d_1x1_unit_kernel_identity():
    rng = Rng(8)
    x = rand64(rng, 1, 1, 5, 5)
    out = conv2d(x, t64(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_ones_kernel_edge_counts():
    x = t64(np.ones((1, 1, 5, 5)))
    k = t64(np.ones((1, 1, 3, 3)))
    out = conv2d(x, k, padding=1, groups=1).data[0, 0]
    assert out[2, 2] == 9
    assert out[0, 2] == 6 and out[2, 0] == 6
    assert out[0, 0] == 4 and out[4, 4] == 4


@pytest.mark.parametrize("shape,kshape,stride,padding,groups", [
    ((2, 3, 6, 7), (4, 3, 3, 3), 1, 1, 1),
    ((1, 4, 8, 8), (6, 4, 3, 3), 2, 1, 1),
    ((2, 6, 5, 5), (6, 1, 3, 3), 1, 1, 6),   # depth-wise
    ((1, 4, 6, 6), (8, 2, 3, 3), 1, 0, 2),   # grouped
    ((1, 2, 9, 9), (3, 2, 4, 4), 2, 2, 1),
])
def test_conv2d_matches_naive(shape, kshape, stride, padding, groups):
    rng = Rng(9)
    x = rng.normal(shape, dtype=F64)
    w = rng.normal(kshape, dtype=F64)
    out = conv2d(Tensor(x), Tensor(w), stride, padding, groups)
    np.testing.assert_allclose(
        out.data, naive_conv2d(x, w, stride, padding, groups), atol=1e-10)


@pytest.mark.parametrize("shape,kshape,stride,padding,groups", [
    ((2, 2, 5, 5), (3, 2, 3, 3), 1, 1, 1),
    ((1, 2, 6, 6), (4, 2, 3, 3), 2, 1, 1),
    ((1, 4, 4, 4), (4, 1, 3, 3), 1, 1, 4),
])
def test_conv2d_grads(shape, kshape, stride, padding, groups):
    rng = Rng(10)
    x = Tensor(rng.normal(shape, dtype=F64))
    w = Tensor(rng.normal(kshape, dtype=F64))
    coef = rng.normal((1,), dtype=F64)[0]

    def f(ts):
        y = conv2d(ts[0], ts[1], stride, padding, groups)
        return (y * y).sum() * float(coef)

    assert finite_diff_check(f, [x, w]) < 1e-5


def test_conv2d_geometry_error():
    with pytest.raises(ValueError, match="geometry"):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))
    with pytest.raises(ValueError, match="groups"):
        conv2d(Tensor(np.zeros((1, 4, 8, 8))), Tensor(np.zeros((4, 3, 3, 3))),
               groups=2)


# ---------------------------------------------------------------------------
# conv2d_transposed
# ---------------------------------------------------------------------------

def test_convt_1x1_unit_identity():
    rng = Rng(11)
    x = rand64(rng, 1, 1, 4, 4)
    out = conv2d_transposed(x, t64(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x.data)


def test_convt_output_shape_formula():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    w = Tensor(np.zeros((3, 2, 4, 4)))
    out = conv2d_transposed(x, w, stride=2, padding=1)
    assert out.shape == (1, 2, 8, 8)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_convt_is_adjoint_of_conv(stride, padding):
    rng = Rng(12)
    w = rng.normal((3, 2, 4, 4), dtype=F64)  # (C_out, C_in, kh, kw) for conv
    x = rng.normal((2, 2, 6, 6), dtype=F64)
    cx = conv2d(Tensor(x), Tensor(w), stride, padding).data
    y = rng.normal(cx.shape, dtype=F64)
    # adjoint uses the same array viewed as (C_in=3, C_out=2, kh, kw)
    cty = conv2d_transposed(Tensor(y), Tensor(w), stride, padding).data
    assert cty.shape == x.shape
    lhs = float((cx * y).sum())
    rhs = float((x * cty).sum())
    assert abs(lhs - rhs) / (abs(lhs) + 1e-12) < 1e-6


def test_convt_grads():
    rng = Rng(13)
    x = Tensor(rng.normal((1, 3, 4, 4), dtype=F64))
    w = Tensor(rng.normal((3, 2, 4, 4), dtype=F64))

    def f(ts):
        y = conv2d_transposed(ts[0], ts[1], stride=2, padding=1)
        return (y * y).sum()

    assert finite_diff_check(f, [x, w]) < 1e-5


def test_convt_geometry_error():
    with pytest.raises(ValueError, match="geometry"):
        conv2d_transposed(Tensor(np.zeros((1, 1, 2, 2))),
                          Tensor(np.zeros((1, 1, 1, 1))), stride=1, padding=3)


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6, dtype=F64).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_half_square_gives_x():
    rng = Rng(14)
    x = Tensor(rng.normal((4, 3), dtype=F64), requires_grad=True)
    ((x * x).sum() * 0.5).backward()
    np.testing.assert_allclose(x.grad, x.data, rtol=1e-12)


def test_backward_rejects_nonscalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_backward_releases_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * 2.0).sum()
    assert y._grad_fn is not None
    y.backward()
    assert y._grad_fn is None and y._parents == ()


def test_backward_accumulates_on_reuse():
    x = Tensor(np.ones(3, dtype=F64), requires_grad=True)
    y = x * 2.0
    (y.sum() + (y * y).sum()).backward()  # x used via two paths
    np.testing.assert_allclose(x.grad, 2.0 + 8.0 * np.ones(3))


def test_backward_chain_composite_vs_fd():
    rng = Rng(15)
    x = Tensor(rng.normal((3, 4), dtype=F64))
    w = Tensor(rng.normal((4, 4), dtype=F64))

    def f(ts):
        h = softmax_last(matmul(ts[0], ts[1]).reshape(2, 6))
        return (h * h).sum()

    assert finite_diff_check(f, [x, w]) < 1e-6


def test_no_grad_suppresses_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 3.0).sum()
    assert y._grad_fn is None


# ---------------------------------------------------------------------------
# finite_diff_check itself
# ---------------------------------------------------------------------------

def test_fd_check_sum_exact_zero():
    # dyadic inputs and a power-of-two step make the quotient exact
    x = t64([1.0, 2.0, 3.0])
    assert finite_diff_check(lambda t: t.sum(), x, h=2.0 ** -17) == 0.0


def test_fd_check_sum_of_squares():
    x = t64([1.0, 2.0, 3.0])
    assert finite_diff_check(lambda t: (t * t).sum(), x, h=1e-5) < 1e-9


def test_fd_check_quadratic_form():
    rng = Rng(16)
    q = rng.normal((5, 5), dtype=F64)
    x = rand64(rng, 5, 1)
    err = finite_diff_check(
        lambda t: matmul(matmul(t.transpose(), Tensor(q)), t).sum(), x)
    assert err < 1e-8


# ---------------------------------------------------------------------------
# gradient soundness across the op set (3 random shapes each)
# ---------------------------------------------------------------------------

SHAPES = [(3,), (2, 4), (2, 3, 2)]


def _pointwise_cases():
    yield "mul", lambda t: (t * t).sum()
    yield "div", lambda t: (t / (t * t + 2.0)).sum()
    yield "pow", lambda t: ((t * t + 1.0) ** 1.7).sum()
    yield "abs", lambda t: t_abs(t).sum()
    yield "exp", lambda t: T.exp(t * 0.3).sum()
    yield "log", lambda t: log(t * t + 1.5).sum()
    yield "sigmoid", lambda t: sigmoid(t).sum()
    yield "tanh", lambda t: tanh(t).sum()
    yield "relu", lambda t: relu(t + 0.05).sum()
    yield "leaky_relu", lambda t: leaky_relu(t + 0.05).sum()
    yield "gelu", lambda t: gelu(t).sum()
    yield "softplus", lambda t: softplus(t).sum()
    yield "mean", lambda t: (t.mean() * 3.0 + t.mean(axis=0).sum())
    yield "sum_axis", lambda t: (t.sum(axis=0, keepdims=True) ** 2.0).sum()
    yield "reshape", lambda t: (t.reshape(-1) ** 2.0).sum()
    yield "slice", lambda t: (t[..., 1:] * t[..., 1:]).sum()
    yield "logsumexp", lambda t: logsumexp_last(t).sum()


@pytest.mark.parametrize("name,f", list(_pointwise_cases()),
                         ids=[n for n, _ in _pointwise_cases()])
def test_gradient_soundness_pointwise(name, f):
    rng = Rng(17)
    for shape in SHAPES:
        x = Tensor(rng.normal(shape, dtype=F64))
        assert finite_diff_check(f, x) < 1e-5, f"{name} @ {shape}"


def test_gradient_soundness_structural():
    rng = Rng(18)
    a = Tensor(rng.normal((3, 4), dtype=F64))
    b = Tensor(rng.normal((3, 4), dtype=F64))
    err = finite_diff_check(
        lambda ts: (concat([ts[0], ts[1]], axis=1) ** 2.0).sum(), [a, b])
    assert err < 1e-5

    x = Tensor(rng.normal((2, 3, 4), dtype=F64))
    err = finite_diff_check(
        lambda t: (t.transpose(2, 0, 1)[0] ** 2.0).sum(), x)
    assert err < 1e-5

    tab = Tensor(rng.normal((5, 3), dtype=F64))
    idx = np.array([0, 2, 2, 4, 1])
    err = finite_diff_check(lambda t: (take_rows(t, idx) ** 2.0).sum(), tab)
    assert err < 1e-5

    y = Tensor(rng.normal((4,), dtype=F64))
    err = finite_diff_check(
        lambda t: T.broadcast_to(t.reshape(1, 4), (3, 4)).sum(axis=0).sum(), y)
    assert err < 1e-5


# ---------------------------------------------------------------------------
# adjointness of linear ops: <L x, y> == <x, L^T y> with L^T from backward
# ---------------------------------------------------------------------------

def _vjp_adjoint_gap(linop, x_shape, rng):
    x = Tensor(rng.normal(x_shape, dtype=F64), requires_grad=True)
    out = linop(x)
    y = rng.normal(out.shape, dtype=F64)
    lhs = float((out.data * y).sum())
    out.backward(y)
    rhs = float((x.data * x.grad).sum())
    return abs(lhs - rhs) / (abs(lhs) + abs(rhs) + 1e-12)


def test_adjointness_of_linear_ops():
    rng = Rng(19)
    b = Tensor(rng.normal((4, 5), dtype=F64))
    w = Tensor(rng.normal((2, 3, 3, 3), dtype=F64))
    wt = Tensor(rng.normal((3, 2, 3, 3), dtype=F64))
    cases = [
        (lambda t: matmul(t, b), (3, 4)),
        (lambda t: t.reshape(6, 2), (3, 4)),
        (lambda t: t.transpose(1, 0), (3, 4)),
        (lambda t: t.sum(axis=1), (3, 4)),
        (lambda t: T.broadcast_to(t, (5, 3, 4)), (3, 4)),
        (lambda t: conv2d(t, w, stride=1, padding=1), (2, 3, 5, 5)),
        (lambda t: conv2d_transposed(t, wt, stride=2, padding=1), (2, 3, 4, 4)),
        (lambda t: t[:, 1:3], (3, 4)),
    ]
    for linop, shape in cases:
        assert _vjp_adjoint_gap(linop, shape, rng) < 1e-6


# ---------------------------------------------------------------------------
# determinism and RNG
# ---------------------------------------------------------------------------

def _forward_and_grad(seed):
    rng = Rng(seed)
    x = Tensor(rng.normal((4, 6)), requires_grad=True)
    w = Tensor(rng.normal((6, 6)), requires_grad=True)
    y = (softmax_last(matmul(x, w)) ** 2.0).sum()
    y.backward()
    return y.item(), x.grad.copy(), w.grad.copy()

def test_forward_and_grad_bitwise_deterministic():
    v1, g1, h1 = _forward_and_grad(123)
    v2, g2, h2 = _forward_and_grad(123)
    assert v1 == v2
    np.testing.assert_array_equal(g1, g2)
    np.testing.assert_array_equal(h1, h2)


def test_rng_same_key_same_values():
    a = Rng(42, stream=7).normal((10,))
    b = Rng(42, stream=7).normal((10,))
    np.testing.assert_array_equal(a, b)


def test_rng_streams_independent():
    a = Rng(42, stream=0).normal((10,))
    b = Rng(42, stream=1).normal((10,))
    assert not np.array_equal(a, b)


def test_rng_draw_count_advances():
    r = Rng(42)
    a = r.normal((5,))
    b = r.normal((5,))
    assert not np.array_equal(a, b)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 63), st.integers(0, 2 ** 31))
def test_rng_reproducible_property(seed, stream):
    a = Rng(seed, stream).uniform((4,))
    b = Rng(seed, stream).uniform((4,))
    np.testing.assert_array_equal(a, b)
