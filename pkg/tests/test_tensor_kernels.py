"""Kernel-level checks: frozen examples, math identities, and the
finite-difference oracle on every differentiable op."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mitseg.errors import DataError, ShapeError
from mitseg.gradcheck import gradcheck
from mitseg.tensor import (Tape, Tensor, add, bilinear_resize, concat, conv2d,
                           cross_entropy, gelu, layer_norm, linear, matmul,
                           reduce_sum, reshape, scale, softmax, transpose)

KERNEL_TOL = 1e-5


def rnd(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# ---------------------------------------------------------------------------
# conv2d

def naive_conv2d(x, w, b, stride=1, pad=0, groups=1):
    """Loop reference: plain cross-correlation, one output element at a time."""
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    og = cout // groups
    for ni in range(n):
        for oc in range(cout):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, g * cg:(g + 1) * cg,
                               i * stride:i * stride + kh,
                               j * stride:j * stride + kw]
                    out[ni, oc, i, j] = (patch * w[oc]).sum() + b[oc]
    return out


def test_conv2d_overlap_counting():
    x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    b = Tensor(np.zeros(1, dtype=np.float32))
    y = conv2d(x, w, b, stride=1, pad=1).data[0, 0]
    assert y[1, 1] == 9.0
    assert y[0, 0] == y[0, 2] == y[2, 0] == y[2, 2] == 4.0


def test_conv2d_identity_kernel():
    x = Tensor(rnd(2, 3, 5, 5).astype(np.float32))
    w = np.zeros((3, 3, 1, 1), dtype=np.float32)
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    y = conv2d(x, Tensor(w), Tensor(np.zeros(3, dtype=np.float32)))
    np.testing.assert_array_equal(y.data, x.data)


@pytest.mark.parametrize("shape,wshape,stride,pad,groups", [
    ((1, 2, 5, 5), (3, 2, 3, 3), 1, 1, 1),
    ((2, 4, 6, 6), (4, 1, 3, 3), 1, 1, 4),
    ((1, 3, 7, 6), (2, 3, 3, 3), 2, 1, 1),
    ((1, 4, 8, 8), (6, 2, 2, 2), 2, 0, 2),
])
def test_conv2d_matches_naive(shape, wshape, stride, pad, groups):
    x = rnd(*shape, seed=1)
    w = rnd(*wshape, seed=2)
    b = rnd(wshape[0], seed=3)
    got = conv2d(t64(x), t64(w), t64(b), stride=stride, pad=pad, groups=groups)
    want = naive_conv2d(x, w, b, stride=stride, pad=pad, groups=groups)
    np.testing.assert_allclose(got.data, want, rtol=1e-12, atol=1e-12)


def test_conv2d_depthwise_equals_per_channel():
    x = rnd(2, 4, 6, 6, seed=4)
    w = rnd(4, 1, 3, 3, seed=5)
    b = rnd(4, seed=6)
    joint = conv2d(t64(x), t64(w), t64(b), stride=1, pad=1, groups=4).data
    for c in range(4):
        single = conv2d(t64(x[:, c:c + 1]), t64(w[c:c + 1]), t64(b[c:c + 1]),
                        stride=1, pad=1).data
        np.testing.assert_allclose(joint[:, c:c + 1], single, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("shape,wshape,stride,pad,groups,seed", [
    ((2, 4, 8, 8), (4, 1, 3, 3), 1, 1, 4, 0),
    ((1, 2, 5, 5), (3, 2, 3, 3), 1, 1, 1, 1),
    ((1, 3, 6, 6), (4, 3, 2, 2), 2, 0, 1, 2),
    ((1, 4, 4, 4), (4, 2, 3, 3), 1, 1, 2, 3),
])
def test_conv2d_gradcheck(shape, wshape, stride, pad, groups, seed):
    r = np.random.default_rng(seed)
    x, w = r.standard_normal(shape), r.standard_normal(wshape)
    b = r.standard_normal(wshape[0])
    err = gradcheck(lambda a, c, d: conv2d(a, c, d, stride=stride, pad=pad, groups=groups),
                    [x, w, b], seed=seed)
    assert err < KERNEL_TOL


def test_conv2d_shape_errors():
    x = Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32))
    w = Tensor(np.zeros((2, 2, 3, 3), dtype=np.float32))
    b = Tensor(np.zeros(2, dtype=np.float32))
    with pytest.raises(ShapeError):
        conv2d(x, w, b)
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(np.zeros((2, 3, 3, 3), dtype=np.float32)), b, groups=2)


# ---------------------------------------------------------------------------
# linear / matmul

def test_linear_identity_and_bias():
    x = Tensor(np.array([[1.0, 2.0]], dtype=np.float32))
    w = Tensor(np.eye(2, dtype=np.float32))
    y = linear(x, w, Tensor(np.zeros(2, dtype=np.float32)))
    np.testing.assert_array_equal(y.data, x.data)
    y2 = linear(x, w, Tensor(np.array([3.0, 4.0], dtype=np.float32)))
    np.testing.assert_array_equal(y2.data, [[4.0, 6.0]])


@pytest.mark.parametrize("seed,shape,cout", [(0, (5, 7), 3), (1, (2, 3, 4), 6), (2, (8, 2), 2)])
def test_linear_gradcheck(seed, shape, cout):
    r = np.random.default_rng(seed)
    arrays = [r.standard_normal(shape), r.standard_normal((shape[-1], cout)),
              r.standard_normal(cout)]
    assert gradcheck(lambda x, w, b: linear(x, w, b), arrays, seed=seed) < KERNEL_TOL


def test_linear_dim_mismatch():
    with pytest.raises(ShapeError):
        linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(5)))


def test_matmul_identity_and_scalars():
    a = Tensor(rnd(3, 3).astype(np.float32))
    eye = Tensor(np.eye(3, dtype=np.float32))
    np.testing.assert_allclose(matmul(a, eye).data, a.data, rtol=1e-6)
    s = matmul(Tensor(np.full((1, 1), 3.0)), Tensor(np.full((1, 1), 4.0)))
    assert s.item() == 12.0


@pytest.mark.parametrize("seed,ashape,bshape", [
    (0, (2, 3, 4), (2, 4, 5)),
    (1, (3, 2), (2, 3)),
    (2, (2, 2, 3, 4), (4, 2)),   # broadcast on the right operand
])
def test_matmul_gradcheck(seed, ashape, bshape):
    r = np.random.default_rng(seed)
    arrays = [r.standard_normal(ashape), r.standard_normal(bshape)]
    assert gradcheck(matmul, arrays, seed=seed) < KERNEL_TOL


# ---------------------------------------------------------------------------
# layer_norm / gelu / softmax

def test_layer_norm_constant_row_is_zero():
    x = Tensor(np.full((2, 8), 3.5, dtype=np.float32))
    y = layer_norm(x, Tensor(np.ones(8, dtype=np.float32)),
                   Tensor(np.zeros(8, dtype=np.float32)))
    np.testing.assert_allclose(y.data, 0.0, atol=1e-4)


def test_layer_norm_two_point_row():
    y = layer_norm(t64([[1.0, 3.0]]), t64(np.ones(2)), t64(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(y.data, [[-1.0, 1.0]], atol=1e-5)


def test_layer_norm_moments():
    x = Tensor(rnd(4, 16, seed=9).astype(np.float32) * 5.0)
    y = layer_norm(x, Tensor(np.ones(16, dtype=np.float32)),
                   Tensor(np.zeros(16, dtype=np.float32))).data
    assert np.abs(y.mean(axis=-1)).max() < 1e-6
    assert np.abs(y.var(axis=-1) - 1.0).max() < 1e-4


@pytest.mark.parametrize("seed,shape", [(0, (4, 16)), (1, (2, 3, 8)), (2, (1, 5))])
def test_layer_norm_gradcheck(seed, shape):
    r = np.random.default_rng(seed)
    arrays = [r.standard_normal(shape) * 2.0, r.standard_normal(shape[-1]),
              r.standard_normal(shape[-1])]
    assert gradcheck(lambda x, g, b: layer_norm(x, g, b), arrays, seed=seed) < KERNEL_TOL


def test_gelu_at_zero():
    assert gelu(Tensor(np.zeros(1))).item() == 0.0


@given(st.floats(min_value=-8.0, max_value=8.0, allow_nan=False))
@settings(max_examples=50, deadline=None)
def test_gelu_reflection_identity(v):
    # x*cdf(x) - (-x)*cdf(-x) = x*(cdf(x) + cdf(-x)) = x
    x = np.array([v], dtype=np.float64)
    diff = gelu(t64(x)).data - gelu(t64(-x)).data
    np.testing.assert_allclose(diff, x, atol=1e-12)


@pytest.mark.parametrize("seed,shape", [(0, (7,)), (1, (3, 5)), (2, (2, 2, 4))])
def test_gelu_gradcheck(seed, shape):
    arrays = [np.random.default_rng(seed).standard_normal(shape)]
    assert gradcheck(gelu, arrays, step=1e-3, seed=seed) < KERNEL_TOL


def test_softmax_uniform_and_shift_invariance():
    y = softmax(Tensor(np.zeros((1, 4), dtype=np.float32)))
    np.testing.assert_allclose(y.data, 0.25, atol=1e-7)
    x = rnd(3, 9, seed=11)
    shifted = softmax(t64(x + 17.3)).data
    np.testing.assert_allclose(shifted, softmax(t64(x)).data, atol=1e-7)


def test_softmax_rows_are_distributions():
    y = softmax(t64(rnd(6, 10, seed=12) * 4.0)).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    assert (y > 0.0).all() and (y < 1.0).all()


@pytest.mark.parametrize("seed,shape", [(0, (3, 9)), (1, (2, 4, 5)), (2, (1, 6))])
def test_softmax_gradcheck(seed, shape):
    arrays = [np.random.default_rng(seed).standard_normal(shape)]
    assert gradcheck(softmax, arrays, seed=seed) < KERNEL_TOL


# ---------------------------------------------------------------------------
# bilinear_resize

def test_bilinear_same_size_is_identity():
    x = rnd(1, 2, 5, 7, seed=13)
    y = bilinear_resize(t64(x), 5, 7)
    np.testing.assert_allclose(y.data, x, atol=1e-12)


def test_bilinear_constant_preserved():
    x = Tensor(np.full((1, 3, 4, 4), 2.5))
    y = bilinear_resize(x, 8, 8)
    np.testing.assert_allclose(y.data, 2.5, atol=1e-12)


@pytest.mark.parametrize("seed,inshape,out", [
    (0, (1, 2, 4, 4), (8, 8)),
    (1, (2, 1, 6, 4), (3, 5)),
    (2, (1, 3, 5, 5), (5, 9)),
])
def test_bilinear_gradcheck(seed, inshape, out):
    arrays = [np.random.default_rng(seed).standard_normal(inshape)]
    assert gradcheck(lambda x: bilinear_resize(x, *out), arrays, seed=seed) < KERNEL_TOL


def test_bilinear_align_corners_hits_endpoints():
    x = np.arange(4.0).reshape(1, 1, 1, 4)
    y = bilinear_resize(t64(x), 1, 7, align_corners=True).data[0, 0, 0]
    np.testing.assert_allclose(y, np.linspace(0.0, 3.0, 7), atol=1e-12)


# ---------------------------------------------------------------------------
# structural ops

def test_reshape_transpose_round_trip():
    x = rnd(2, 3, 4, seed=14)
    assert np.array_equal(reshape(reshape(t64(x), (6, 4)), (2, 3, 4)).data, x)
    assert np.array_equal(transpose(transpose(t64(x), (2, 0, 1)), (1, 2, 0)).data, x)


def test_concat_forward_and_split_backward():
    a, b = rnd(1, 2, seed=15), rnd(1, 2, seed=16)
    y = concat([t64(a), t64(b)], axis=1)
    assert y.shape == (1, 4)
    np.testing.assert_array_equal(y.data, np.concatenate([a, b], axis=1))
    err = gradcheck(lambda u, v: concat([u, v], axis=1), [a, b])
    assert err < KERNEL_TOL


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_structural_gradcheck(seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 3, 4))
    err = gradcheck(lambda t: transpose(reshape(t, (2, 12)), (1, 0)), [x], seed=seed)
    assert err < KERNEL_TOL
    err = gradcheck(lambda a, b: add(scale(a, 0.7), b),
                    [r.standard_normal((2, 3)), r.standard_normal(3)], seed=seed)
    assert err < KERNEL_TOL


# ---------------------------------------------------------------------------
# cross_entropy

def test_cross_entropy_uniform_logits_is_log2():
    logits = Tensor(np.zeros((1, 2, 3, 3), dtype=np.float32))
    labels = np.zeros((1, 3, 3), dtype=np.int64)
    assert abs(cross_entropy(logits, labels).item() - np.log(2.0)) < 1e-6


def test_cross_entropy_confident_correct_goes_to_zero():
    labels = np.zeros((1, 2, 2), dtype=np.int64)
    logits = np.zeros((1, 2, 2, 2), dtype=np.float32)
    logits[:, 0] = 50.0
    assert cross_entropy(Tensor(logits), labels).item() < 1e-6


def test_cross_entropy_ignores_reserved_id():
    logits = Tensor(rnd(1, 3, 2, 2, seed=17).astype(np.float32))
    labels = np.full((1, 2, 2), 255, dtype=np.int64)
    labels[0, 0, 0] = 1
    scored = cross_entropy(logits, labels).item()
    solo = cross_entropy(Tensor(logits.data[:, :, :1, :1].copy()),
                         labels[:, :1, :1]).item()
    assert abs(scored - solo) < 1e-6
    with pytest.raises(DataError):
        cross_entropy(logits, np.full((1, 2, 2), 255, dtype=np.int64))
    with pytest.raises(DataError):
        cross_entropy(logits, np.full((1, 2, 2), 7, dtype=np.int64))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_cross_entropy_gradcheck(seed):
    r = np.random.default_rng(seed)
    logits = r.standard_normal((1, 2, 4, 4))
    labels = r.integers(0, 2, size=(1, 4, 4))
    labels[0, 0, 0] = 255
    err = gradcheck(lambda x: cross_entropy(x, labels), [logits], seed=seed)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# tape semantics

def test_backward_requires_scalar_without_seed():
    x = Tensor(rnd(2, 2), requires_grad=True)
    with Tape() as tape:
        y = scale(x, 2.0)
        with pytest.raises(ShapeError):
            tape.backward(y)


def test_backward_accumulates_on_repeat():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(scale(x, 3.0))
        tape.backward(loss)
        first = x.grad.copy()
        tape.backward(loss)
    np.testing.assert_allclose(first, 3.0)
    np.testing.assert_allclose(x.grad, 2.0 * first)


def test_grad_routed_through_fanout():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        y = add(scale(x, 1.0), scale(x, 1.0))   # uses x twice
        tape.backward(reduce_sum(y))
    np.testing.assert_allclose(x.grad, 2.0)


def test_no_recording_outside_tape():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = scale(x, 2.0)
    assert not y.requires_grad


def test_kernels_deterministic():
    x = rnd(2, 8, 6, 6, seed=18).astype(np.float32)
    w = rnd(4, 8, 3, 3, seed=19).astype(np.float32)
    b = rnd(4, seed=20).astype(np.float32)
    a = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
    bgain = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
    assert np.array_equal(a, bgain)
