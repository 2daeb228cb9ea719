import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from mirrordepth import tensor as T
from mirrordepth.gradcheck import grad_check
from mirrordepth.tensor import ContractError, DimensionError, Tensor


def naive_conv(x, w, b, s, p):
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    ho, wo = (h + 2 * p - k) // s + 1, (wd + 2 * p - k) // s + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                out[o, i, j] = np.sum(xp[:, i * s:i * s + k, j * s:j * s + k] * w[o]) + (b[o] if b is not None else 0)
    return out


def scatter_conv_t(x, w, s, p):
    c_in, h, wd = x.shape
    _, c_out, k, _ = w.shape
    full = np.zeros((c_out, (h - 1) * s + k, (wd - 1) * s + k))
    for c in range(c_in):
        for i in range(h):
            for j in range(wd):
                full[:, i * s:i * s + k, j * s:j * s + k] += x[c, i, j] * w[c]
    return full[:, p:full.shape[1] - p, p:full.shape[2] - p]


# ---------------------------------------------------------------- matmul


def test_matmul_examples():
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(np.eye(2))).data, np.eye(2))
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_grad_matches_ones_bT(rng):
    a = Tensor(rng.standard_normal((5, 7)), requires_grad=True)
    b = Tensor(rng.standard_normal((7, 3)), requires_grad=True)
    T.tsum(T.matmul(a, b)).backward()
    np.testing.assert_allclose(a.grad, np.ones((5, 3)) @ b.data.T, rtol=1e-5)
    rep = grad_check(lambda: T.tsum(T.matmul(a, b)), {"a": a, "b": b}, step=1e-3, tolerance=1e-4)
    assert rep.passed, str(rep)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------- convolutions


def test_conv2d_patch_embedding_shape():
    x = Tensor(np.zeros((3, 352, 352), np.float32))
    w = Tensor(np.zeros((768, 3, 16, 16), np.float32))
    assert T.conv2d(x, w, stride=16).shape == (768, 22, 22)


def test_conv2d_identity_kernel():
    x = Tensor(np.ones((1, 4, 4)))
    np.testing.assert_array_equal(T.conv2d(x, Tensor(np.ones((1, 1, 1, 1)))).data, x.data)


def test_conv2d_matches_naive_oracle(rng):
    x = rng.standard_normal((1, 5, 5))
    w = rng.standard_normal((2, 1, 3, 3))
    b = rng.standard_normal(2)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1).data
    np.testing.assert_allclose(got, naive_conv(x, w, b, 1, 1), atol=1e-5)


@given(c_in=st.integers(1, 3), c_out=st.integers(1, 3), h=st.integers(3, 7), k=st.integers(1, 3),
       s=st.integers(1, 3), p=st.integers(0, 2), seed=st.integers(0, 2**16))
@settings(max_examples=30)
def test_conv2d_oracle_property(c_in, c_out, h, k, s, p, seed):
    r = np.random.default_rng(seed)
    x, w = r.standard_normal((c_in, h, h + 1)), r.standard_normal((c_out, c_in, k, k))
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), stride=s, padding=p).data,
                               naive_conv(x, w, None, s, p), atol=1e-9)


def test_conv_transpose_decoder_shapes():
    x = Tensor(np.zeros((64, 22, 22), np.float32))
    y = T.conv_transpose2d(x, Tensor(np.zeros((64, 32, 4, 4), np.float32)), stride=4)
    assert y.shape == (32, 88, 88)
    z = T.conv_transpose2d(y, Tensor(np.zeros((32, 1, 4, 4), np.float32)), stride=4)
    assert z.shape == (1, 352, 352)


def test_conv_transpose_tiles_blocks():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    y = T.conv_transpose2d(Tensor(x), Tensor(np.ones((1, 1, 2, 2))), stride=2).data
    np.testing.assert_array_equal(y, np.kron(x[0], np.ones((2, 2)))[None])
    np.testing.assert_array_equal(y, scatter_conv_t(x, np.ones((1, 1, 2, 2)), 2, 0))


@given(c_in=st.integers(1, 3), c_out=st.integers(1, 3), h=st.integers(1, 5), k=st.integers(1, 4),
       s=st.integers(1, 4), p=st.integers(0, 1), seed=st.integers(0, 2**16))
@settings(max_examples=30)
def test_conv_transpose_scatter_oracle(c_in, c_out, h, k, s, p, seed):
    if (h - 1) * s + k - 2 * p < 1:
        return
    r = np.random.default_rng(seed)
    x, w = r.standard_normal((c_in, h, h)), r.standard_normal((c_in, c_out, k, k))
    np.testing.assert_allclose(T.conv_transpose2d(Tensor(x), Tensor(w), stride=s, padding=p).data,
                               scatter_conv_t(x, w, s, p), atol=1e-9)


@given(c_in=st.integers(1, 3), c_out=st.integers(1, 3), h=st.integers(3, 8), k=st.integers(1, 3),
       s=st.integers(1, 3), p=st.integers(0, 1), seed=st.integers(0, 2**16))
@settings(max_examples=40)
def test_conv_adjointness(c_in, c_out, h, k, s, p, seed):
    # exact adjoint pairing needs the stride to tile the padded input
    assume((h + 2 * p - k) % s == 0)
    r = np.random.default_rng(seed)
    x = r.standard_normal((c_in, h, h)).astype(np.float32)
    w = r.standard_normal((c_out, c_in, k, k)).astype(np.float32)
    y = T.conv2d(Tensor(x), Tensor(w), stride=s, padding=p)
    yr = r.standard_normal(y.shape).astype(np.float32)
    back = T.conv_transpose2d(Tensor(yr), Tensor(w), stride=s, padding=p).data
    assert back.shape == x.shape
    lhs = float(np.sum(y.data.astype(np.float64) * yr))
    rhs = float(np.sum(x.astype(np.float64) * back))
    assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs))


def test_conv_bad_output_size():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


# ---------------------------------------------------------------- normalisation & activations


def test_layer_norm_examples(rng):
    np.testing.assert_array_equal(T.layer_norm(Tensor(np.full((1, 4), 3.0))).data, np.zeros((1, 4)))
    np.testing.assert_allclose(T.layer_norm(Tensor([[1.0, 3.0]]), eps=0.0).data, [[-1.0, 1.0]])
    y = T.layer_norm(Tensor(rng.standard_normal((4, 8)))).data.astype(np.float64)
    assert np.all(np.abs(y.mean(axis=1)) < 1e-6)
    assert np.all(np.abs(y.var(axis=1) - 1) < 1e-4)


def test_softmax_examples(rng):
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)
    np.testing.assert_array_equal(T.softmax(Tensor([1000.0, 0.0])).data, [1.0, 0.0])
    s = T.softmax(Tensor(rng.standard_normal((3, 5)))).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_sums_to_one(xs):
    s = T.softmax(Tensor(np.array(xs))).data
    assert np.all(s >= 0) and abs(float(s.sum()) - 1.0) <= 1e-6


@given(st.lists(st.floats(-200, 200), min_size=1, max_size=12))
def test_softplus_positive(xs):
    assert np.all(T.softplus(Tensor(np.array(xs, np.float32))).data > 0)


def test_softplus_and_gelu_values():
    assert abs(T.softplus(Tensor(0.0)).item() - np.log(2)) < 1e-7
    assert abs(T.softplus(Tensor(50.0)).item() - 50.0) < 1e-6
    x = Tensor(np.array(0.0), requires_grad=True)
    y = T.gelu(x)
    assert y.item() == 0.0
    y.backward()
    assert abs(float(x.grad) - 0.5) < 1e-12
    rep = grad_check(lambda: T.gelu(x), {"x": x})
    assert rep.passed


def test_bilinear_resize_examples():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 22, 22)).astype(np.float32))
    assert T.bilinear_resize(x, 352, 352).shape == (1, 352, 352)
    np.testing.assert_array_equal(T.bilinear_resize(x, 22, 22).data, x.data)
    c = T.bilinear_resize(Tensor(np.full((2, 5, 7), 3.25, np.float32)), 13, 4).data
    np.testing.assert_allclose(c, 3.25, atol=1e-6)


# ---------------------------------------------------------------- backward & tape


def test_backward_sum_and_quadratic(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
    x.zero_grad()
    (T.tsum(x * x) * 0.5).backward()
    np.testing.assert_allclose(x.grad, x.data, rtol=1e-6)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_take_accumulates_duplicate_indices():
    x = Tensor(np.arange(3.0), requires_grad=True)
    T.tsum(T.take(x, np.array([0, 0, 2]))).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


def test_broadcast_only_trailing():
    T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))


def test_log_rejects_nonpositive():
    with pytest.raises(ContractError):
        T.log(Tensor([1.0, 0.0]))


def test_frozen_leaf_gets_no_grad(rng):
    a = Tensor(rng.standard_normal(3), requires_grad=True)
    b = Tensor(rng.standard_normal(3))
    T.tsum(a * b).backward()
    assert b.grad is None
    np.testing.assert_array_equal(a.grad, b.data)


def test_no_grad_builds_no_tape():
    a = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = a * 3.0
    assert not y.requires_grad and y._parents == ()


def test_forward_and_backward_deterministic(rng):
    x0 = rng.standard_normal((2, 6, 6)).astype(np.float32)
    w0 = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)

    def run():
        x, w = Tensor(x0, requires_grad=True), Tensor(w0, requires_grad=True)
        y = T.tsum(T.gelu(T.conv2d(x, w, padding=1)))
        y.backward()
        return y.data, x.grad, w.grad

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


# ---------------------------------------------------------------- per-primitive finite differences

SHAPES = st.tuples(st.integers(1, 4), st.integers(1, 5))


@given(shape=SHAPES, seed=st.integers(0, 2**16))
@settings(max_examples=20)
def test_elementwise_grads_random_shapes(shape, seed):
    r = np.random.default_rng(seed)
    a = Tensor(r.standard_normal(shape), requires_grad=True)
    p = Tensor(np.abs(r.standard_normal(shape)) + 0.5, requires_grad=True)
    w = r.standard_normal(shape)
    f = lambda: T.tsum((T.gelu(a) + T.softplus(a) * T.exp(a * 0.3) + T.log(p) + T.sqrt(p) - a * p) * Tensor(w))
    assert grad_check(f, {"a": a, "p": p}).passed


@given(m=st.integers(1, 4), k=st.integers(1, 5), n=st.integers(1, 4), seed=st.integers(0, 2**16))
@settings(max_examples=20)
def test_matmul_layernorm_softmax_grads_random_shapes(m, k, n, seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.standard_normal((m, k)), requires_grad=True)
    w = Tensor(r.standard_normal((k, n)), requires_grad=True)
    g = Tensor(r.standard_normal(n), requires_grad=True)
    wt = r.standard_normal((m, n))
    f = lambda: T.tsum(T.softmax(T.layer_norm(T.matmul(x, w), g, None), axis=-1) * Tensor(wt))
    assert grad_check(f, {"x": x, "w": w, "g": g}).passed


@given(c=st.integers(1, 3), h=st.integers(2, 5), k=st.integers(1, 3), s=st.integers(1, 3), seed=st.integers(0, 2**16))
@settings(max_examples=20)
def test_conv_grads_random_shapes(c, h, k, s, seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.standard_normal((c, h, h)), requires_grad=True)
    w = Tensor(r.standard_normal((2, c, k, k)), requires_grad=True)
    wt = Tensor(r.standard_normal((c, 2, k, k)), requires_grad=True)
    y = T.conv2d(x, w, stride=s, padding=1)
    pr1 = r.standard_normal(y.shape)
    z = T.conv_transpose2d(x, wt, stride=s)
    pr2 = r.standard_normal(z.shape)
    f = lambda: T.tsum(T.conv2d(x, w, stride=s, padding=1) * Tensor(pr1)) + T.tsum(T.conv_transpose2d(x, wt, stride=s) * Tensor(pr2))
    assert grad_check(f, {"x": x, "w": w, "wt": wt}).passed


@given(h=st.integers(1, 5), w=st.integers(1, 5), th=st.integers(1, 7), tw=st.integers(1, 7), seed=st.integers(0, 2**16))
@settings(max_examples=20)
def test_resize_grads_random_shapes(h, w, th, tw, seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.standard_normal((2, h, w)), requires_grad=True)
    pr = r.standard_normal((2, th, tw))
    assert grad_check(lambda: T.tsum(T.bilinear_resize(x, th, tw) * Tensor(pr)), {"x": x}).passed
