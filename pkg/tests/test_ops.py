import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fmri4d import kernels
from fmri4d import ops
from fmri4d import tensor as T
from fmri4d.bench import max_rel_error
from fmri4d.ops import ConvSpec, conv_backward, conv_forward
from fmri4d.tensor import ShapeError, Tensor

PATHS = ("direct", "im2col")


@pytest.mark.parametrize("path", PATHS)
def test_unit_conv(path):
    spec = ConvSpec(4, 1, 1, 1, bias=False)
    out = conv_forward(T.full([1, 1, 1, 1, 1, 1], 2.0), T.full([1, 1, 1, 1, 1, 1], 3.0), None, spec, path)
    assert out.shape == (1, 1, 1, 1, 1, 1) and out.item(0, 0, 0, 0, 0, 0) == 6.0


@pytest.mark.parametrize("path", PATHS)
def test_same_padding_shape(path):
    spec = ConvSpec.same(4, 1, 5, 3)
    x, w = T.zeros([1, 1, 8, 8, 8, 4]), T.zeros(spec.weight_shape)
    assert conv_forward(x, w, T.zeros([5]), spec, path).shape == (1, 5, 8, 8, 8, 4)


def test_conv_matches_scalar_nested_loops():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((1, 2, 5, 5, 5, 3)).astype(np.float32)
    w = rng.standard_normal((2, 2, 3, 3, 3, 3)).astype(np.float32)
    spec = ConvSpec(4, 2, 2, 3, 1, 1, bias=False)
    ref = oracles.conv_scalar_oracle(x, w, spec.stride, spec.padding)
    for path in PATHS:
        got = conv_forward(Tensor(x), Tensor(w), None, spec, path).data
        assert max_rel_error(got, ref) <= 1e-5
    # frozen checksum of the oracle output for this seed
    assert float(ref.sum()) == pytest.approx(-151.36954684181268, abs=1e-9)
    assert float(ref[0, 1, 2, 3, 4, 1]) == pytest.approx(-4.449496707230239, abs=1e-12)


def test_rank3_is_unit_axis_embedding():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 5, 4, 6))
    w = rng.standard_normal((2, 3, 3, 1, 3))
    s3 = ConvSpec(3, 3, 2, (3, 1, 3), (2, 1, 1), (1, 0, 1), bias=False)
    s4 = ConvSpec(4, 3, 2, (1, 3, 1, 3), (1, 2, 1, 1), (0, 1, 0, 1), bias=False)
    a = conv_forward(Tensor(x), Tensor(w), None, s3).data
    b = conv_forward(Tensor(x[:, :, None]), Tensor(w[:, :, None]), None, s4).data[:, :, 0]
    assert np.array_equal(a, b)


def test_pointwise_im2col_is_matmul():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 6, 3, 4, 5)).astype(np.float32)
    w = rng.standard_normal((4, 6, 1, 1, 1)).astype(np.float32)
    spec = ConvSpec(3, 6, 4, 1, bias=False)
    got = conv_forward(Tensor(x), Tensor(w), None, spec, "im2col").data
    assert np.array_equal(got[0], (w.reshape(4, 6) @ x[0].reshape(6, -1)).reshape(4, 3, 4, 5))
    # integer-valued inputs make every summation order exact
    xi, wi = np.round(3 * x).astype(np.float64), np.round(3 * w).astype(np.float64)
    d = conv_forward(Tensor(xi), Tensor(wi), None, spec, "direct").data
    assert np.array_equal(d, conv_forward(Tensor(xi), Tensor(wi), None, spec, "im2col").data)


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 4), st.integers(0, 2**31 - 1))
def test_paths_and_backends_agree(rank, seed):
    rng = np.random.default_rng(seed)
    kernel = tuple(int(k) for k in rng.integers(1, 4, rank))
    stride = tuple(int(s) for s in rng.integers(1, 3, rank))
    pad = tuple(int(rng.integers(0, k)) for k in kernel)
    ext = tuple(int(rng.integers(max(1, k - 2 * p), 6)) for k, p in zip(kernel, pad))
    spec = ConvSpec(rank, int(rng.integers(1, 3)), int(rng.integers(1, 3)), kernel, stride, pad, bias=True)
    x = Tensor(rng.standard_normal((2, spec.in_channels) + ext))
    w, b = Tensor(rng.standard_normal(spec.weight_shape)), Tensor(rng.standard_normal(spec.out_channels))
    ref = oracles.conv_oracle(x.data, w.data, b.data, stride, pad)
    active = kernels.BACKEND
    try:
        for backend in kernels.BACKENDS:
            kernels.use(backend)
            for path in PATHS:
                assert max_rel_error(conv_forward(x, w, b, spec, path).data, ref) <= 1e-10
    finally:
        kernels.use(active)


def test_conv_errors():
    spec = ConvSpec(3, 2, 1, 3, bias=False)
    with pytest.raises(ShapeError, match="channels"):
        conv_forward(T.zeros([1, 3, 4, 4, 4]), T.zeros(spec.weight_shape), None, spec)
    with pytest.raises(ShapeError):
        conv_forward(T.zeros([1, 2, 2, 2, 2]), T.zeros(spec.weight_shape), None, spec)  # kernel > padded extent
    with pytest.raises(ShapeError, match="bias"):
        conv_forward(T.zeros([1, 2, 4, 4, 4]), T.zeros(spec.weight_shape), T.zeros([1]), spec)
    with pytest.raises(ValueError, match="path"):
        conv_forward(T.zeros([1, 2, 4, 4, 4]), T.zeros(spec.weight_shape), None, spec, "fft")
    with pytest.raises(ValueError):
        ConvSpec(5, 1, 1, 3)
    with pytest.raises(ValueError):
        ConvSpec(3, 1, 1, 3, stride=0)


def test_conv_backward_examples():
    spec = ConvSpec(4, 2, 3, 3, 1, 1)
    rng = np.random.default_rng(0)
    x, w = Tensor(rng.standard_normal((1, 2, 3, 3, 3, 2))), Tensor(rng.standard_normal(spec.weight_shape))
    g = conv_backward(T.zeros([1, 3, 3, 3, 3, 2], np.float64), x, w, spec)
    assert not g.dx.data.any() and not g.dw.data.any() and not g.db.data.any()
    one = ConvSpec(4, 1, 1, 1, bias=False)
    g = conv_backward(T.full([1, 1, 1, 1, 1, 1], 5.0, np.float64), T.full([1, 1, 1, 1, 1, 1], 2.0, np.float64),
                      T.full([1, 1, 1, 1, 1, 1], 3.0, np.float64), one)
    assert g.dw.item(0, 0, 0, 0, 0, 0) == 10.0 and g.dx.item(0, 0, 0, 0, 0, 0) == 15.0 and g.db is None


def test_conv_backward_is_adjoint():
    # <conv(x), u> == <x, dx(u)> and == <w, dw(u)> for a bias-free linear map
    rng = np.random.default_rng(9)
    spec = ConvSpec(4, 2, 2, (3, 1, 2, 3), (2, 1, 1, 2), (1, 0, 1, 1), bias=False)
    x, w = Tensor(rng.standard_normal((2, 2, 5, 3, 4, 5))), Tensor(rng.standard_normal(spec.weight_shape))
    y = conv_forward(x, w, None, spec)
    u = Tensor(rng.standard_normal(y.shape))
    g = conv_backward(u, x, w, spec)
    lhs = float(np.sum(y.data * u.data))
    assert lhs == pytest.approx(float(np.sum(x.data * g.dx.data)), rel=1e-12)
    assert lhs == pytest.approx(float(np.sum(w.data * g.dw.data)), rel=1e-12)


def test_avg_pool_examples():
    assert ops.avg_pool(T.from_data([1, 1, 4], [1, 2, 3, 4]), 1, 2, 2).data.ravel().tolist() == [1.5, 3.5]
    assert ops.avg_pool(T.full([1, 1, 4, 4, 15], 2.0), 3, 2, 2).shape == (1, 1, 2, 2, 7)
    assert np.all(ops.avg_pool(T.full([2, 3, 4, 4, 4, 4], 7.0), 4, 2, 2).data == 7.0)
    with pytest.raises(ShapeError):
        ops.avg_pool(T.zeros([1, 1, 1, 4, 4]), 3, 2, 2)


def test_global_avg_pool():
    x = np.arange(2 * 3 * 4 * 5 * 2, dtype=np.float64).reshape(2, 3, 4, 5, 2)
    got = ops.global_avg_pool(Tensor(x)).data
    composed = Tensor(x)
    for _ in range(3):
        composed = T.reduce("mean", composed, axis=2)
    assert np.max(np.abs(got - composed.data)) <= 1e-6
    assert got[0, 0] == np.mean(np.arange(40.0))
    const = np.ones((1, 2, 3, 3, 3)) * np.array([4.0, -1.0]).reshape(1, 2, 1, 1, 1)
    assert ops.global_avg_pool(Tensor(const)).data.tolist() == [[4.0, -1.0]]


def _bn(x, mode="train", gamma=None, beta=None):
    c = x.shape[1]
    gamma = T.full([c], 1.0, x.dtype) if gamma is None else gamma
    beta = T.zeros([c], x.dtype) if beta is None else beta
    return ops.batch_norm(x, gamma, beta, T.zeros([c], x.dtype), T.full([c], 1.0, x.dtype), mode)


def test_batch_norm_statistics():
    rng = np.random.default_rng(1)
    x = Tensor(3 + 2 * rng.standard_normal((4, 3, 5, 5, 5)))
    out = _bn(x).out.data
    assert np.all(np.abs(out.mean(axis=(0, 2, 3, 4))) < 1e-4)
    assert np.all(np.abs(out.var(axis=(0, 2, 3, 4)) - 1) < 1e-4)


def test_batch_norm_identity_and_constant():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((8, 1, 10, 10, 10))
    z = (z - z.mean()) / z.std()
    out = _bn(Tensor(z)).out.data
    assert np.max(np.abs(out - z)) < 1e-4
    const = _bn(T.full([2, 2, 3, 3, 3], 5.0, np.float64), beta=T.from_data([2], [0.5, -0.5], np.float64)).out
    assert np.allclose(const.data[:, 0], 0.5) and np.allclose(const.data[:, 1], -0.5)


def test_batch_norm_running_stats():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((4, 2, 3, 3, 3)) * 2 + 1)
    res = _bn(x)
    m = x.data.mean(axis=(0, 2, 3, 4))
    v = x.data.var(axis=(0, 2, 3, 4), ddof=1)
    assert np.allclose(res.running_mean.data, 0.1 * m)
    assert np.allclose(res.running_var.data, 0.9 + 0.1 * v)
    ev = _bn(x, "eval")
    assert np.allclose(ev.out.data, x.data / math.sqrt(1 + ops.BN_EPS))
    assert ev.running_mean.data.tolist() == [0.0, 0.0]


def test_fully_connected():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((3, 2)))
    eye = Tensor(np.eye(2))
    assert ops.fully_connected(x, eye, T.zeros([2], np.float64)) == x
    b = T.from_data([2], [0.25, -1.0], np.float64)
    assert ops.fully_connected(T.zeros([3, 2], np.float64), eye, b).data.tolist() == [[0.25, -1.0]] * 3
    xr, w = rng.standard_normal((4, 5)), rng.standard_normal((5, 2))
    got = ops.fully_connected(Tensor(xr), Tensor(w), T.zeros([2], np.float64)).data
    assert np.array_equal(got, T.matmul(Tensor(xr), Tensor(w)).data)
    assert np.allclose(got, oracles.matmul_oracle(xr.tolist(), w.tolist()), rtol=1e-12, atol=1e-12)


def test_softmax_cross_entropy():
    loss, _ = ops.softmax_cross_entropy(T.zeros([3, 2], np.float64), [0, 1, 1])
    assert loss.item() == pytest.approx(math.log(2))
    loss, grad = ops.softmax_cross_entropy(T.from_data([1, 2], [1000.0, 0.0], np.float64), [0])
    assert loss.item() == pytest.approx(0.0, abs=1e-12) and np.all(np.isfinite(grad.data))
    loss, _ = ops.softmax_cross_entropy(T.from_data([1, 2], [2.0, 0.0], np.float64), [0])
    assert loss.item() == pytest.approx(math.log1p(math.exp(-2)), rel=1e-12)
    assert loss.item() == pytest.approx(0.1269280110429725, rel=1e-12)
    with pytest.raises(ValueError):
        ops.softmax_cross_entropy(T.zeros([1, 2]), [2])
    with pytest.raises(ShapeError):
        ops.softmax_cross_entropy(T.zeros([2, 2]), [0])
