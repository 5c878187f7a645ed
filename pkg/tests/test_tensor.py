import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fmri4d import tensor as T
from fmri4d.tensor import Rng, ShapeError, Tensor


def test_zeros_full_from_data():
    z = T.zeros([2, 3])
    assert z.shape == (2, 3) and z.size == 6 and np.all(z.data == 0.0)
    assert T.full([1], 2.5).item(0) == 2.5
    assert T.from_data([2, 2], [1, 2, 3, 4]).item(1, 0) == 3.0


def test_c_order_strides_and_rank_limit():
    t = T.zeros([2, 3, 4], np.float64)
    assert t.strides == (12, 4, 1)
    assert t.data.flags.c_contiguous
    with pytest.raises(ShapeError):
        T.zeros([1] * 7)
    with pytest.raises(ShapeError):
        T.zeros([2, 0])


def test_from_data_length_mismatch():
    with pytest.raises(ShapeError, match="5 elements"):
        T.from_data([2, 2], [1, 2, 3, 4, 5])


def test_unsupported_dtype():
    with pytest.raises(TypeError):
        T.zeros([2], np.int32)


def test_tensor_is_immutable_and_copies_input():
    src = np.arange(4.0)
    t = Tensor(src)
    src[0] = 99
    assert t.item(0) == 0.0
    with pytest.raises(ValueError):
        t.data[0] = 1.0
    out = t.numpy()
    out[0] = 5.0
    assert t.item(0) == 0.0


def test_elementwise_examples():
    assert T.relu(T.full([1], -1.0)).item() == 0.0
    assert T.sigmoid(T.zeros([1])).item() == 0.5
    assert T.tanh(T.zeros([1])).item() == 0.0
    a = T.from_data([2], [1.0, 2.0], np.float64)
    assert T.scale(a, 3.0) == T.from_data([2], [3.0, 6.0], np.float64)
    assert T.ln(T.exp(a)).data.tolist() == pytest.approx([1.0, 2.0])


def test_elementwise_errors():
    with pytest.raises(ShapeError):
        T.add(T.zeros([2]), T.zeros([3]))
    with pytest.raises(TypeError):
        T.add(T.zeros([2]), T.zeros([2], np.float64))
    with pytest.raises(ValueError):
        T.elementwise("pow", T.zeros([2]))


def test_sigmoid_is_stable_at_extremes():
    s = T.sigmoid(T.from_data([2], [-1000.0, 1000.0], np.float64)).data
    assert s[0] == 0.0 and s[1] == 1.0


def test_matmul_examples():
    eye = T.from_data([2, 2], [1, 0, 0, 1])
    m = T.from_data([2, 2], [1, 2, 3, 4])
    assert T.matmul(eye, m) == m
    assert T.matmul(T.from_data([1, 2], [1, 2]), T.from_data([2, 1], [3, 4])).item(0, 0) == 11.0
    with pytest.raises(ShapeError):
        T.matmul(T.zeros([2, 3]), T.zeros([2, 3]))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    got = T.matmul(Tensor(a), Tensor(b)).data
    ref = np.array(oracles.matmul_oracle(a.tolist(), b.tolist()))
    assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_matmul_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    ref = np.array(oracles.matmul_oracle(a.tolist(), b.tolist()))
    assert np.allclose(T.matmul(Tensor(a), Tensor(b)).data, ref, rtol=1e-12, atol=1e-12)


def test_reduce_examples():
    v = T.from_data([2], [1, 3], np.float64)
    assert T.reduce("mean", v, 0).item() == 2.0
    assert T.reduce("std_population", v).item() == 1.0
    assert T.reduce("std_population", T.full([5], 4.2, np.float64)).item() == 0.0
    assert T.reduce("max", v).item() == 3.0
    assert T.reduce("sum", T.full([2, 3], 1.0), axis=1).shape == (2,)
    with pytest.raises(ShapeError):
        T.reduce("sum", v, axis=1)


def test_pad_and_crop():
    assert T.pad(T.full([1], 5.0), [(1, 1)]).data.tolist() == [0.0, 5.0, 0.0]
    img = T.zeros([4, 4, 4, 176])
    assert T.window(img, 3, 0, 15).shape == (4, 4, 4, 15)
    with pytest.raises(ShapeError):
        T.crop(T.zeros([3]), [(2, 1)])
    with pytest.raises(ShapeError):
        T.window(img, 3, 170, 15)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=4))
def test_pad_crop_inverse(axes):
    shape = [n for n, _, _ in axes]
    amounts = [(lo, hi) for _, lo, hi in axes]
    a = Tensor(np.random.default_rng(0).standard_normal(shape))
    assert T.crop(T.pad(a, amounts), amounts) == a


def test_rand_normal():
    assert np.all(T.rand_normal(Rng(1), [10], mean=3.0, stddev=0.0).data == 3.0)
    assert T.rand_normal(Rng(5), [4, 4]) == T.rand_normal(Rng(5), [4, 4])
    assert T.rand_normal(Rng(5), [4, 4]) != T.rand_normal(Rng(6), [4, 4])
    s = T.rand_normal(Rng(0), [100_000], dtype=np.float64).data
    assert abs(s.mean()) < 0.02 and abs(s.std() - 1) < 0.02


def test_rng_state_round_trip():
    a = Rng(3)
    a.integers(0, 10, 5)
    saved = a.state
    first = a.uniform(size=4)
    b = Rng(0)
    b.state = saved
    assert np.array_equal(first, b.uniform(size=4))


def test_reshape_and_astype():
    t = T.from_data([2, 3], range(6), np.float64)
    assert t.reshape(3, 2).shape == (3, 2) and t.reshape([6]).item(5) == 5.0
    with pytest.raises(ShapeError):
        t.reshape(4, 2)
    assert t.astype(np.float32).dtype == np.float32
    assert t.astype(np.float64) is t
    assert math.isclose(T.to_buffer(t)[4], 4.0)
