"""Neural-network layer primitives with explicit forward and backward rules.

Everything here works on :class:`~fmri4d.tensor.Tensor` values; the autodiff
wrappers in :mod:`fmri4d.layers` record these on a graph.

Convolutions use the cross-correlation convention (no kernel flip). A rank-3
convolution acts on axes ``X, Y, Z`` of ``[N, C, X, Y, Z]``; rank 4 acts on
``X, Y, Z, T`` of ``[N, C, X, Y, Z, T]``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, wrap

# cap on the im2col patch matrix per chunk (elements); larger batches are split
IM2COL_CHUNK_ELEMENTS = 1 << 24

PATHS = ("direct", "im2col")


def _tuple(v, rank: int, name: str) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * rank
    v = tuple(int(i) for i in v)
    if len(v) != rank:
        raise ValueError(f"{name} needs {rank} entries, got {len(v)}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    rank: int
    in_channels: int
    out_channels: int
    kernel: tuple[int, ...]
    stride: tuple[int, ...] = None
    padding: tuple[int, ...] = None
    bias: bool = True

    def __post_init__(self):
        if self.rank not in (3, 4):
            raise ValueError(f"convolution rank must be 3 or 4, got {self.rank}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        object.__setattr__(self, "kernel", _tuple(self.kernel, self.rank, "kernel"))
        object.__setattr__(self, "stride", _tuple(1 if self.stride is None else self.stride, self.rank, "stride"))
        object.__setattr__(self, "padding", _tuple(0 if self.padding is None else self.padding, self.rank, "padding"))
        if min(self.kernel) < 1:
            raise ValueError(f"kernel extents must be >= 1, got {self.kernel}")
        if min(self.stride) < 1:
            raise ValueError(f"strides must be >= 1, got {self.stride}")
        if min(self.padding) < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    @classmethod
    def same(cls, rank: int, in_channels: int, out_channels: int, k: int = 3, stride: int = 1, bias: bool = True):
        """Cubic kernel with ``k // 2`` padding (extent-preserving at stride 1 for odd k)."""
        return cls(rank, in_channels, out_channels, (k,) * rank, (stride,) * rank, (k // 2,) * rank, bias)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels) + self.kernel

    def output_extents(self, in_extents: Sequence[int]) -> tuple[int, ...]:
        if len(in_extents) != self.rank:
            raise ShapeError(f"rank-{self.rank} convolution got {len(in_extents)} spatial axes")
        out = kernels.out_extents(in_extents, self.kernel, self.stride, self.padding)
        if min(out) < 1:
            raise ShapeError(f"output extent < 1 for input {tuple(in_extents)} with {self}")
        return out

    def output_shape(self, x_shape: Sequence[int]) -> tuple[int, ...]:
        return (x_shape[0], self.out_channels) + self.output_extents(x_shape[2:])

    # rank-3 problems are embedded with a leading unit axis so the innermost
    # kernel loop runs over Z rather than a unit T axis
    def _k4(self) -> tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]:
        if self.rank == 4:
            return self.kernel, self.stride, self.padding
        return (1,) + self.kernel, (1,) + self.stride, (0,) + self.padding


def _to4(a: np.ndarray, rank: int) -> np.ndarray:
    return a if rank == 4 else a.reshape(a.shape[:2] + (1,) + a.shape[2:])


def _from4(a: np.ndarray, rank: int) -> np.ndarray:
    return a if rank == 4 else a.reshape(a.shape[:2] + a.shape[3:])


def _check_conv(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec, check_bias: bool = True) -> None:
    if x.rank != spec.rank + 2:
        raise ShapeError(f"rank-{spec.rank} convolution needs input rank {spec.rank + 2}, got {list(x.shape)}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {list(w.shape)} != {list(spec.weight_shape)}")
    if check_bias and spec.bias:
        if b is None or b.shape != (spec.out_channels,):
            raise ShapeError(f"bias must have shape [{spec.out_channels}]")
    elif check_bias and b is not None:
        raise ShapeError("spec has bias=False but a bias was given")
    if x.dtype != w.dtype:
        raise TypeError(f"input dtype {x.dtype} != weight dtype {w.dtype}")
    spec.output_extents(x.shape[2:])


def _batch_chunks(n: int, per_sample: int):
    step = max(1, IM2COL_CHUNK_ELEMENTS // max(per_sample, 1))
    for lo in range(0, n, step):
        yield lo, min(n, lo + step)


def conv_forward(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec, path: str = "im2col") -> Tensor:
    """``out[n, co, o] = b[co] + sum_{ci, k} w[co, ci, k] * xpad[n, ci, o*stride + k]``."""
    _check_conv(x, w, b, spec)
    k4, s4, p4 = spec._k4()
    x4, w4 = _to4(x.data, spec.rank), _to4(w.data, spec.rank)
    out_ext = kernels.out_extents(x4.shape[2:], k4, s4, p4)
    if path == "direct":
        out = kernels.conv_direct(x4, w4, s4, p4)
    elif path == "im2col":
        n, co = x.shape[0], spec.out_channels
        p = math.prod(out_ext)
        w2 = w4.reshape(co, -1)
        out = np.empty((n, co) + out_ext, dtype=x.dtype)
        for lo, hi in _batch_chunks(n, w2.shape[1] * p):
            cols = kernels.im2col(x4[lo:hi], k4, s4, p4)
            y = (w2 @ cols).reshape((co, hi - lo) + out_ext)
            out[lo:hi] = y.swapaxes(0, 1)
    else:
        raise ValueError(f"unknown convolution path {path!r}; expected one of {PATHS}")
    if b is not None:
        out += b.data.reshape((1, -1) + (1,) * len(out_ext))
    return wrap(_from4(out, spec.rank))


class ConvGrads(NamedTuple):
    dx: Tensor | None
    dw: Tensor
    db: Tensor | None


def conv_backward(upstream: Tensor, x: Tensor, w: Tensor, spec: ConvSpec, need_dx: bool = True) -> ConvGrads:
    """Gradients of :func:`conv_forward` with respect to input, weight and bias.

    ``need_dx=False`` skips the input gradient (returned as None).
    """
    _check_conv(x, w, None, spec, check_bias=False)
    expected = spec.output_shape(x.shape)
    if upstream.shape != expected:
        raise ShapeError(f"upstream shape {list(upstream.shape)} != forward output {list(expected)}")
    k4, s4, p4 = spec._k4()
    x4, w4, g4 = _to4(x.data, spec.rank), _to4(w.data, spec.rank), _to4(upstream.data, spec.rank)
    n, co = x.shape[0], spec.out_channels
    w2 = w4.reshape(co, -1)
    dw2 = np.zeros_like(w2)
    dx = np.empty(x4.shape, dtype=x.dtype) if need_dx else None
    p = math.prod(g4.shape[2:])
    for lo, hi in _batch_chunks(n, w2.shape[1] * p):
        cols = kernels.im2col(x4[lo:hi], k4, s4, p4)
        g2 = g4[lo:hi].swapaxes(0, 1).reshape(co, -1)
        dw2 += g2 @ cols.T
        if need_dx:
            dx[lo:hi] = kernels.col2im(w2.T @ g2, x4[lo:hi].shape, k4, s4, p4)
    db = wrap(upstream.data.sum(axis=(0,) + tuple(range(2, upstream.rank)))) if spec.bias else None
    dx = wrap(_from4(dx, spec.rank)) if need_dx else None
    return ConvGrads(dx, wrap(dw2.reshape(w.shape)), db)


# -- pooling -----------------------------------------------------------------

def _pool_geometry(shape, rank: int, window, stride):
    if len(shape) < rank + 2:
        raise ShapeError(f"pooling over {rank} axes needs rank >= {rank + 2}, got {list(shape)}")
    window, stride = _tuple(window, rank, "window"), _tuple(stride, rank, "stride")
    ext = shape[len(shape) - rank:]
    for e, k in zip(ext, window):
        if k > e:
            raise ShapeError(f"pooling window {window} exceeds extents {ext}")
    if min(window) < 1 or min(stride) < 1:
        raise ValueError("pool window and stride must be >= 1")
    out = tuple((e - k) // s + 1 for e, k, s in zip(ext, window, stride))
    return window, stride, out


def _pool_taps(ndim: int, rank: int, window, stride, out):
    lead = (slice(None),) * (ndim - rank)
    for offset in itertools.product(*(range(k) for k in window)):
        yield lead + tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out))


def avg_pool(x: Tensor, rank: int, window, stride) -> Tensor:
    """Mean over windows on the last ``rank`` axes; trailing remainders are dropped."""
    window, stride, out = _pool_geometry(x.shape, rank, window, stride)
    acc = np.zeros(x.shape[: x.rank - rank] + out, dtype=x.dtype)
    for tap in _pool_taps(x.rank, rank, window, stride, out):
        acc += x.data[tap]
    acc *= x.dtype.type(1.0 / math.prod(window))
    return wrap(acc)


def avg_pool_backward(upstream: Tensor, x_shape, rank: int, window, stride) -> Tensor:
    window, stride, out = _pool_geometry(tuple(x_shape), rank, window, stride)
    if upstream.shape != tuple(x_shape[: len(x_shape) - rank]) + out:
        raise ShapeError("upstream shape does not match pooled output")
    dx = np.zeros(tuple(x_shape), dtype=upstream.dtype)
    g = upstream.data * upstream.dtype.type(1.0 / math.prod(window))
    for tap in _pool_taps(len(x_shape), rank, window, stride, out):
        dx[tap] += g
    return wrap(dx)


def global_avg_pool(x: Tensor) -> Tensor:
    """``[N, C, ...] -> [N, C]`` mean over every axis after the channel axis."""
    if x.rank < 3:
        raise ShapeError(f"global_avg_pool needs rank >= 3, got {list(x.shape)}")
    return wrap(x.data.mean(axis=tuple(range(2, x.rank)), dtype=x.dtype))


def global_avg_pool_backward(upstream: Tensor, x_shape) -> Tensor:
    count = math.prod(x_shape[2:])
    g = upstream.data.reshape(upstream.shape + (1,) * (len(x_shape) - 2)) * upstream.dtype.type(1.0 / count)
    return wrap(np.ascontiguousarray(np.broadcast_to(g, tuple(x_shape))))


# -- batch normalisation -----------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class BatchNormResult(NamedTuple):
    out: Tensor
    running_mean: Tensor
    running_var: Tensor
    cache: tuple


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
               mode: str = "train", eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> BatchNormResult:
    """Per-channel normalisation over all non-channel axes.

    Train mode normalises with the (biased) batch variance and returns
    running statistics updated by an exponential moving average, using the
    unbiased batch variance for the running estimate. Eval mode uses the
    running statistics and returns them unchanged.
    """
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"batch_norm {name} has shape {list(t.shape)}, input has {c} channels")
    bshape = (1, c) + (1,) * (x.rank - 2)
    axes = (0,) + tuple(range(2, x.rank))
    a = x.data
    dt = a.dtype.type
    if mode == "train":
        m = a.size // c
        mean = a.mean(axis=axes)
        centered = a - mean.reshape(bshape)
        var = np.mean(centered * centered, axis=axes)
        inv_std = 1.0 / np.sqrt(var + dt(eps))
        unbiased = var * dt(m / (m - 1)) if m > 1 else var
        new_mean = (dt(1 - momentum) * running_mean.data + dt(momentum) * mean).astype(a.dtype)
        new_var = (dt(1 - momentum) * running_var.data + dt(momentum) * unbiased).astype(a.dtype)
    elif mode == "eval":
        centered = a - running_mean.data.reshape(bshape)
        inv_std = 1.0 / np.sqrt(running_var.data + dt(eps))
        new_mean, new_var = running_mean, running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    if mode == "train":
        new_mean, new_var = wrap(new_mean), wrap(new_var)
    return BatchNormResult(wrap(out), new_mean, new_var, (mode, xhat, inv_std))


def batch_norm_backward(upstream: Tensor, gamma: Tensor, cache: tuple) -> tuple[Tensor, Tensor, Tensor]:
    mode, xhat, inv_std = cache
    g = upstream.data
    c = g.shape[1]
    bshape = (1, c) + (1,) * (g.ndim - 2)
    axes = (0,) + tuple(range(2, g.ndim))
    dgamma = np.sum(g * xhat, axis=axes)
    dbeta = g.sum(axis=axes)
    if mode == "train":
        m = g.size // c
        dxhat = g * gamma.data.reshape(bshape)
        dx = (inv_std.reshape(bshape) / m) * (
            m * dxhat - dxhat.sum(axis=axes).reshape(bshape) - xhat * np.sum(dxhat * xhat, axis=axes).reshape(bshape)
        )
    else:
        dx = g * (gamma.data * inv_std).reshape(bshape)
    return wrap(dx.astype(g.dtype, copy=False)), wrap(dgamma), wrap(dbeta)


# -- head and loss -----------------------------------------------------------

def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x[N, F] @ w[F, K] + b[K]``."""
    if x.rank != 2 or w.rank != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"fully_connected: x {list(x.shape)} incompatible with w {list(w.shape)}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"fully_connected: bias shape {list(b.shape)} != [{w.shape[1]}]")
    return wrap(x.data @ w.data + b.data)


def fully_connected_backward(upstream: Tensor, x: Tensor, w: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    g = upstream.data
    return wrap(g @ w.data.T), wrap(x.data.T @ g), wrap(g.sum(axis=0))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> tuple[Tensor, Tensor]:
    """Mean negative log-likelihood and its gradient ``(softmax - onehot) / N``."""
    if logits.rank != 2:
        raise ShapeError(f"logits must be [N, K], got {list(logits.shape)}")
    n, k = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size != n:
        raise ShapeError(f"{y.size} labels for {n} logit rows")
    if y.min(initial=0) < 0 or y.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k}), got {sorted(set(y.tolist()))}")
    a = logits.data
    z = a - a.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    nll = log_norm - z[np.arange(n), y]
    loss = np.array([nll.mean()], dtype=a.dtype)
    grad = np.exp(z - log_norm[:, None])
    grad[np.arange(n), y] -= 1
    grad /= n
    return wrap(loss), wrap(grad.astype(a.dtype, copy=False))
