"""Graph-recording wrappers for :mod:`fmri4d.ops` and the layer objects models are built from."""

from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from . import ops
from .autodiff import Graph, Node, Parameter
from .ops import ConvSpec
from .tensor import Rng, Tensor, full, rand_normal, wrap, zeros


# -- graph ops ---------------------------------------------------------------

def conv(g: Graph, x: Node, w: Node, b: Node | None, spec: ConvSpec, path: str = "im2col") -> Node:
    value = ops.conv_forward(x.value, w.value, None if b is None else b.value, spec, path)

    def back(u, needs):
        upstream = wrap(u)
        if not needs[0] and not needs[1]:
            # only the bias needs a gradient
            db = u.sum(axis=(0,) + tuple(range(2, u.ndim)))
            return None, None, db
        grads = ops.conv_backward(upstream, x.value, w.value, spec, need_dx=needs[0])
        dx = None if grads.dx is None else grads.dx.data
        db = None if grads.db is None else grads.db.data
        return dx, grads.dw.data, db

    inputs = (x, w) if b is None else (x, w, b)
    return g.record("conv", inputs, value, back)


def avg_pool(g: Graph, x: Node, rank: int, window, stride) -> Node:
    shape = x.shape
    value = ops.avg_pool(x.value, rank, window, stride)
    return g.record(
        "avg_pool", (x,), value,
        lambda u, _: (ops.avg_pool_backward(wrap(u), shape, rank, window, stride).data,),
    )


def global_avg_pool(g: Graph, x: Node) -> Node:
    shape = x.shape
    return g.record(
        "global_avg_pool", (x,), ops.global_avg_pool(x.value),
        lambda u, _: (ops.global_avg_pool_backward(wrap(u), shape).data,),
    )


def batch_norm(g: Graph, x: Node, gamma: Node, beta: Node, running_mean: Parameter, running_var: Parameter,
               mode: str, eps: float = ops.BN_EPS, momentum: float = ops.BN_MOMENTUM) -> Node:
    res = ops.batch_norm(x.value, gamma.value, beta.value, running_mean.value, running_var.value, mode, eps, momentum)
    if mode == "train":
        running_mean.value, running_var.value = res.running_mean, res.running_var

    def back(u, _):
        dx, dgamma, dbeta = ops.batch_norm_backward(wrap(u), gamma.value, res.cache)
        return dx.data, dgamma.data, dbeta.data

    return g.record("batch_norm", (x, gamma, beta), res.out, back)


def fully_connected(g: Graph, x: Node, w: Node, b: Node) -> Node:
    def back(u, _):
        dx, dw, db = ops.fully_connected_backward(wrap(u), x.value, w.value)
        return dx.data, dw.data, db.data

    return g.record("fully_connected", (x, w, b), ops.fully_connected(x.value, w.value, b.value), back)


def softmax_cross_entropy(g: Graph, logits: Node, labels: Sequence[int]) -> Node:
    loss, dlogits = ops.softmax_cross_entropy(logits.value, labels)
    return g.record("softmax_cross_entropy", (logits,), loss, lambda u, _: (dlogits.data * u[0],))


# -- layers ------------------------------------------------------------------

def he_normal(rng: Rng, shape: Sequence[int], fan_in: int, dtype) -> Tensor:
    return rand_normal(rng, shape, 0.0, math.sqrt(2.0 / fan_in), dtype)


class Layer:
    """Base for model components: named parameters plus a graph-building call."""

    name: str = ""

    def children(self) -> list[Layer]:
        return []

    def own_parameters(self) -> list[Parameter]:
        return []

    def parameters(self) -> Iterator[Parameter]:
        yield from self.own_parameters()
        for child in self.children():
            yield from child.parameters()

    def walk(self) -> Iterator[Layer]:
        yield self
        for child in self.children():
            yield from child.walk()

    def __call__(self, g: Graph, x: Node, mode: str) -> Node:
        raise NotImplementedError


class Conv(Layer):
    def __init__(self, name: str, spec: ConvSpec, rng: Rng, dtype=np.float32, path: str = "im2col"):
        self.name, self.spec, self.path = name, spec, path
        fan_in = spec.in_channels * math.prod(spec.kernel)
        self.weight = Parameter(f"{name}.weight", he_normal(rng, spec.weight_shape, fan_in, dtype))
        self.bias = Parameter(f"{name}.bias", zeros([spec.out_channels], dtype)) if spec.bias else None

    def own_parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, g, x, mode):
        b = g.param(self.bias) if self.bias is not None else None
        return conv(g, x, g.param(self.weight), b, self.spec, self.path)


class BatchNorm(Layer):
    def __init__(self, name: str, channels: int, dtype=np.float32):
        self.name, self.channels = name, channels
        self.gamma = Parameter(f"{name}.gamma", full([channels], 1.0, dtype))
        self.beta = Parameter(f"{name}.beta", zeros([channels], dtype))
        self.running_mean = Parameter(f"{name}.running_mean", zeros([channels], dtype), trainable=False)
        self.running_var = Parameter(f"{name}.running_var", full([channels], 1.0, dtype), trainable=False)

    def own_parameters(self):
        return [self.gamma, self.beta, self.running_mean, self.running_var]

    def __call__(self, g, x, mode):
        return batch_norm(g, x, g.param(self.gamma), g.param(self.beta), self.running_mean, self.running_var, mode)


class ReLU(Layer):
    name = "relu"

    def __call__(self, g, x, mode):
        return ad.relu(g, x)


class Sequential(Layer):
    def __init__(self, name: str, layers: Sequence[Layer]):
        self.name, self.layers = name, list(layers)

    def children(self):
        return self.layers

    def __call__(self, g, x, mode):
        for layer in self.layers:
            x = layer(g, x, mode)
        return x


def norm_relu_conv(name: str, spec: ConvSpec, rng: Rng, dtype, batch_norm: bool, path: str) -> Sequential:
    """DenseNet composite: batch_norm -> relu -> conv (norm omitted when disabled)."""
    parts: list[Layer] = []
    if batch_norm:
        parts.append(BatchNorm(f"{name}.bn", spec.in_channels, dtype))
    parts += [ReLU(), Conv(f"{name}.conv", spec, rng, dtype, path)]
    return Sequential(name, parts)


class DenseBlock(Layer):
    """Layer ``j`` sees the concatenation of the block input and all earlier outputs."""

    def __init__(self, name: str, rank: int, in_channels: int, growth: int, n_layers: int, kernel: int,
                 rng: Rng, dtype=np.float32, batch_norm: bool = True, path: str = "im2col"):
        self.name, self.rank = name, rank
        self.in_channels, self.growth = in_channels, growth
        self.layers = [
            norm_relu_conv(
                f"{name}.layer{j + 1}",
                ConvSpec.same(rank, in_channels + j * growth, growth, kernel, bias=not batch_norm),
                rng, dtype, batch_norm, path,
            )
            for j in range(n_layers)
        ]

    @property
    def out_channels(self) -> int:
        return self.in_channels + len(self.layers) * self.growth

    def children(self):
        return self.layers

    def __call__(self, g, x, mode):
        features = [x]
        for layer in self.layers:
            inp = ad.concat(g, features, axis=1)
            features.append(layer(g, inp, mode))
        return ad.concat(g, features, axis=1)


class AvgPool(Layer):
    """Window-2, stride-2 pooling on every axis after the channel axis.

    Axes whose extent is already 1 are left alone.
    """

    name = "avg_pool"

    def __init__(self, rank: int, window: int = 2):
        self.rank, self.window = rank, window

    def __call__(self, g, x, mode):
        ext = x.shape[2:]
        window = tuple(min(self.window, e) for e in ext)
        return avg_pool(g, x, self.rank, window, window)


class Transition(Sequential):
    """Compression (norm -> relu -> 1-kernel conv) followed by average pooling."""

    def __init__(self, name: str, rank: int, in_channels: int, out_channels: int, rng: Rng,
                 dtype=np.float32, batch_norm: bool = True, path: str = "im2col"):
        spec = ConvSpec(rank, in_channels, out_channels, (1,) * rank, bias=not batch_norm)
        super().__init__(name, [norm_relu_conv(name, spec, rng, dtype, batch_norm, path), AvgPool(rank)])
        self.in_channels, self.out_channels = in_channels, out_channels


class GlobalAvgPool(Layer):
    name = "global_avg_pool"

    def __call__(self, g, x, mode):
        return global_avg_pool(g, x)


class Linear(Layer):
    def __init__(self, name: str, in_features: int, out_features: int, rng: Rng, dtype=np.float32):
        self.name = name
        self.weight = Parameter(f"{name}.weight", he_normal(rng, (in_features, out_features), in_features, dtype))
        self.bias = Parameter(f"{name}.bias", zeros([out_features], dtype))

    def own_parameters(self):
        return [self.weight, self.bias]

    def __call__(self, g, x, mode):
        return fully_connected(g, x, g.param(self.weight), g.param(self.bias))
