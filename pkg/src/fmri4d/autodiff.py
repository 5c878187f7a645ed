"""Tape-based reverse-mode automatic differentiation.

A :class:`Graph` is rebuilt for every forward pass. Operations append
:class:`Node` records in execution order, so the tape is already in
topological order and :func:`backward` walks it in reverse.

Gradients accumulate by addition: a node consumed twice (e.g. a convGRU
weight used at every time step) receives the sum of both contributions.
Call :meth:`Graph.zero_grad` before reusing a graph.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor import Rng, ShapeError, Tensor, sigmoid_array, wrap

BackwardFn = Callable[[np.ndarray, tuple[bool, ...]], Sequence[np.ndarray | None]]


class Parameter:
    """Named, mutable slot holding a tensor value.

    ``trainable=False`` marks buffers such as batch-norm running statistics:
    they are checkpointed but receive no gradient.
    """

    __slots__ = ("name", "value", "trainable")

    def __init__(self, name: str, value: Tensor, trainable: bool = True):
        self.name = name
        self.value = value
        self.trainable = trainable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        flag = "" if self.trainable else ", buffer"
        return f"Parameter({self.name!r}, {list(self.shape)}{flag})"


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple[Node, ...]
    value: Tensor
    backward_fn: BackwardFn | None = None
    param: Parameter | None = None
    requires_grad: bool = False
    _grad: np.ndarray | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> Tensor | None:
        return None if self._grad is None else wrap(np.array(self._grad))


class Graph:
    def __init__(self, track_kinks: bool = False):
        self.nodes: list[Node] = []
        self._param_nodes: dict[int, Node] = {}
        # activation masks of non-smooth ops, compared by gradcheck
        self.track_kinks = track_kinks
        self.kinks: list[bytes] = []

    def _append(self, **kw) -> Node:
        node = Node(id=len(self.nodes), **kw)
        self.nodes.append(node)
        return node

    def constant(self, value: Tensor) -> Node:
        return self._append(op="const", inputs=(), value=value)

    def param(self, p: Parameter) -> Node:
        """Leaf node for ``p``; repeated calls return the same node."""
        node = self._param_nodes.get(id(p))
        if node is None:
            node = self._append(op="param", inputs=(), value=p.value, param=p, requires_grad=p.trainable)
            self._param_nodes[id(p)] = node
        return node

    def record(self, op: str, inputs: Sequence[Node], value: Tensor, backward_fn: BackwardFn) -> Node:
        inputs = tuple(inputs)
        for i in inputs:
            if i.id >= len(self.nodes) or self.nodes[i.id] is not i:
                raise ValueError(f"input node {i.id} ({i.op}) belongs to a different graph")
        return self._append(
            op=op, inputs=inputs, value=value, backward_fn=backward_fn,
            requires_grad=any(i.requires_grad for i in inputs),
        )

    @property
    def parameters(self) -> list[Parameter]:
        return [n.param for n in self._param_nodes.values()]

    def zero_grad(self) -> None:
        for n in self.nodes:
            n._grad = None


_FAULTS: dict[str, float] = {}


@contextlib.contextmanager
def inject_fault(op: str, factor: float = 1.1):
    """Scale every gradient produced by ``op``'s backward rule (testing hook)."""
    _FAULTS[op] = factor
    try:
        yield
    finally:
        _FAULTS.pop(op, None)


def backward(graph: Graph, loss: Node, params: Iterable[Parameter] | None = None) -> dict[str, Tensor]:
    """Accumulate d(loss)/d(node) for every node and return parameter gradients.

    ``params`` defaults to the parameters used in the graph; any listed
    parameter the loss does not reach gets a zero gradient.
    """
    if loss.shape != (1,):
        raise ShapeError(f"loss must have shape [1], got {list(loss.shape)}")
    if graph.nodes[loss.id] is not loss:
        raise ValueError("loss node is not part of this graph")
    seed = np.ones((1,), dtype=loss.value.dtype)
    loss._grad = seed if loss._grad is None else loss._grad + seed
    pending: dict[int, np.ndarray] = {loss.id: seed}
    for node in reversed(graph.nodes[: loss.id + 1]):
        g = pending.pop(node.id, None)
        if g is None or node.backward_fn is None or not node.requires_grad:
            continue
        needs = tuple(i.requires_grad for i in node.inputs)
        grads = node.backward_fn(g, needs)
        factor = _FAULTS.get(node.op)
        for inp, gi, need in zip(node.inputs, grads, needs):
            if not need or gi is None:
                continue
            if factor is not None:
                gi = gi * factor
            if gi.shape != inp.shape:
                raise ShapeError(f"{node.op} backward produced {gi.shape} for input of shape {inp.shape}")
            inp._grad = gi if inp._grad is None else inp._grad + gi
            pending[inp.id] = gi if inp.id not in pending else pending[inp.id] + gi
    if params is None:
        params = graph.parameters
    out = {}
    for p in params:
        node = graph._param_nodes.get(id(p))
        if node is not None and node._grad is not None:
            out[p.name] = wrap(np.array(node._grad))
        else:
            out[p.name] = wrap(np.zeros(p.shape, dtype=p.value.dtype))
    return out


# -- differentiable elementwise ops -------------------------------------------

def _same(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def add(g: Graph, a: Node, b: Node) -> Node:
    _same(a, b, "add")
    return g.record("add", (a, b), wrap(a.value.data + b.value.data), lambda u, _: (u, u))


def sub(g: Graph, a: Node, b: Node) -> Node:
    _same(a, b, "sub")
    return g.record("sub", (a, b), wrap(a.value.data - b.value.data), lambda u, _: (u, -u))


def mul(g: Graph, a: Node, b: Node) -> Node:
    _same(a, b, "mul")
    x, y = a.value.data, b.value.data
    return g.record("mul", (a, b), wrap(x * y), lambda u, _: (u * y, u * x))


def scale(g: Graph, a: Node, s: float) -> Node:
    s = a.value.dtype.type(s)
    return g.record("scale", (a,), wrap(a.value.data * s), lambda u, _: (u * s,))


def relu(g: Graph, a: Node) -> Node:
    x = a.value.data
    mask = x > 0
    if g.track_kinks:
        g.kinks.append(np.packbits(mask).tobytes())
    return g.record("relu", (a,), wrap(np.where(mask, x, x.dtype.type(0))), lambda u, _: (u * mask,))


def sigmoid(g: Graph, a: Node) -> Node:
    y = sigmoid_array(a.value.data)
    return g.record("sigmoid", (a,), wrap(y), lambda u, _: (u * y * (1 - y),))


def tanh(g: Graph, a: Node) -> Node:
    y = np.tanh(a.value.data)
    return g.record("tanh", (a,), wrap(y), lambda u, _: (u * (1 - y * y),))


def exp(g: Graph, a: Node) -> Node:
    y = np.exp(a.value.data)
    return g.record("exp", (a,), wrap(y), lambda u, _: (u * y,))


def ln(g: Graph, a: Node) -> Node:
    x = a.value.data
    return g.record("ln", (a,), wrap(np.log(x)), lambda u, _: (u / x,))


def sum(g: Graph, a: Node) -> Node:  # noqa: A001 - mirrors the reduction name
    shape = a.shape
    return g.record(
        "sum", (a,), wrap(np.array([a.value.data.sum()], dtype=a.value.dtype)),
        lambda u, _: (np.full(shape, u[0], dtype=u.dtype),),
    )


def mean(g: Graph, a: Node) -> Node:
    shape, n = a.shape, a.value.size
    return g.record(
        "mean", (a,), wrap(np.array([a.value.data.mean()], dtype=a.value.dtype)),
        lambda u, _: (np.full(shape, u[0] / n, dtype=u.dtype),),
    )


def concat(g: Graph, nodes: Sequence[Node], axis: int = 1) -> Node:
    """Concatenate along ``axis`` (channels by default)."""
    if len(nodes) == 1:
        return nodes[0]
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + sizes)
    value = np.concatenate([n.value.data for n in nodes], axis=axis)

    def back(u, needs):
        out = []
        for lo, hi, need in zip(bounds[:-1], bounds[1:], needs):
            out.append(np.ascontiguousarray(np.take(u, np.arange(lo, hi), axis=axis)) if need else None)
        return out

    return g.record("concat", nodes, wrap(value), back)


def reshape(g: Graph, a: Node, shape: Sequence[int]) -> Node:
    old = a.shape
    return g.record("reshape", (a,), a.value.reshape(tuple(shape)), lambda u, _: (u.reshape(old),))


def take(g: Graph, a: Node, axis: int, index: int) -> Node:
    """Select one position along ``axis`` and drop that axis."""
    shape = a.shape
    value = np.ascontiguousarray(np.take(a.value.data, index, axis=axis))

    def back(u, _):
        full = np.zeros(shape, dtype=u.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = u
        return (full,)

    return g.record("take", (a,), wrap(value), back)


# -- gradient checking -------------------------------------------------------

Builder = Callable[[Rng], tuple[list[Parameter], Callable[[Graph], Node]]]


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    checked: int
    passed: bool
    kink_retries: int = 0
    note: str = ""


@dataclass
class GradcheckReport:
    tolerance: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def failures(self) -> list[ParamCheck]:
        return [p for p in self.params if not p.passed]

    def lines(self) -> list[str]:
        out = []
        for p in self.params:
            note = f" note={p.note!r}" if p.note else ""
            out.append(
                f"param={p.name} checked={p.checked} max_rel_err={p.max_rel_error:.3e} "
                f"kink_retries={p.kink_retries} status={'pass' if p.passed else 'FAIL'}{note}"
            )
        return out


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def gradcheck(builder: Builder, rng: Rng, tolerance: float = 1e-6, *, max_entries: int | None = None,
              step: float = 1e-4, min_step: float = 1e-9, richardson: bool = False) -> GradcheckReport:
    """Compare backprop gradients with central finite differences.

    ``builder(rng)`` returns ``(params, loss_fn)`` where ``loss_fn(graph)``
    builds the scalar loss from ``graph.param(p)`` leaves. Each checked entry
    uses ``h = step * max(1, |theta|)``. If the perturbation flips a ReLU
    mask (the loss is not smooth on ``[theta - h, theta + h]``), ``h`` is
    halved until the masks agree or ``h`` falls below ``min_step``.

    ``max_entries`` limits the number of randomly chosen entries checked per
    parameter tensor (all entries when None).

    With ``richardson=True`` the estimate is ``(4 D(h/2) - D(h)) / 3`` where
    ``D`` is the central difference, cancelling the ``h^2`` truncation term.
    Deep models with saturating gates need this to resolve errors below 1e-6.
    """
    params, loss_fn = builder(rng)
    report = GradcheckReport(tolerance)
    trainable = [p for p in params if p.trainable]
    if not trainable:
        return report

    graph = Graph()
    loss = loss_fn(graph)
    grads = backward(graph, loss, trainable)

    def evaluate() -> tuple[float, list[bytes]]:
        g = Graph(track_kinks=True)
        value = loss_fn(g).value.item()
        return value, g.kinks

    _, base_kinks = evaluate()

    for p in trainable:
        analytic = grads[p.name].data.reshape(-1)
        original = p.value
        flat = original.numpy().reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.generator.choice(flat.size, size=max_entries, replace=False))
        else:
            entries = np.arange(flat.size)
        worst, retries, note = 0.0, 0, ""
        try:
            for i in entries:
                theta = flat[i]
                h = step * max(1.0, abs(float(theta)))
                while True:
                    diffs, smooth = [], True
                    for hh in ((h, h / 2) if richardson else (h,)):
                        values = []
                        for sign in (1, -1):
                            flat[i] = theta + sign * hh
                            p.value = Tensor(flat.reshape(original.shape), copy=True)
                            value, kinks = evaluate()
                            values.append(value)
                            smooth = smooth and kinks == base_kinks
                        diffs.append((values[0] - values[1]) / (2 * hh))
                    flat[i] = theta
                    if smooth or h / 2 < min_step:
                        break
                    h /= 2
                    retries += 1
                numeric = (4 * diffs[1] - diffs[0]) / 3 if richardson else diffs[0]
                a = float(analytic[i])
                if not (math.isfinite(a) and math.isfinite(numeric)):
                    note = f"non-finite gradient at entry {int(i)} of {p.name}"
                    worst = math.inf
                    break
                worst = max(worst, relative_error(a, numeric))
        finally:
            p.value = original
        report.params.append(ParamCheck(p.name, worst, len(entries), worst < tolerance and not note, retries, note))
    return report
