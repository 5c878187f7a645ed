"""Convolutional GRU that folds a volume sequence into one hidden volume.

Gate equations (``*`` is a stride-1, extent-preserving 3D convolution)::

    z   = sigmoid(W_z * x + U_z * h + b_z)
    r   = sigmoid(W_r * x + U_r * h + b_r)
    h~  = tanh(W_h * x + U_h * (r . h) + b_h)
    h'  = (1 - z) . h + z . h~

``z`` is the update-toward-candidate gate: ``z -> 0`` keeps the previous
state. Each of the six convolutions carries its own bias, so the effective
gate bias is the sum of the input-side and hidden-side biases.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Node
from .layers import Conv, Layer
from .ops import ConvSpec
from .tensor import Rng, ShapeError, Tensor, zeros

GATES = ("z", "r", "h")


class ConvGruCell(Layer):
    def __init__(self, name: str, in_channels: int, hidden_channels: int, kernel: int, rng: Rng,
                 dtype=np.float32, path: str = "im2col"):
        if kernel % 2 != 1:
            raise ValueError(f"gate kernel extent must be odd to preserve extents, got {kernel}")
        self.name = name
        self.in_channels, self.hidden_channels, self.kernel = in_channels, hidden_channels, kernel
        self.W = {
            gate: Conv(f"{name}.W_{gate}", ConvSpec.same(3, in_channels, hidden_channels, kernel), rng, dtype, path)
            for gate in GATES
        }
        self.U = {
            gate: Conv(f"{name}.U_{gate}", ConvSpec.same(3, hidden_channels, hidden_channels, kernel), rng, dtype, path)
            for gate in GATES
        }

    def children(self):
        return [self.W[g] for g in GATES] + [self.U[g] for g in GATES]

    def step(self, g: Graph, x_t: Node, h_prev: Node, mode: str = "train") -> Node:
        if x_t.shape[2:] != h_prev.shape[2:] or x_t.shape[0] != h_prev.shape[0]:
            raise ShapeError(f"x_t {list(x_t.shape)} and h_prev {list(h_prev.shape)} disagree")
        if h_prev.shape[1] != self.hidden_channels:
            raise ShapeError(f"h_prev has {h_prev.shape[1]} channels, cell has {self.hidden_channels}")
        z = ad.sigmoid(g, ad.add(g, self.W["z"](g, x_t, mode), self.U["z"](g, h_prev, mode)))
        r = ad.sigmoid(g, ad.add(g, self.W["r"](g, x_t, mode), self.U["r"](g, h_prev, mode)))
        gated = ad.mul(g, r, h_prev)
        candidate = ad.tanh(g, ad.add(g, self.W["h"](g, x_t, mode), self.U["h"](g, gated, mode)))
        # (1 - z) h + z h~  ==  h + z (h~ - h)
        return ad.add(g, h_prev, ad.mul(g, z, ad.sub(g, candidate, h_prev)))

    def sequence(self, g: Graph, x: Node, h0: Node | None = None, mode: str = "train") -> Node:
        """Fold :meth:`step` over ``t = 0 .. T-1`` of ``x[N, Ci, X, Y, Z, T]``; return the last state."""
        if x.value.rank != 6:
            raise ShapeError(f"sequence input must be [N, C, X, Y, Z, T], got {list(x.shape)}")
        n, _, *spatial, steps = x.shape
        h = h0 if h0 is not None else g.constant(zeros([n, self.hidden_channels, *spatial], x.value.dtype))
        for t in range(steps):
            h = self.step(g, ad.take(g, x, axis=5, index=t), h, mode)
        return h

    def __call__(self, g, x, mode):
        return self.sequence(g, x, mode=mode)


def gru_step(cell: ConvGruCell, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """One recurrence step on plain tensors."""
    g = Graph()
    return cell.step(g, g.constant(x_t), g.constant(h_prev)).value


def gru_sequence(cell: ConvGruCell, x: Tensor, h0: Tensor | None = None) -> Tensor:
    """Final hidden state after folding the whole sequence (``h0`` defaults to zeros)."""
    g = Graph()
    return cell.sequence(g, g.constant(x), None if h0 is None else g.constant(h0)).value
