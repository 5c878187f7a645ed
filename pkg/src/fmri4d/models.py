"""The four architectures: CNN3D-TC, CNN3D-MS, convGRU-CNN3D and CNN4D.

All share one DenseNet core: an initial convolution, ``blocks`` dense blocks
of ``layers_per_block`` composite layers separated by transitions, a final
norm/relu, global average pooling and a two-way fully connected head. They
differ only in how the ``[N, 1, X, Y, Z, T]`` crop reaches the core:

* CNN3D-TC stacks time steps as input channels of a 3D core,
* CNN3D-MS feeds the voxel-wise temporal mean and population std,
* convGRU-CNN3D folds time with a :class:`~fmri4d.convgru.ConvGruCell`,
* CNN4D keeps time as a fourth convolution axis throughout.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from . import layers as L
from .autodiff import Graph, Node, Parameter
from .convgru import ConvGruCell
from .ops import ConvSpec
from .tensor import Rng, ShapeError, Tensor, wrap

VARIANTS = ("CNN3D-TC", "CNN3D-MS", "convGRU-CNN3D", "CNN4D")
_ALIASES = {v.lower(): v for v in VARIANTS} | {"tc": "CNN3D-TC", "ms": "CNN3D-MS", "convgru": "convGRU-CNN3D"}
N_CLASSES = 2


def parse_variant(name: str) -> str:
    try:
        return _ALIASES[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; valid variants: {', '.join(v.lower() for v in VARIANTS)}") from None


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "CNN4D"
    init_filters: int = 16
    growth_rate: int = 8
    layers_per_block: int = 5
    blocks: int = 3
    compression: float = 0.5
    batch_norm: bool = True
    gru_hidden: int = 16
    kernel: int = 3
    init_stride: int = 1
    input_shape: tuple[int, int, int, int] = (32, 32, 32, 15)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", parse_variant(self.variant))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.blocks < 1 or self.layers_per_block < 1:
            raise ValueError("blocks and layers_per_block must be >= 1")
        if not 0 < self.compression <= 1:
            raise ValueError(f"compression must lie in (0, 1], got {self.compression}")
        for name in ("init_filters", "growth_rate", "gru_hidden", "kernel", "init_stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.kernel % 2 != 1:
            raise ValueError("kernel extent must be odd")
        if len(self.input_shape) != 4 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be four positive extents (X, Y, Z, T), got {self.input_shape}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelSpec fields: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def conv_rank(self) -> int:
        return 4 if self.variant == "CNN4D" else 3


# -- temporal preprocessing --------------------------------------------------

def _check_crop(x: Tensor) -> None:
    if x.rank != 6 or x.shape[1] != 1:
        raise ShapeError(f"expected a [N, 1, X, Y, Z, T] crop, got {list(x.shape)}")


def stack_time_as_channels(x: Tensor) -> Tensor:
    """``[N, 1, X, Y, Z, T] -> [N, T, X, Y, Z]``; channel ``i`` is time step ``i``."""
    _check_crop(x)
    return wrap(np.ascontiguousarray(np.moveaxis(x.data[:, 0], -1, 1)))


def mean_std_volumes(x: Tensor) -> Tensor:
    """``[N, 1, X, Y, Z, T] -> [N, 2, X, Y, Z]``: temporal mean and population std."""
    _check_crop(x)
    a = x.data[:, 0]
    return wrap(np.stack([a.mean(axis=-1), a.std(axis=-1, ddof=0)], axis=1).astype(x.dtype, copy=False))


class _Preprocess(L.Layer):
    fn = None

    def __call__(self, g, x, mode):
        if x.requires_grad:
            raise ValueError(f"{self.name} is applied to input data only")
        return g.constant(type(self).fn(x.value))


class TimeAsChannels(_Preprocess):
    name = "time_as_channels"
    fn = staticmethod(stack_time_as_channels)


class MeanStd(_Preprocess):
    name = "mean_std"
    fn = staticmethod(mean_std_volumes)


# -- model -------------------------------------------------------------------

@dataclass
class Model:
    spec: ModelSpec
    layers: list[L.Layer]
    dtype: np.dtype
    path: str = "im2col"
    _params: dict[str, Parameter] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for p in (p for layer in self.layers for p in layer.parameters()):
            if p.name in self._params:
                raise ValueError(f"duplicate parameter name {p.name}")
            self._params[p.name] = p

    def walk(self) -> Iterator[L.Layer]:
        for layer in self.layers:
            yield from layer.walk()

    @property
    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    @property
    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.trainable]

    def parameter(self, name: str) -> Parameter:
        return self._params[name]

    @property
    def parameter_count(self) -> int:
        return sum(math.prod(p.shape) for p in self.trainable)

    def state_dict(self) -> dict[str, Tensor]:
        return {name: p.value for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, Tensor]) -> None:
        missing = sorted(set(self._params) - set(state))
        unexpected = sorted(set(state) - set(self._params))
        wrong = sorted(n for n in set(state) & set(self._params) if state[n].shape != self._params[n].shape)
        if missing or unexpected or wrong:
            raise ValueError(f"state mismatch: missing={missing} unexpected={unexpected} wrong_shape={wrong}")
        for name, value in state.items():
            self._params[name].value = value.astype(self.dtype)

    def check_input(self, x: Tensor) -> None:
        _check_crop(x)
        if x.shape[2:] != self.spec.input_shape:
            raise ShapeError(f"crop extents {list(x.shape[2:])} != model input {list(self.spec.input_shape)}")

    def forward(self, g: Graph, x: Tensor, mode: str = "eval") -> Node:
        """Record the forward pass on ``g`` and return the ``[N, 2]`` logits node."""
        self.check_input(x)
        node = g.constant(x.astype(self.dtype))
        for layer in self.layers:
            node = layer(g, node, mode)
        return node

    def logits(self, x: Tensor, mode: str = "eval") -> Tensor:
        return self.forward(Graph(), x, mode).value

    def __call__(self, x: Tensor, mode: str = "eval") -> Tensor:
        return self.logits(x, mode)


def build(spec: ModelSpec, dtype=np.float32, path: str = "im2col") -> Model:
    dtype = np.dtype(dtype)
    rng = Rng(spec.seed)
    bn = spec.batch_norm
    rank = spec.conv_rank
    layers: list[L.Layer] = []

    if spec.variant == "CNN3D-TC":
        layers.append(TimeAsChannels())
        channels = spec.input_shape[3]
    elif spec.variant == "CNN3D-MS":
        layers.append(MeanStd())
        channels = 2
    elif spec.variant == "convGRU-CNN3D":
        layers.append(ConvGruCell("gru", 1, spec.gru_hidden, spec.kernel, rng, dtype, path))
        channels = spec.gru_hidden
    else:
        channels = 1

    stem = ConvSpec(rank, channels, spec.init_filters, (spec.kernel,) * rank,
                    (spec.init_stride,) * rank, (spec.kernel // 2,) * rank, bias=not bn)
    layers.append(L.Conv("stem", stem, rng, dtype, path))
    channels = spec.init_filters
    for b in range(1, spec.blocks + 1):
        block = L.DenseBlock(f"block{b}", rank, channels, spec.growth_rate, spec.layers_per_block,
                             spec.kernel, rng, dtype, bn, path)
        layers.append(block)
        channels = block.out_channels
        if b < spec.blocks:
            out = max(1, int(math.floor(channels * spec.compression)))
            layers.append(L.Transition(f"transition{b}", rank, channels, out, rng, dtype, bn, path))
            channels = out
    if bn:
        layers.append(L.BatchNorm("head.bn", channels, dtype))
    layers += [L.ReLU(), L.GlobalAvgPool(), L.Linear("head.fc", channels, N_CLASSES, rng, dtype)]
    return Model(spec, layers, dtype, path)
