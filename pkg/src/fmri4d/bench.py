"""Convolution kernel benchmark: direct vs im2col paths on each available backend.

A case is written as comma-separated ``key=value`` pairs, for example
``rank=4,cin=1,cout=16,in=32x32x32x15,k=3,s=1,p=1,n=1``. Omitted keys take
the defaults in :data:`CASE_DEFAULTS`; ``name`` labels the row.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .ops import ConvSpec, conv_forward
from .tensor import Rng, rand_normal

CASE_DEFAULTS = {"rank": "3", "cin": "1", "cout": "1", "in": "8x8x8", "k": "3", "s": "1", "p": "same", "n": "1"}

PRESETS = {
    "cnn4d-first": "name=cnn4d-first,rank=4,cin=1,cout=16,in=32x32x32x15,k=3,s=1,p=1,n=1",
    "dense3d": "name=dense3d,rank=3,cin=32,cout=8,in=16x16x16,k=3,n=2",
    "dense4d": "name=dense4d,rank=4,cin=16,cout=8,in=8x8x8x7,k=3,n=2",
    "gru-gate": "name=gru-gate,rank=3,cin=16,cout=16,in=16x16x16,k=3,n=1",
    "pointwise": "name=pointwise,rank=3,cin=24,cout=12,in=16x16x16,k=1,p=0,n=2",
}
DEFAULT_SWEEP = ("dense3d", "dense4d", "gru-gate", "pointwise")


@dataclass(frozen=True)
class BenchCase:
    name: str
    spec: ConvSpec
    batch: int
    extents: tuple[int, ...]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return (self.batch, self.spec.in_channels) + self.extents

    def describe(self) -> str:
        s = self.spec
        return (f"rank={s.rank} cin={s.in_channels} cout={s.out_channels} "
                f"in={'x'.join(map(str, self.extents))} k={'x'.join(map(str, s.kernel))} "
                f"s={'x'.join(map(str, s.stride))} p={'x'.join(map(str, s.padding))} n={self.batch}")


def _ints(text: str, rank: int) -> tuple[int, ...]:
    v = tuple(int(t) for t in text.split("x"))
    return v * rank if len(v) == 1 else v


def parse_case(text: str) -> BenchCase:
    text = PRESETS.get(text.strip(), text)
    fields = dict(CASE_DEFAULTS)
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, value = part.partition("=")
        if not sep or key not in set(CASE_DEFAULTS) | {"name"}:
            raise ValueError(f"bad bench case field {part!r}; keys: name, {', '.join(CASE_DEFAULTS)}")
        fields[key] = value
    rank = int(fields["rank"])
    kernel = _ints(fields["k"], rank)
    pad = tuple(k // 2 for k in kernel) if fields["p"] == "same" else _ints(fields["p"], rank)
    spec = ConvSpec(rank, int(fields["cin"]), int(fields["cout"]), kernel, _ints(fields["s"], rank), pad, bias=False)
    extents = _ints(fields["in"], rank)
    spec.output_extents(extents)
    return BenchCase(fields.get("name", "case"), spec, int(fields["n"]), extents)


def max_rel_error(a: np.ndarray, ref: np.ndarray) -> float:
    """``max|a - ref| / max|ref|`` (normwise; 0 when both are all zero)."""
    scale = float(np.max(np.abs(ref), initial=0.0))
    diff = float(np.max(np.abs(a.astype(np.float64) - ref.astype(np.float64)), initial=0.0))
    if scale == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return diff / scale


def _timed(fn, repeats: int):
    best, out = float("inf"), None
    for _ in range(repeats):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


@dataclass
class BenchRow:
    case: BenchCase
    backend: str
    dtype: str
    direct_s: float
    im2col_s: float
    max_rel_err: float
    tolerance: float

    @property
    def equal(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def line(self) -> str:
        return (f"case={self.case.name} backend={self.backend} dtype={self.dtype} {self.case.describe()} "
                f"direct_s={self.direct_s:.6f} im2col_s={self.im2col_s:.6f} "
                f"speedup={self.direct_s / max(self.im2col_s, 1e-12):.2f} "
                f"max_rel_err={self.max_rel_err:.3e} equal={int(self.equal)}")


def run_bench(cases: Iterable[BenchCase], backends: Sequence[str] | None = None, dtype=np.float32,
              repeats: int = 3, tolerance: float = 1e-5, seed: int = 0) -> list[BenchRow]:
    """Time both convolution paths on every backend and check they agree."""
    backends = list(kernels.BACKENDS) if backends is None else list(backends)
    dtype = np.dtype(dtype)
    rows = []
    active = kernels.BACKEND
    try:
        for case in cases:
            rng = Rng(seed)
            x = rand_normal(rng, case.input_shape, dtype=dtype)
            w = rand_normal(rng, case.spec.weight_shape, dtype=dtype)
            for name in backends:
                kernels.use(name)
                t_direct, direct = _timed(lambda: conv_forward(x, w, None, case.spec, "direct"), repeats)
                t_im2col, im2col = _timed(lambda: conv_forward(x, w, None, case.spec, "im2col"), repeats)
                err = max_rel_error(direct.data, im2col.data)
                rows.append(BenchRow(case, name, str(dtype), t_direct, t_im2col, err, tolerance))
    finally:
        kernels.use(active)
    return rows
