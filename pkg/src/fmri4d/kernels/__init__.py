"""Convolution kernel backends.

The compiled Cython extension is used when it imports; otherwise (or when
``FMRI4D_PURE_PYTHON=1`` is set) the numpy implementation is selected.
Both expose ``conv_direct``, ``im2col`` and ``col2im`` on 4-spatial-axis
arrays and agree to floating-point rounding.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _pykernels

try:
    if os.environ.get("FMRI4D_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced by FMRI4D_PURE_PYTHON")
    from . import _ckernels
except ImportError:
    _ckernels = None

BACKENDS: dict[str, ModuleType] = {"python": _pykernels}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels

BACKEND = "cython" if _ckernels is not None else "python"
_active = BACKENDS[BACKEND]


def get(name: str | None = None) -> ModuleType:
    """Kernel module by name; the active backend when ``name`` is None."""
    if name is None:
        return _active
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available (have {sorted(BACKENDS)})") from None


def use(name: str) -> None:
    """Switch the active backend for subsequent calls."""
    global _active, BACKEND
    _active = get(name)
    BACKEND = name


def conv_direct(x, w, stride, pad):
    return _active.conv_direct(x, w, tuple(stride), tuple(pad))


def im2col(x, kernel, stride, pad):
    return _active.im2col(x, tuple(kernel), tuple(stride), tuple(pad))


def col2im(cols, x_shape, kernel, stride, pad):
    return _active.col2im(cols, tuple(x_shape), tuple(kernel), tuple(stride), tuple(pad))


out_extents = _pykernels.out_extents
